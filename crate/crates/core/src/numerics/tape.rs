use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Convolution geometry for im2col. Square kernel, zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Domain-specific differentiable operation (e.g. data-consistency blocks)
/// registered on the tape from outside this module.
pub trait TapeOp: std::fmt::Debug {
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One cotangent per input, `None` where no gradient is needed.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, cot: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Matmul(Var, Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    RowNorm(Var, f64),
    L2NormRows(Var, f64),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Im2Col(Var, ConvGeom),
    Upsample(Var, usize, usize),
    NchwFromRows(Var, usize, usize, usize),
    RowsFromNchw(Var),
    Custom(Box<dyn TapeOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use reverse-mode gradient tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a leaf, zero-filled when the leaf is off every path.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.dims()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b)
            | Op::MulRow(a, b) | Op::Matmul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::RowNorm(a, _)
            | Op::L2NormRows(a, _)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Im2Col(a, _)
            | Op::Upsample(a, _, _)
            | Op::NchwFromRows(a, _, _, _)
            | Op::RowsFromNchw(a) => self.nodes[a.0].needs_grad,
            Op::ConcatRows(vs) | Op::Custom(_, vs) => {
                vs.iter().any(|v| self.nodes[v.0].needs_grad)
            }
        };
        debug_assert!(value.all_finite(), "non-finite tape value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("mul: shape mismatch"));
        }
        let mut v = ta.clone();
        for (x, y) in v.data_mut().iter_mut().zip(tb.data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// mat[T,d] + row[d], broadcast over rows.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(mat), self.value(row));
        let d = *m.dims().last().ok_or_else(|| Error::shape("add_row: 0-d"))?;
        if r.numel() != d {
            return Err(Error::shape("add_row: row length mismatch"));
        }
        let mut v = m.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += r.data()[i % d];
        }
        Ok(self.push(v, Op::AddRow(mat, row)))
    }

    /// mat[T,d] ⊙ row[d], broadcast over rows.
    pub fn mul_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(mat), self.value(row));
        let d = *m.dims().last().ok_or_else(|| Error::shape("mul_row: 0-d"))?;
        if r.numel() != d {
            return Err(Error::shape("mul_row: row length mismatch"));
        }
        let mut v = m.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= r.data()[i % d];
        }
        Ok(self.push(v, Op::MulRow(mat, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_last_axis(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Mean of −log softmax(logits)[t, target_t] over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (t, vocab) = (l.dims()[0], l.dims()[1]);
        if targets.len() != t {
            return Err(Error::shape("cross_entropy: target count mismatch"));
        }
        let mut total = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            if tgt >= vocab {
                return Err(Error::index(format!("target {tgt} out of range {vocab}")));
            }
            let r = &l.data()[row * vocab..(row + 1) * vocab];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - r[tgt];
        }
        let v = Tensor::scalar(total / t as f64);
        Ok(self.push(v, Op::CrossEntropy(logits, targets.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let v = Tensor::scalar(s / t.data().len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    /// Per-row standardization (zero mean, unit std over the last axis).
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let d = *t.dims().last().unwrap();
        let rows = t.numel() / d;
        let mut v = t.clone();
        for r in 0..rows {
            let s = &mut v.data_mut()[r * d..(r + 1) * d];
            let mu = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in s.iter_mut() {
                *x = (*x - mu) * inv;
            }
        }
        self.push(v, Op::RowNorm(a, eps))
    }

    /// Rows scaled to (near-)unit L2 norm: x / sqrt(‖x‖² + eps).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let d = *t.dims().last().unwrap();
        let rows = t.numel() / d;
        let mut v = t.clone();
        for r in 0..rows {
            let s = &mut v.data_mut()[r * d..(r + 1) * d];
            let n = (s.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for x in s.iter_mut() {
                *x /= n;
            }
        }
        self.push(v, Op::L2NormRows(a, eps))
    }

    /// Rows of `table` selected by index.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.dims()[0], t.dims()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::index(format!("gather index {i} out of range {n}")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_vec(&[indices.len(), d], data)?;
        Ok(self.push(v, Op::Gather(table, indices.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: empty"));
        }
        let d = self.value(parts[0]).dims()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims()[1] != d {
                return Err(Error::shape("concat_rows: column mismatch"));
            }
            rows += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&[rows, d], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.dims()[0], t.dims()[1]);
        if start + len > rows {
            return Err(Error::shape("slice_rows: out of range"));
        }
        let v = Tensor::from_vec(&[len, d], t.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start, len)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(dims)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// 2-D matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = transpose2(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// [cin,h,w] → [out_h*out_w, cin*k*k] patch matrix.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let t = self.value(a);
        if t.dims() != [geom.cin, geom.h, geom.w] {
            return Err(Error::shape(format!(
                "im2col: input {:?} vs geom {:?}",
                t.dims(),
                geom
            )));
        }
        let v = im2col_fwd(t, &geom);
        Ok(self.push(v, Op::Im2Col(a, geom)))
    }

    /// Bilinear resize of [c,h,w] to [c,oh,ow].
    pub fn upsample_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(a);
        if t.dims().len() != 3 {
            return Err(Error::shape("upsample: expected [c,h,w]"));
        }
        let v = bilinear_resize(t, oh, ow);
        Ok(self.push(v, Op::Upsample(a, oh, ow)))
    }

    /// [h*w, c] rows → [c,h,w] channel-major layout.
    pub fn nchw_from_rows(&mut self, a: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        if t.dims() != [h * w, c] {
            return Err(Error::shape("nchw_from_rows: shape mismatch"));
        }
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = t.data()[p * c + ch];
            }
        }
        let v = Tensor::from_vec(&[c, h, w], data)?;
        Ok(self.push(v, Op::NchwFromRows(a, c, h, w)))
    }

    /// [c,h,w] → [h*w, c] rows.
    pub fn rows_from_nchw(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.dims().len() != 3 {
            return Err(Error::shape("rows_from_nchw: expected [c,h,w]"));
        }
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[p * c + ch] = t.data()[ch * h * w + p];
            }
        }
        let v = Tensor::from_vec(&[h * w, c], data)?;
        Ok(self.push(v, Op::RowsFromNchw(a)))
    }

    pub fn custom(&mut self, op: Box<dyn TapeOp>, parents: &[Var]) -> Result<Var> {
        let inputs: Vec<&Tensor> = parents.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&inputs)?;
        Ok(self.push(out, Op::Custom(op, parents.to_vec())))
    }

    /// Mean squared error between two same-shape vars, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward: loss must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0).reshaped(self.value(loss).dims())?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let cot = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &cot, &mut grads)?;
            grads[i] = Some(cot);
        }
        Ok(GradStore { grads })
    }

    fn accumulate(&self, i: usize, cot: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
            Ok(())
        };
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    add_to(grads, *a, cot.clone())?;
                }
                if wants(*b) {
                    add_to(grads, *b, cot.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_to(grads, *a, cot.clone())?;
                }
                if wants(*b) {
                    add_to(grads, *b, cot.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let mut g = cot.clone();
                    for (x, y) in g.data_mut().iter_mut().zip(val(*b).data()) {
                        *x *= y;
                    }
                    add_to(grads, *a, g)?;
                }
                if wants(*b) {
                    let mut g = cot.clone();
                    for (x, y) in g.data_mut().iter_mut().zip(val(*a).data()) {
                        *x *= y;
                    }
                    add_to(grads, *b, g)?;
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    add_to(grads, *a, cot.scale(*s))?;
                }
            }
            Op::AddRow(m, r) => {
                if wants(*m) {
                    add_to(grads, *m, cot.clone())?;
                }
                if wants(*r) {
                    let d = val(*r).numel();
                    let mut g = vec![0.0; d];
                    for (k, x) in cot.data().iter().enumerate() {
                        g[k % d] += x;
                    }
                    add_to(grads, *r, Tensor::from_vec(val(*r).dims(), g)?)?;
                }
            }
            Op::MulRow(m, r) => {
                let d = val(*r).numel();
                if wants(*m) {
                    let mut g = cot.clone();
                    for (k, x) in g.data_mut().iter_mut().enumerate() {
                        *x *= val(*r).data()[k % d];
                    }
                    add_to(grads, *m, g)?;
                }
                if wants(*r) {
                    let mut g = vec![0.0; d];
                    for (k, x) in cot.data().iter().enumerate() {
                        g[k % d] += x * val(*m).data()[k];
                    }
                    add_to(grads, *r, Tensor::from_vec(val(*r).dims(), g)?)?;
                }
            }
            Op::Matmul(a, b) => {
                if wants(*a) {
                    add_to(grads, *a, matmul_nt(cot, val(*b))?)?;
                }
                if wants(*b) {
                    add_to(grads, *b, matmul_tn(val(*a), cot)?)?;
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let mut g = cot.clone();
                    for (x, xin) in g.data_mut().iter_mut().zip(val(*a).data()) {
                        *x *= gelu_deriv(*xin);
                    }
                    add_to(grads, *a, g)?;
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let mut g = cot.clone();
                    for (x, xin) in g.data_mut().iter_mut().zip(val(*a).data()) {
                        if *xin <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    add_to(grads, *a, g)?;
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let d = *y.dims().last().unwrap();
                    let rows = y.numel() / d;
                    let mut g = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * d..(r + 1) * d];
                        let cs = &cot.data()[r * d..(r + 1) * d];
                        let s: f64 = ys.iter().zip(cs).map(|(y, c)| y * c).sum();
                        for k in 0..d {
                            g[r * d + k] = ys[k] * (cs[k] - s);
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(val(*a).dims(), g)?)?;
                }
            }
            Op::CrossEntropy(l, targets) => {
                if wants(*l) {
                    let probs = softmax_last_axis(val(*l));
                    let vdim = probs.dims()[1];
                    let t = probs.dims()[0];
                    let scale = cot.item() / t as f64;
                    let mut g = probs.scale(scale);
                    for (row, &tgt) in targets.iter().enumerate() {
                        g.data_mut()[row * vdim + tgt] -= scale;
                    }
                    add_to(grads, *l, g)?;
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    add_to(grads, *a, Tensor::full(val(*a).dims(), cot.item()))?;
                }
            }
            Op::MeanAll(a) => {
                if wants(*a) {
                    let n = val(*a).numel() as f64;
                    add_to(grads, *a, Tensor::full(val(*a).dims(), cot.item() / n))?;
                }
            }
            Op::RowNorm(a, eps) => {
                if wants(*a) {
                    let x = val(*a);
                    let xhat = &node.value;
                    let d = *x.dims().last().unwrap();
                    let rows = x.numel() / d;
                    let mut g = vec![0.0; x.numel()];
                    for r in 0..rows {
                        let xs = &x.data()[r * d..(r + 1) * d];
                        let hs = &xhat.data()[r * d..(r + 1) * d];
                        let cs = &cot.data()[r * d..(r + 1) * d];
                        let mu = xs.iter().sum::<f64>() / d as f64;
                        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mg = cs.iter().sum::<f64>() / d as f64;
                        let mgh = cs.iter().zip(hs).map(|(c, h)| c * h).sum::<f64>() / d as f64;
                        for k in 0..d {
                            g[r * d + k] = (cs[k] - mg - hs[k] * mgh) * inv;
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(x.dims(), g)?)?;
                }
            }
            Op::L2NormRows(a, eps) => {
                if wants(*a) {
                    let x = val(*a);
                    let d = *x.dims().last().unwrap();
                    let rows = x.numel() / d;
                    let mut g = vec![0.0; x.numel()];
                    for r in 0..rows {
                        let xs = &x.data()[r * d..(r + 1) * d];
                        let cs = &cot.data()[r * d..(r + 1) * d];
                        let s: f64 = xs.iter().map(|v| v * v).sum();
                        let n = (s + eps).sqrt();
                        let xg: f64 = xs.iter().zip(cs).map(|(x, c)| x * c).sum();
                        for k in 0..d {
                            g[r * d + k] = cs[k] / n - xs[k] * xg / (n * n * n);
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(x.dims(), g)?)?;
                }
            }
            Op::Gather(t, indices) => {
                if wants(*t) {
                    let table = val(*t);
                    let d = table.dims()[1];
                    let mut g = vec![0.0; table.numel()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for k in 0..d {
                            g[idx * d + k] += cot.data()[row * d + k];
                        }
                    }
                    add_to(grads, *t, Tensor::from_vec(table.dims(), g)?)?;
                }
            }
            Op::ConcatRows(parts) => {
                let d = node.value.dims()[1];
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).dims()[0];
                    if wants(p) {
                        let g = Tensor::from_vec(
                            &[rows, d],
                            cot.data()[off * d..(off + rows) * d].to_vec(),
                        )?;
                        add_to(grads, p, g)?;
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                if wants(*a) {
                    let src = val(*a);
                    let d = src.dims()[1];
                    let mut g = vec![0.0; src.numel()];
                    g[start * d..(start + len) * d].copy_from_slice(cot.data());
                    add_to(grads, *a, Tensor::from_vec(src.dims(), g)?)?;
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    add_to(grads, *a, cot.reshaped(val(*a).dims())?)?;
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    add_to(grads, *a, transpose2(cot)?)?;
                }
            }
            Op::Im2Col(a, geom) => {
                if wants(*a) {
                    add_to(grads, *a, col2im(cot, geom)?)?;
                }
            }
            Op::Upsample(a, oh, ow) => {
                if wants(*a) {
                    debug_assert_eq!(node.value.dims()[1..], [*oh, *ow]);
                    let src = val(*a);
                    add_to(grads, *a, bilinear_resize_adjoint(cot, src.dims()[1], src.dims()[2])?)?;
                }
            }
            Op::NchwFromRows(a, c, h, w) => {
                if wants(*a) {
                    let (c, h, w) = (*c, *h, *w);
                    let mut g = vec![0.0; c * h * w];
                    for p in 0..h * w {
                        for ch in 0..c {
                            g[p * c + ch] = cot.data()[ch * h * w + p];
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&[h * w, c], g)?)?;
                }
            }
            Op::RowsFromNchw(a) => {
                if wants(*a) {
                    let src = val(*a);
                    let (c, h, w) = (src.dims()[0], src.dims()[1], src.dims()[2]);
                    let mut g = vec![0.0; c * h * w];
                    for p in 0..h * w {
                        for ch in 0..c {
                            g[ch * h * w + p] = cot.data()[p * c + ch];
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(src.dims(), g)?)?;
                }
            }
            Op::Custom(op, parents) => {
                let inputs: Vec<&Tensor> = parents.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = op.backward(&inputs, &node.value, cot);
                for (p, g) in parents.iter().zip(gs) {
                    if let Some(g) = g {
                        if wants(*p) {
                            add_to(grads, *p, g)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_last_axis(t: &Tensor) -> Tensor {
    let d = *t.dims().last().unwrap_or(&1);
    let rows = t.numel() / d;
    let mut v = t.clone();
    for r in 0..rows {
        let s = &mut v.data_mut()[r * d..(r + 1) * d];
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in s.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in s.iter_mut() {
            *x /= z;
        }
    }
    v
}

fn im2col_fwd(t: &Tensor, g: &ConvGeom) -> Tensor {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.cin * g.k * g.k;
    let mut out = vec![0.0; oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for c in 0..g.cin {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let col = (c * g.k + ky) * g.k + kx;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            out[row * cols + col] =
                                t.data()[(c * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh * ow, cols], out).unwrap()
}

fn col2im(cot: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.cin * g.k * g.k;
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for c in 0..g.cin {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let col = (c * g.k + ky) * g.k + kx;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            out[(c * g.h + iy as usize) * g.w + ix as usize] +=
                                cot.data()[row * cols + col];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.cin, g.h, g.w], out)
}

struct LinWeights {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w: Vec<f64>,
}

fn axis_weights(src: usize, dst: usize) -> LinWeights {
    let mut i0 = Vec::with_capacity(dst);
    let mut i1 = Vec::with_capacity(dst);
    let mut w = Vec::with_capacity(dst);
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5)
            .clamp(0.0, (src - 1) as f64);
        let a = s.floor() as usize;
        let b = (a + 1).min(src - 1);
        i0.push(a);
        i1.push(b);
        w.push(s - a as f64);
    }
    LinWeights { i0, i1, w }
}

/// Bilinear resize of [c,h,w] to [c,oh,ow], align-corners=false convention.
pub fn bilinear_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let wy = axis_weights(h, oh);
    let wx = axis_weights(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (y0, y1, fy) = (wy.i0[y], wy.i1[y], wy.w[y]);
                let (x0, x1, fx) = (wx.i0[x], wx.i1[x], wx.w[x]);
                let v = plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + plane[y0 * w + x1] * (1.0 - fy) * fx
                    + plane[y1 * w + x0] * fy * (1.0 - fx)
                    + plane[y1 * w + x1] * fy * fx;
                out[(ch * oh + y) * ow + x] = v;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

fn bilinear_resize_adjoint(cot: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, oh, ow) = (cot.dims()[0], cot.dims()[1], cot.dims()[2]);
    let wy = axis_weights(h, oh);
    let wx = axis_weights(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = cot.data()[(ch * oh + y) * ow + x];
                let (y0, y1, fy) = (wy.i0[y], wy.i1[y], wy.w[y]);
                let (x0, x1, fx) = (wx.i0[x], wx.i1[x], wx.w[x]);
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn transpose2(t: &Tensor) -> Result<Tensor> {
    if t.dims().len() != 2 {
        return Err(Error::shape("transpose: expected 2-D"));
    }
    let (r, c) = (t.dims()[0], t.dims()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.set2(j, i, t.data()[i * c + j]);
        }
    }
    Ok(out)
}

/// Area-average downsample of [c,h,w] by integer factor. Plain function,
/// used only inside detached residual loops.
pub fn downsample_area(t: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    debug_assert!(h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += t.data()[(ch * h + y * factor + dy) * w + x * factor + dx];
                    }
                }
                out[(ch * oh + y) * ow + x] = s * inv;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let s = tape.softmax(x);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        for g in grads.get(x).unwrap().data() {
            assert!(g.abs() < 1e-12, "grad of constant function must vanish, got {g}");
        }
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(&[1, 3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap(),
        );
        let s = tape.softmax(x);
        let v = tape.value(s).data().to_vec();
        assert!((v[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((v[2] - 3.0 / 6.0).abs() < 1e-12);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_stabilized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(x);
        let v = tape.value(s).data();
        assert!(v[0] > 0.999999 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn uniform_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let s = tape.softmax(x);
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4096]));
        let ce = tape.cross_entropy(x, &[7]).unwrap();
        assert!((tape.value(ce).item() - (4096.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_binary() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let ce = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(ce).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_logit() {
        let mut tape = Tape::new();
        let mut l = Tensor::zeros(&[1, 4]);
        l.data_mut()[2] = 200.0;
        let x = tape.constant(l);
        let ce = tape.cross_entropy(x, &[2]).unwrap();
        assert!(tape.value(ce).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(tape.cross_entropy(x, &[4]).is_err());
    }

    #[test]
    fn matmul_sum_gradient_is_ones_bt() {
        // d/dA sum(A·B) = ones · Bᵀ
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // row sums of B: [3, 7]
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(2.0));
        let l = tape.sum_all(x);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, &Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn upsample_constant_preserved() {
        let t = Tensor::full(&[1, 1, 1], 3.5);
        let up = bilinear_resize(&t, 4, 4);
        assert!(up.data().iter().all(|v| (*v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn downsample_area_mean() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = downsample_area(&t, 2);
        assert_eq!(d.data(), &[2.5]);
    }
}
