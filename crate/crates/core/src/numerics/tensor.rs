use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Complex tensors store interleaved re/im
/// pairs, so `data.len() == numel * 2` when `complex` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    complex: bool,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n], complex: false }
    }

    pub fn complex_zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; 2 * n], complex: true }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n], complex: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![], data: vec![v], complex: false }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data, complex: false })
    }

    pub fn complex_from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != 2 * n {
            return Err(Error::shape(format!(
                "complex data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data, complex: true })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Logical element count (complex elements count once).
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.dims, dims
            )));
        }
        let mut t = self.clone();
        t.dims = dims.to_vec();
        Ok(t)
    }

    /// Row count / column count for a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }
    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let w = self.dims[1];
        self.data[r * w + c] = v;
    }

    /// Complex element at flat logical index i.
    pub fn c_get(&self, i: usize) -> (f64, f64) {
        (self.data[2 * i], self.data[2 * i + 1])
    }
    pub fn c_set(&mut self, i: usize, re: f64, im: f64) {
        self.data[2 * i] = re;
        self.data[2 * i + 1] = im;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::training(format!("non-finite values in {ctx}")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut t = self.clone();
        for v in t.data.iter_mut() {
            *v = f(*v);
        }
        t
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims || self.complex != other.complex {
            return Err(Error::shape("add: shape mismatch"));
        }
        let mut t = self.clone();
        for (a, b) in t.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(t)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims || self.complex != other.complex {
            return Err(Error::shape("sub: shape mismatch"));
        }
        let mut t = self.clone();
        for (a, b) in t.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(t)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Complex [H,W] image viewed as a real [2,H,W] channel tensor.
    pub fn complex_to_channels(&self) -> Tensor {
        debug_assert!(self.complex);
        let n = self.numel();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[i] = self.data[2 * i];
            data[n + i] = self.data[2 * i + 1];
        }
        let mut dims = vec![2];
        dims.extend_from_slice(&self.dims);
        Tensor { dims, data, complex: false }
    }

    /// Inverse of `complex_to_channels`.
    pub fn channels_to_complex(&self) -> Tensor {
        debug_assert!(!self.complex && self.dims[0] == 2);
        let dims: Vec<usize> = self.dims[1..].to_vec();
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[2 * i] = self.data[i];
            data[2 * i + 1] = self.data[n + i];
        }
        Tensor { dims, data, complex: true }
    }

    /// Pointwise magnitude of a complex tensor, as a real tensor.
    pub fn magnitude(&self) -> Tensor {
        debug_assert!(self.complex);
        let n = self.numel();
        let mut data = vec![0.0; n];
        for i in 0..n {
            let (re, im) = self.c_get(i);
            data[i] = (re * re + im * im).sqrt();
        }
        Tensor { dims: self.dims.clone(), data, complex: false }
    }

    /// Real tensor promoted to complex with zero imaginary part.
    pub fn to_complex(&self) -> Tensor {
        debug_assert!(!self.complex);
        let n = self.numel();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[2 * i] = self.data[i];
        }
        Tensor { dims: self.dims.clone(), data, complex: true }
    }
}

/// c = a[m,k] * b[k,n], ikj loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims.len() != 2 || b.dims.len() != 2 || a.dims[1] != b.dims[0] {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.dims, b.dims
        )));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], c)
}

/// c = aᵀ[k,m]ᵀ... i.e. a[k,m] treated transposed: result [m,n] = aᵀ * b.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(Error::shape("matmul_tn: inner dims"));
    }
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], c)
}

/// result [m,k] = a[m,n] * b[k,n]ᵀ.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = (a.dims[0], a.dims[1]);
    let (k, n2) = (b.dims[0], b.dims[1]);
    if n != n2 {
        return Err(Error::shape("matmul_nt: inner dims"));
    }
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b.data[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    Tensor::from_vec(&[m, k], c)
}
