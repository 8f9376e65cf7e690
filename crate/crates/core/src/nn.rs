//! Shared building blocks for the conv/transformer models: tape-level
//! layers and seeded initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ConvGeom, Tape, Tensor, Var};

/// 3×3 conv on a [cin,h,w] var. Weight layout [cin*9, cout], bias [cout].
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
) -> Result<Var> {
    let dims = tape.value(x).dims().to_vec();
    let geom = ConvGeom { cin: dims[0], h: dims[1], w: dims[2], k: 3, stride, pad: 1 };
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cout = tape.value(weight).dims()[1];
    let cols = tape.im2col(x, geom)?;
    let y = tape.matmul(cols, weight)?;
    let y = tape.add_row(y, bias)?;
    tape.nchw_from_rows(y, cout, oh, ow)
}

/// Two 3×3 convs with ReLU and a skip connection; channel-preserving.
pub fn res_block(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = conv2d(tape, x, w1, b1, 1)?;
    let h = tape.relu(h);
    let h = conv2d(tape, h, w2, b2, 1)?;
    tape.add(x, h)
}

/// 2× sub-pixel rearrangement of a [4c,h,w] var into [c,2h,2w]: output
/// pixel (y,x) of channel oc reads input channel oc·4 + (y%2)·2 + (x%2)
/// at (y/2, x/2). Pure data movement, expressed through a gather so the
/// gradient is the inverse scatter.
pub fn pixel_shuffle2(tape: &mut Tape, x: Var) -> Result<Var> {
    let dims = tape.value(x).dims().to_vec();
    let (c4, h, w) = (dims[0], dims[1], dims[2]);
    let c = c4 / 4;
    let rows = tape.rows_from_nchw(x)?; // [h*w, 4c], element (p, ch)
    let flat = tape.reshape(rows, &[h * w * c4, 1])?;
    let mut idx = Vec::with_capacity(h * w * c4);
    for y in 0..2 * h {
        for xx in 0..2 * w {
            for oc in 0..c {
                let p = (y / 2) * w + xx / 2;
                let ch = oc * 4 + (y % 2) * 2 + (xx % 2);
                idx.push(p * c4 + ch);
            }
        }
    }
    let g = tape.gather(flat, &idx)?;
    let rows2 = tape.reshape(g, &[4 * h * w, c])?;
    tape.nchw_from_rows(rows2, c, 2 * h, 2 * w)
}

/// Linear layer on row-major activations: y = x·W + b.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_row(y, bias)
}

/// He-uniform fan-in initializer.
pub fn he_uniform(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Scaled normal initializer.
pub fn normal_init(dims: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// 3×3 conv weight [c*9, c] acting as the identity map.
pub fn identity_conv_weight(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c * 9, c]);
    for ch in 0..c {
        w.set2(ch * 9 + 4, ch, 1.0); // center tap
    }
    w
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
