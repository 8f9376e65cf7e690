//! Data-consistency block: blend predicted k-space with the measured
//! samples at sampled locations, per coil, then coil-combine back. The
//! whole map is differentiable through the tape, including the blend
//! weight μ in soft mode.

use crate::error::{Error, Result};
use crate::imaging::{cmul, conj_mul, dft2, mask_mul, FftDirection, ImagingOperator};
use crate::numerics::{Tape, TapeOp, Tensor, Var};

/// Soft: sampled k-space becomes (k + μ·y)/(1+μ); μ=0 is the identity.
/// Hard: sampled k-space is replaced with y outright (the μ→∞ limit).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DcMode {
    Soft(f64),
    Hard,
}

fn coil_slice(y: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::complex_zeros(&[h, w]);
    for p in 0..h * w {
        let (re, im) = y.c_get(c * h * w + p);
        out.c_set(p, re, im);
    }
    out
}

/// x' = Σ_c conj(C_c) · F⁻¹( (1−M)⊙F(C_c x) + M⊙blend ) on a complex
/// [H,W] image.
pub fn dc_apply(x: &Tensor, op: &ImagingOperator, y: &Tensor, mode: DcMode) -> Result<Tensor> {
    let (h, w, nc) = (op.h(), op.w(), op.ncoils());
    if x.dims() != [h, w] || !x.is_complex() {
        return Err(Error::shape("dc_apply: image shape mismatch"));
    }
    if y.dims() != [nc, h, w] || !y.is_complex() {
        return Err(Error::shape("dc_apply: k-space shape mismatch"));
    }
    // weight on the predicted k-space at sampled locations
    let (wk, wy) = match mode {
        DcMode::Soft(mu) => (1.0 / (1.0 + mu), mu / (1.0 + mu)),
        DcMode::Hard => (0.0, 1.0),
    };
    let mask = &op.mask.pattern;
    let mut out = Tensor::complex_zeros(&[h, w]);
    for c in 0..nc {
        let k = dft2(&cmul(&op.coil(c), x)?, FftDirection::Forward)?;
        let yc = coil_slice(y, c, h, w);
        let mut blended = Tensor::complex_zeros(&[h, w]);
        for p in 0..h * w {
            let m = mask.data()[p];
            let (kr, ki) = k.c_get(p);
            let (yr, yi) = yc.c_get(p);
            // (1−M)·k + M·(wk·k + wy·y)
            let fk = (1.0 - m) + m * wk;
            blended.c_set(p, fk * kr + m * wy * yr, fk * ki + m * wy * yi);
        }
        let img = dft2(&blended, FftDirection::Inverse)?;
        out = out.add(&conj_mul(&op.coil(c), &img)?)?;
    }
    Ok(out)
}

/// The linear, self-adjoint part of `dc_apply`:
/// L(x) = Σ_c conj(C_c) F⁻¹( ((1−M) + M·w_k) ⊙ F(C_c x) ).
fn dc_linear(x: &Tensor, op: &ImagingOperator, wk: f64) -> Result<Tensor> {
    let (h, w, nc) = (op.h(), op.w(), op.ncoils());
    let mask = &op.mask.pattern;
    let mut out = Tensor::complex_zeros(&[h, w]);
    for c in 0..nc {
        let k = dft2(&cmul(&op.coil(c), x)?, FftDirection::Forward)?;
        let mut weighted = k.clone();
        for p in 0..h * w {
            let m = mask.data()[p];
            let f = (1.0 - m) + m * wk;
            let (re, im) = k.c_get(p);
            weighted.c_set(p, f * re, f * im);
        }
        let img = dft2(&weighted, FftDirection::Inverse)?;
        out = out.add(&conj_mul(&op.coil(c), &img)?)?;
    }
    Ok(out)
}

#[derive(Debug)]
struct DcOp {
    op: ImagingOperator,
    y: Tensor,
    hard: bool,
}

impl TapeOp for DcOp {
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0].clone().channels_to_complex();
        let mode = if self.hard {
            DcMode::Hard
        } else {
            DcMode::Soft(inputs[1].item())
        };
        Ok(dc_apply(&x, &self.op, &self.y, mode)?.complex_to_channels())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, cot: &Tensor) -> Vec<Option<Tensor>> {
        let g = cot.clone().channels_to_complex();
        let wk = if self.hard {
            0.0
        } else {
            1.0 / (1.0 + inputs[1].item())
        };
        // the x-path is linear and Hermitian, so its vector–Jacobian
        // product is the same map applied to the cotangent
        let grad_x = dc_linear(&g, &self.op, wk)
            .expect("dc backward: linear part")
            .complex_to_channels();
        if self.hard {
            return vec![Some(grad_x)];
        }
        // ∂x'/∂μ = Σ_c conj(C_c) F⁻¹( M ⊙ (y_c − k_c) / (1+μ)² )
        let mu = inputs[1].item();
        let x = inputs[0].clone().channels_to_complex();
        let (h, w, nc) = (self.op.h(), self.op.w(), self.op.ncoils());
        let inv2 = 1.0 / ((1.0 + mu) * (1.0 + mu));
        let mut dxdmu = Tensor::complex_zeros(&[h, w]);
        for c in 0..nc {
            let k = dft2(&cmul(&self.op.coil(c), &x).unwrap(), FftDirection::Forward).unwrap();
            let yc = coil_slice(&self.y, c, h, w);
            let mut diff = Tensor::complex_zeros(&[h, w]);
            for p in 0..h * w {
                let m = self.op.mask.pattern.data()[p];
                let (yr, yi) = yc.c_get(p);
                let (kr, ki) = k.c_get(p);
                diff.c_set(p, m * (yr - kr) * inv2, m * (yi - ki) * inv2);
            }
            let img = dft2(&diff, FftDirection::Inverse).unwrap();
            dxdmu = dxdmu.add(&conj_mul(&self.op.coil(c), &img).unwrap()).unwrap();
        }
        let grad_mu: f64 = g
            .data()
            .iter()
            .zip(dxdmu.data())
            .map(|(a, b)| a * b)
            .sum();
        vec![Some(grad_x), Some(Tensor::from_vec(&[1], vec![grad_mu]).unwrap())]
    }
}

/// Register a data-consistency block on the tape. `mu` present → soft
/// blend with learnable weight; absent → hard replacement.
pub fn dc_block(
    tape: &mut Tape,
    x: Var,
    mu: Option<Var>,
    op: &ImagingOperator,
    y: &Tensor,
) -> Result<Var> {
    let node = DcOp { op: op.clone(), y: y.clone(), hard: mu.is_none() };
    let inputs: Vec<Var> = match mu {
        Some(m) => vec![x, m],
        None => vec![x],
    };
    tape.custom(Box::new(node), &inputs)
}

/// Relative sampled-location k-space mismatch ‖M⊙(F(C x̂) − y)‖ / ‖y‖.
pub fn dc_residual(x_hat: &Tensor, op: &ImagingOperator, y: &Tensor) -> Result<f64> {
    let yhat = crate::imaging::forward_op(x_hat, op)?;
    let masked_y = {
        let (h, w, nc) = (op.h(), op.w(), op.ncoils());
        let mut out = y.clone();
        for c in 0..nc {
            let yc = coil_slice(y, c, h, w);
            let m = mask_mul(&op.mask.pattern, &yc)?;
            for p in 0..h * w {
                let (re, im) = m.c_get(p);
                out.c_set(c * h * w + p, re, im);
            }
        }
        out
    };
    Ok(yhat.sub(&masked_y)?.norm() / masked_y.norm().max(1e-300))
}
