//! MRI forward model A = MFC (mask, centered orthonormal Fourier
//! transform, coil sensitivities), its adjoint, variable-density mask and
//! coil generation, and PSNR/SSIM image metrics.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

static FFT_CACHE: Lazy<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = FFT_CACHE.lock().unwrap();
    cache
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

fn shift_index(i: usize, n: usize, forward: bool) -> usize {
    // fftshift (forward=true) / ifftshift; identical for even n.
    if forward {
        (i + n / 2) % n
    } else {
        (i + n - n / 2) % n
    }
}

/// Centered orthonormal 2-D DFT of a complex [H,W] tensor. DC ends up at
/// (H/2, W/2); forward∘inverse is the identity and energy is preserved.
pub fn dft2(img: &Tensor, direction: FftDirection) -> Result<Tensor> {
    if !img.is_complex() || img.dims().len() != 2 {
        return Err(Error::shape("dft2: expected complex [H,W]"));
    }
    let (h, w) = (img.dims()[0], img.dims()[1]);
    if h < 2 || w < 2 {
        return Err(Error::shape("dft2: H,W must be >= 2"));
    }
    let inverse = direction == FftDirection::Inverse;
    // ifftshift input
    let mut grid = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            let (re, im) = img.c_get(y * w + x);
            let sy = shift_index(y, h, false);
            let sx = shift_index(x, w, false);
            grid[sy * w + sx] = Complex::new(re, im);
        }
    }
    // rows
    let row_fft = plan(w, inverse);
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    // columns
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    // fftshift output + orthonormal scale
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = Tensor::complex_zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let sy = shift_index(y, h, true);
            let sx = shift_index(x, w, true);
            let v = grid[y * w + x] * scale;
            out.c_set(sy * w + sx, v.re, v.im);
        }
    }
    Ok(out)
}

/// Binary sampling mask with guaranteed fully-sampled central ACS block.
#[derive(Clone, Debug)]
pub struct Mask {
    pub pattern: Tensor, // real [H,W], entries 0/1
    pub accel: f64,
    pub acs_half_width: usize,
}

impl Mask {
    pub fn h(&self) -> usize {
        self.pattern.dims()[0]
    }
    pub fn w(&self) -> usize {
        self.pattern.dims()[1]
    }
    pub fn num_sampled(&self) -> usize {
        self.pattern.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Variable-density mask: ACS block always sampled, remaining budget drawn
/// without replacement with probability ∝ exp(−‖k−center‖²/(2σ²)), σ = H/4.
pub fn gen_vd_mask(h: usize, w: usize, r: f64, acs_half_width: usize, seed: u64) -> Result<Mask> {
    let a = acs_half_width;
    let budget = ((h * w) as f64 / r).round() as usize;
    let acs_count = (2 * a) * (2 * a);
    if budget < acs_count {
        return Err(Error::config(format!(
            "mask budget {budget} smaller than ACS block {acs_count}"
        )));
    }
    let mut pattern = Tensor::zeros(&[h, w]);
    let (cy, cx) = (h / 2, w / 2);
    let acs = |y: usize, x: usize| {
        y + a >= cy && y < cy + a && x + a >= cx && x < cx + a
    };
    for y in 0..h {
        for x in 0..w {
            if acs(y, x) {
                pattern.set2(y, x, 1.0);
            }
        }
    }
    let remaining = budget - acs_count;
    if remaining > 0 {
        let sigma = h as f64 / 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gumbel top-k gives exact-count weighted sampling without replacement.
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(h * w - acs_count);
        for y in 0..h {
            for x in 0..w {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                if acs(y, x) {
                    continue;
                }
                let dy = y as f64 - cy as f64;
                let dx = x as f64 - cx as f64;
                let logw = -(dy * dy + dx * dx) / (2.0 * sigma * sigma);
                keyed.push((logw - (-u.ln()).ln(), y * w + x));
            }
        }
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, idx) in keyed.iter().take(remaining) {
            pattern.data_mut()[idx] = 1.0;
        }
    }
    Ok(Mask { pattern, accel: r, acs_half_width: a })
}

/// Coil sensitivity maps, pixelwise normalized to unit sum of squares.
#[derive(Clone, Debug)]
pub struct CoilSet {
    pub maps: Tensor, // complex [ncoils,H,W]
}

impl CoilSet {
    pub fn ncoils(&self) -> usize {
        self.maps.dims()[0]
    }
    pub fn h(&self) -> usize {
        self.maps.dims()[1]
    }
    pub fn w(&self) -> usize {
        self.maps.dims()[2]
    }
}

/// Smooth complex Gaussian-bump profiles with linear phase ramps, centers
/// equally spaced on a circle of radius H/3.
pub fn gen_coils(h: usize, w: usize, ncoils: usize, seed: u64) -> Result<CoilSet> {
    if ncoils < 1 {
        return Err(Error::config("gen_coils: ncoils must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Tensor::complex_zeros(&[ncoils, h, w]);
    let radius = h as f64 / 3.0;
    let width = h as f64 / 2.0;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for c in 0..ncoils {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / ncoils as f64
            + rng.gen_range(-0.1..0.1);
        let (oy, ox) = (cy + radius * angle.sin(), cx + radius * angle.cos());
        let ramp = rng.gen_range(0.2..0.6) * 2.0 * std::f64::consts::PI / h as f64;
        let (ry, rx) = (ramp * angle.sin(), ramp * angle.cos());
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - oy;
                let dx = x as f64 - ox;
                let mag = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                let phase = ry * y as f64 + rx * x as f64;
                maps.c_set(
                    (c * h + y) * w + x,
                    mag * phase.cos(),
                    mag * phase.sin(),
                );
            }
        }
    }
    // normalize to unit pixelwise sum of squares
    for p in 0..h * w {
        let mut s = 0.0;
        for c in 0..ncoils {
            let (re, im) = maps.c_get(c * h * w + p);
            s += re * re + im * im;
        }
        let inv = 1.0 / s.sqrt();
        for c in 0..ncoils {
            let (re, im) = maps.c_get(c * h * w + p);
            maps.c_set(c * h * w + p, re * inv, im * inv);
        }
    }
    Ok(CoilSet { maps })
}

/// The accelerated imaging operator A = MFC and its adjoint.
#[derive(Clone, Debug)]
pub struct ImagingOperator {
    pub mask: Mask,
    pub coils: CoilSet,
}

impl ImagingOperator {
    pub fn new(mask: Mask, coils: CoilSet) -> Result<Self> {
        if mask.h() != coils.h() || mask.w() != coils.w() {
            return Err(Error::shape("operator: mask and coils disagree on H,W"));
        }
        Ok(ImagingOperator { mask, coils })
    }

    pub fn h(&self) -> usize {
        self.mask.h()
    }
    pub fn w(&self) -> usize {
        self.mask.w()
    }
    pub fn ncoils(&self) -> usize {
        self.coils.ncoils()
    }

    /// Extract the complex [H,W] map of one coil.
    pub fn coil(&self, c: usize) -> Tensor {
        let (h, w) = (self.h(), self.w());
        let mut out = Tensor::complex_zeros(&[h, w]);
        for p in 0..h * w {
            let (re, im) = self.coils.maps.c_get(c * h * w + p);
            out.c_set(p, re, im);
        }
        out
    }
}

/// Pointwise complex product.
pub fn cmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() || !a.is_complex() || !b.is_complex() {
        return Err(Error::shape("cmul: shape mismatch"));
    }
    let mut out = a.clone();
    for i in 0..a.numel() {
        let (ar, ai) = a.c_get(i);
        let (br, bi) = b.c_get(i);
        out.c_set(i, ar * br - ai * bi, ar * bi + ai * br);
    }
    Ok(out)
}

/// Pointwise conj(a) · b.
pub fn conj_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("conj_mul: shape mismatch"));
    }
    let mut out = a.clone();
    for i in 0..a.numel() {
        let (ar, ai) = a.c_get(i);
        let (br, bi) = b.c_get(i);
        out.c_set(i, ar * br + ai * bi, ar * bi - ai * br);
    }
    Ok(out)
}

/// Real mask applied to a complex tensor.
pub fn mask_mul(mask: &Tensor, x: &Tensor) -> Result<Tensor> {
    if mask.dims() != x.dims() {
        return Err(Error::shape("mask_mul: shape mismatch"));
    }
    let mut out = x.clone();
    for i in 0..x.numel() {
        let m = mask.data()[i];
        let (re, im) = x.c_get(i);
        out.c_set(i, m * re, m * im);
    }
    Ok(out)
}

/// y_c = M ⊙ F(C_c ⊙ x) per coil.
pub fn forward_op(x: &Tensor, op: &ImagingOperator) -> Result<Tensor> {
    if x.dims() != [op.h(), op.w()] || !x.is_complex() {
        return Err(Error::shape("forward_op: image shape mismatch"));
    }
    let (h, w, nc) = (op.h(), op.w(), op.ncoils());
    let mut y = Tensor::complex_zeros(&[nc, h, w]);
    for c in 0..nc {
        let cx = cmul(&op.coil(c), x)?;
        let k = dft2(&cx, FftDirection::Forward)?;
        let mk = mask_mul(&op.mask.pattern, &k)?;
        for p in 0..h * w {
            let (re, im) = mk.c_get(p);
            y.c_set(c * h * w + p, re, im);
        }
    }
    Ok(y)
}

/// x = Σ_c conj(C_c) ⊙ F⁻¹(M ⊙ y_c): the zero-filled coil-combined image.
pub fn adjoint_op(y: &Tensor, op: &ImagingOperator) -> Result<Tensor> {
    let (h, w, nc) = (op.h(), op.w(), op.ncoils());
    if y.dims() != [nc, h, w] || !y.is_complex() {
        return Err(Error::shape("adjoint_op: k-space shape mismatch"));
    }
    let mut x = Tensor::complex_zeros(&[h, w]);
    for c in 0..nc {
        let mut yc = Tensor::complex_zeros(&[h, w]);
        for p in 0..h * w {
            let (re, im) = y.c_get(c * h * w + p);
            yc.c_set(p, re, im);
        }
        let masked = mask_mul(&op.mask.pattern, &yc)?;
        let img = dft2(&masked, FftDirection::Inverse)?;
        let contrib = conj_mul(&op.coil(c), &img)?;
        x = x.add(&contrib)?;
    }
    Ok(x)
}

/// 10·log10(1/MSE) for magnitude images in [0,1]; +∞ on identical inputs.
pub fn psnr(reference: &Tensor, test: &Tensor) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::shape("psnr: shape mismatch"));
    }
    let n = reference.data().len() as f64;
    let mse: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// SSIM with a 7×7 uniform window over valid positions, C1=(0.01)², C2=(0.03)².
pub fn ssim(reference: &Tensor, test: &Tensor) -> Result<f64> {
    const WIN: usize = 7;
    const C1: f64 = 0.0001;
    const C2: f64 = 0.0009;
    if reference.dims() != test.dims() {
        return Err(Error::shape("ssim: shape mismatch"));
    }
    let (h, w) = (reference.dims()[0], reference.dims()[1]);
    if h < WIN || w < WIN {
        return Err(Error::config("ssim: image smaller than 7x7 window"));
    }
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WIN {
                for dx in 0..WIN {
                    let a = reference.get2(y0 + dy, x0 + dx);
                    let b = test.get2(y0 + dy, x0 + dx);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let val = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Seeded pool of imaging operators for one site: shared coil set, a fresh
/// variable-density mask per draw.
#[derive(Clone, Debug)]
pub struct OperatorPool {
    pub h: usize,
    pub w: usize,
    pub accel: f64,
    pub acs_half_width: usize,
    pub coils: CoilSet,
    pub mask_seed_base: u64,
}

impl OperatorPool {
    pub fn new(
        h: usize,
        w: usize,
        ncoils: usize,
        accel: f64,
        acs_half_width: usize,
        coil_seed: u64,
        mask_seed_base: u64,
    ) -> Result<Self> {
        Ok(OperatorPool {
            h,
            w,
            accel,
            acs_half_width,
            coils: gen_coils(h, w, ncoils, coil_seed)?,
            mask_seed_base,
        })
    }

    pub fn draw(&self, index: u64) -> Result<ImagingOperator> {
        let seed = self
            .mask_seed_base
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(index.wrapping_mul(0x2545f4914f6cdd1d));
        let mask = gen_vd_mask(self.h, self.w, self.accel, self.acs_half_width, seed)?;
        ImagingOperator::new(mask, self.coils.clone())
    }
}

/// Default ACS half-width: ⌈H/16⌉.
pub fn default_acs_half_width(h: usize) -> usize {
    h.div_ceil(16)
}
