//! Per-site reconstruction models over the accelerated imaging operator:
//! three heterogeneous architecture families, a differentiable
//! data-consistency block, and the two-stage local + hybrid training loop.

mod dc;
mod train;

pub use dc::{dc_apply, dc_block, dc_residual, DcMode};
pub use train::{
    finetune_hybrid, pretrain_local, synth_site_dataset, synthetic_source, ReconTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{adjoint_op, forward_op, psnr, ssim, ImagingOperator};
use crate::nn::{self, conv2d};
use crate::numerics::{Binding, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchFamily {
    /// Weight-shared denoiser unrolled for `cascades` iterations.
    Unrolled,
    /// Distinct denoiser + learnable-μ consistency block per cascade.
    CascadeDc,
    /// Strided conv encoder–decoder with one final consistency block.
    ConvAutoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: ArchFamily,
    pub cascades: usize,
    pub width: usize,
    pub mu_init: f64,
}

impl ArchSpec {
    pub fn unrolled(cascades: usize) -> Self {
        ArchSpec { family: ArchFamily::Unrolled, cascades, width: 16, mu_init: 0.05 }
    }

    pub fn cascade_dc(cascades: usize) -> Self {
        ArchSpec { family: ArchFamily::CascadeDc, cascades, width: 12, mu_init: 0.05 }
    }

    pub fn conv_autoencoder() -> Self {
        ArchSpec { family: ArchFamily::ConvAutoencoder, cascades: 1, width: 16, mu_init: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cascades == 0 {
            return Err(Error::config("cascades must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config("width must be >= 1"));
        }
        Ok(())
    }
}

/// One site's reconstruction network.
#[derive(Clone, Debug)]
pub struct ReconModel {
    pub spec: ArchSpec,
    pub site: usize,
    pub params: ParamSet,
}

/// A fully consistent (reference, k-space, zero-filled) training triple
/// carrying its own imaging operator.
#[derive(Clone, Debug)]
pub struct ReconSample {
    pub x_ref: Tensor,
    pub y: Tensor,
    pub x_us: Tensor,
    pub op: ImagingOperator,
}

impl ReconSample {
    /// Simulate the acquisition of a reference image under an operator.
    pub fn acquire(x_ref: Tensor, op: ImagingOperator) -> Result<Self> {
        let y = forward_op(&x_ref, &op)?;
        let x_us = adjoint_op(&y, &op)?;
        Ok(ReconSample { x_ref, y, x_us, op })
    }

    /// Internal-consistency invariants: y is the forward of the reference
    /// and x_us is the adjoint of y.
    pub fn validate(&self) -> Result<()> {
        let y = forward_op(&self.x_ref, &self.op)?;
        if y.sub(&self.y)?.norm() > 1e-10 {
            return Err(Error::shape("sample: y is not forward(x_ref)"));
        }
        let x_us = adjoint_op(&self.y, &self.op)?;
        if x_us.sub(&self.x_us)?.norm() > 1e-10 {
            return Err(Error::shape("sample: x_us is not adjoint(y)"));
        }
        Ok(())
    }
}

fn conv_init(
    p: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let w = if zero {
        Tensor::zeros(&[cin * 9, cout])
    } else {
        nn::he_uniform(&[cin * 9, cout], cin * 9, rng)
    };
    p.insert(format!("{name}/w"), w);
    p.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
}

/// Residual three-conv denoiser under the given path prefix; the closing
/// conv is zero-initialized so the block starts as the identity.
fn denoiser_init(p: &mut ParamSet, prefix: &str, width: usize, rng: &mut rand_chacha::ChaCha8Rng) {
    conv_init(p, &format!("{prefix}/c1"), 2, width, false, rng);
    conv_init(p, &format!("{prefix}/c2"), width, width, false, rng);
    conv_init(p, &format!("{prefix}/c3"), width, 2, true, rng);
}

pub fn build_model(spec: &ArchSpec, site: usize, seed: u64) -> Result<ReconModel> {
    spec.validate()?;
    let mut rng = nn::seeded_rng(seed);
    let mut p = ParamSet::new();
    let w = spec.width;
    match spec.family {
        ArchFamily::Unrolled => {
            denoiser_init(&mut p, "den", w, &mut rng);
            p.insert("mu", Tensor::full(&[1], spec.mu_init));
        }
        ArchFamily::CascadeDc => {
            for i in 0..spec.cascades {
                denoiser_init(&mut p, &format!("casc{i}"), w, &mut rng);
                p.insert(format!("casc{i}/mu"), Tensor::full(&[1], spec.mu_init));
            }
        }
        ArchFamily::ConvAutoencoder => {
            conv_init(&mut p, "ae/enc1", 2, w, false, &mut rng);
            conv_init(&mut p, "ae/enc2", w, 2 * w, false, &mut rng);
            conv_init(&mut p, "ae/dec1", 2 * w, w, false, &mut rng);
            conv_init(&mut p, "ae/dec2", w, 2, true, &mut rng);
        }
    }
    Ok(ReconModel { spec: spec.clone(), site, params: p })
}

fn denoiser_forward(
    tape: &mut Tape,
    bind: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let (w1, b1) = (bind.var(&format!("{prefix}/c1/w")), bind.var(&format!("{prefix}/c1/b")));
    let (w2, b2) = (bind.var(&format!("{prefix}/c2/w")), bind.var(&format!("{prefix}/c2/b")));
    let (w3, b3) = (bind.var(&format!("{prefix}/c3/w")), bind.var(&format!("{prefix}/c3/b")));
    let h = conv2d(tape, x, w1, b1, 1)?;
    let h = tape.relu(h);
    let h = conv2d(tape, h, w2, b2, 1)?;
    let h = tape.relu(h);
    let h = conv2d(tape, h, w3, b3, 1)?;
    tape.add(x, h)
}

/// Family-specific forward pass on a [2,H,W] channel image var. The last
/// operation is always a hard data-consistency block.
pub fn forward_recon(
    model: &ReconModel,
    tape: &mut Tape,
    bind: &Binding,
    x_us: Var,
    op: &ImagingOperator,
    y: &Tensor,
) -> Result<Var> {
    let mut x = x_us;
    match model.spec.family {
        ArchFamily::Unrolled => {
            let mu = bind.var("mu");
            for _ in 0..model.spec.cascades {
                x = denoiser_forward(tape, bind, "den", x)?;
                x = dc::dc_block(tape, x, Some(mu), op, y)?;
            }
        }
        ArchFamily::CascadeDc => {
            for i in 0..model.spec.cascades {
                x = denoiser_forward(tape, bind, &format!("casc{i}"), x)?;
                let mu = bind.var(&format!("casc{i}/mu"));
                x = dc::dc_block(tape, x, Some(mu), op, y)?;
            }
        }
        ArchFamily::ConvAutoencoder => {
            let dims = tape.value(x).dims().to_vec();
            let (h0, w0) = (dims[1], dims[2]);
            let (we, be) = (bind.var("ae/enc1/w"), bind.var("ae/enc1/b"));
            let mut h = conv2d(tape, x, we, be, 2)?;
            h = tape.relu(h);
            let (we, be) = (bind.var("ae/enc2/w"), bind.var("ae/enc2/b"));
            h = conv2d(tape, h, we, be, 2)?;
            h = tape.relu(h);
            h = tape.upsample_bilinear(h, h0 / 2, w0 / 2)?;
            let (wd, bd) = (bind.var("ae/dec1/w"), bind.var("ae/dec1/b"));
            h = conv2d(tape, h, wd, bd, 1)?;
            h = tape.relu(h);
            h = tape.upsample_bilinear(h, h0, w0)?;
            let (wd, bd) = (bind.var("ae/dec2/w"), bind.var("ae/dec2/b"));
            h = conv2d(tape, h, wd, bd, 1)?;
            x = tape.add(x, h)?;
        }
    }
    dc::dc_block(tape, x, None, op, y)
}

/// Detached reconstruction of one sample: complex [H,W] image.
pub fn reconstruct(model: &ReconModel, sample: &ReconSample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &model.params, false);
    let x = tape.constant(sample.x_us.complex_to_channels());
    let out = forward_recon(model, &mut tape, &bind, x, &sample.op, &sample.y)?;
    Ok(tape.value(out).clone().channels_to_complex())
}

/// Aggregate image-quality metrics over a test set. Effectively infinite
/// PSNR values (beyond 200 dB the difference is FFT round-off, not
/// reconstruction error) are excluded from the mean/std and counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n: usize,
    pub inf_count: usize,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate(model: &ReconModel, test: &[ReconSample]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::config("evaluate: empty test set"));
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut inf_count = 0;
    for sample in test {
        let x_hat = reconstruct(model, sample)?;
        let ref_mag = sample.x_ref.magnitude();
        let hat_mag = x_hat.magnitude();
        let p = psnr(&ref_mag, &hat_mag)?;
        if p.is_finite() && p <= 200.0 {
            psnrs.push(p);
        } else {
            inf_count += 1;
        }
        ssims.push(ssim(&ref_mag, &hat_mag)?);
    }
    let (psnr_mean, psnr_std) = mean_std(&psnrs);
    let (ssim_mean, ssim_std) = mean_std(&ssims);
    Ok(Metrics { psnr_mean, psnr_std, ssim_mean, ssim_std, n: test.len(), inf_count })
}

/// One row of the evaluation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub site: usize,
    pub target_site: usize,
    pub accel: f64,
    pub metrics: Metrics,
}

/// CSV: site, target_site, R, psnr_mean, psnr_std, ssim_mean, ssim_std,
/// n, inf_count.
pub fn write_eval_csv(path: &std::path::Path, rows: &[EvalRow]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "site,target_site,R,psnr_mean,psnr_std,ssim_mean,ssim_std,n,inf_count")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in rows {
        let m = &r.metrics;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.site, r.target_site, r.accel, m.psnr_mean, m.psnr_std, m.ssim_mean,
            m.ssim_std, m.n, m.inf_count
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Checkpoint layout: u32 LE JSON header length, the ArchSpec + site JSON,
/// then the parameter container.
pub fn save_recon_model(path: &std::path::Path, model: &ReconModel) -> Result<()> {
    let header = serde_json::json!({ "spec": model.spec, "site": model.site });
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&crate::persistence::paramset_to_bytes(&model.params));
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_recon_model(path: &std::path::Path) -> Result<ReconModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(Error::format(0, "truncated model file"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + len {
        return Err(Error::format(4, "truncated model header"));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + len])
        .map_err(|e| Error::format(4, e.to_string()))?;
    let spec: ArchSpec = serde_json::from_value(header["spec"].clone())
        .map_err(|e| Error::format(4, e.to_string()))?;
    let site = header["site"]
        .as_u64()
        .ok_or_else(|| Error::format(4, "missing site"))? as usize;
    let params = crate::persistence::paramset_from_bytes(&bytes[4 + len..])?;
    Ok(ReconModel { spec, site, params })
}

#[cfg(test)]
mod tests;
