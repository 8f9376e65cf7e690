//! Codec pre-training: straight-through reconstruction/commitment loss for
//! the conv stacks, exponential-moving-average updates for the codebook.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CodecModel, CODEBOOK_PATH};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::tape::downsample_area;
use crate::numerics::{adamw_step, AdamWHyper, AdamWState, Binding, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamWHyper,
    pub ema_decay: f64,
    pub commit_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 40,
            batch_size: 4,
            hyper: AdamWHyper { lr: 1e-3, ..AdamWHyper::default() },
            ema_decay: 0.99,
            commit_weight: 1.0,
            seed: 0,
        }
    }
}

/// Per-code running statistics backing the EMA codebook update. A row with
/// no assignments in a batch keeps its current value because both the count
/// and the vector sum decay by the same factor.
struct EmaState {
    counts: Vec<f64>,
    sums: Tensor,
}

impl EmaState {
    fn new(codebook: &Tensor) -> Self {
        EmaState {
            counts: vec![1.0; codebook.dims()[0]],
            sums: codebook.clone(),
        }
    }

    fn update(&mut self, codebook: &mut Tensor, batches: &[(Tensor, Vec<usize>)], decay: f64) {
        let (v, c) = (codebook.dims()[0], codebook.dims()[1]);
        let mut n = vec![0.0f64; v];
        let mut s = vec![0.0f64; v * c];
        for (rows, indices) in batches {
            for (i, &j) in indices.iter().enumerate() {
                n[j] += 1.0;
                for k in 0..c {
                    s[j * c + k] += rows.data()[i * c + k];
                }
            }
        }
        for j in 0..v {
            self.counts[j] = decay * self.counts[j] + (1.0 - decay) * n[j];
            for k in 0..c {
                let old = self.sums.data()[j * c + k];
                self.sums.data_mut()[j * c + k] = decay * old + (1.0 - decay) * s[j * c + k];
                codebook.data_mut()[j * c + k] =
                    self.sums.data()[j * c + k] / self.counts[j].max(1e-12);
            }
        }
    }
}

/// Conv-stack parameters (everything but the codebook), which are the only
/// gradient-trained ones.
fn trainable_subset(params: &ParamSet) -> ParamSet {
    params
        .iter()
        .filter(|(path, _)| path.as_str() != CODEBOOK_PATH)
        .map(|(p, t)| (p.clone(), t.clone()))
        .collect()
}

/// Seed the codebook with area-downsampled latent rows drawn from the
/// dataset, evenly strided; a random codebook rarely overlaps the latent
/// distribution and would leave most codes dead.
fn init_codebook_from_data(model: &mut CodecModel, images: &[Tensor]) -> Result<()> {
    let cfg = model.cfg.clone();
    let (ps, c) = (cfg.latent_side(), cfg.latent_channels);
    let mut rows: Vec<f64> = Vec::new();
    for x in images.iter().take(16) {
        let z = model.encode_latent(x)?;
        for &p in &cfg.schedule {
            let d = if p == ps { z.clone() } else { downsample_area(&z, ps / p) };
            let mut t = Tape::new();
            let dv = t.constant(d);
            let r = t.rows_from_nchw(dv)?;
            rows.extend_from_slice(t.value(r).data());
        }
    }
    let total = rows.len() / c;
    if total == 0 {
        return Err(Error::training("codebook init: no latent rows"));
    }
    let mut cb = model.params.get(CODEBOOK_PATH).unwrap().clone();
    for j in 0..cfg.vocab {
        let src = (j * total) / cfg.vocab;
        for k in 0..c {
            // tiny deterministic jitter splits duplicate seeds
            let jitter = 1e-4 * ((j * c + k) as f64).sin();
            cb.set2(j, k, rows[src * c + k] + jitter);
        }
    }
    model.params.insert(CODEBOOK_PATH, cb);
    Ok(())
}

/// Train the codec on complex [H,W] images, returning the mean training
/// loss per epoch. The model is updated in place and meant to be frozen
/// afterwards.
pub fn pretrain_codec(
    model: &mut CodecModel,
    images: &[Tensor],
    cfg: &CodecTrainConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::config("pretrain_codec: empty dataset"));
    }
    init_codebook_from_data(model, images)?;
    let mut theta = trainable_subset(&model.params);
    let mut opt = AdamWState::new(&theta);
    let mut ema = EmaState::new(model.params.get(CODEBOOK_PATH).unwrap());
    let mut rng = nn::seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: Option<ParamSet> = None;
            let mut assignments: Vec<(Tensor, Vec<usize>)> = Vec::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let x = &images[idx];
                let mut tape = Tape::new();
                let bind = Binding::bind(&mut tape, &theta, true);
                let cb_var = tape.constant(model.codebook().clone());
                let x_ch = tape.constant(x.complex_to_channels());
                let z = model.encoder_forward(&mut tape, &bind, x_ch)?;
                let z_val = tape.value(z).clone();
                let (pyramid, zq_val, assign) = model.encode_multiscale_latent(&z_val)?;
                assignments.extend(assign);
                let zsum = model.tokens_to_latent_on_tape(&mut tape, &bind, cb_var, &pyramid)?;
                // straight-through: forward value is z_q, gradient flows to z
                let st = tape.add(zsum, z)?;
                let z_const = tape.constant(z_val);
                let z_st = tape.sub(st, z_const)?;
                let xhat = model.decoder_forward(&mut tape, &bind, z_st)?;
                let rec = tape.mse(xhat, x_ch)?;
                let zq_const = tape.constant(zq_val);
                let commit = tape.mse(z, zq_const)?;
                let commit = tape.scale(commit, cfg.commit_weight);
                let loss = tape.add(rec, commit)?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(Error::training(format!(
                        "codec loss diverged at epoch {epoch}, sample {idx}: {loss_val}"
                    )));
                }
                batch_loss += loss_val;
                let store = tape.backward(loss)?;
                let g = bind.grads(&store, &theta);
                grad_acc = Some(match grad_acc {
                    None => g,
                    Some(mut acc) => {
                        for (path, t) in acc.iter_mut() {
                            *t = t.add(g.get(path).unwrap())?;
                        }
                        acc
                    }
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = grad_acc.unwrap();
            for (_, t) in grads.iter_mut() {
                *t = t.scale(scale);
            }
            // cosine decay to a tenth of the base rate; the straight-through
            // estimator is noisy near convergence and benefits from it
            let frac = step as f64 / total_steps as f64;
            let hyper = AdamWHyper {
                lr: cfg.hyper.lr * (0.55 + 0.45 * (std::f64::consts::PI * frac).cos()),
                ..cfg.hyper
            };
            adamw_step(&mut theta, &grads, &mut opt, &hyper)?;
            step += 1;
            // keep the quantization path (token assignment, commit target,
            // EMA rows) in sync with the freshly stepped parameters
            for (path, t) in theta.iter() {
                model.params.insert(path.clone(), t.clone());
            }
            let cb = model.params.get_mut(CODEBOOK_PATH).unwrap();
            ema.update(cb, &assignments, cfg.ema_decay);
            epoch_sum += batch_loss;
        }
        epoch_losses.push(epoch_sum / images.len() as f64);
        // re-center the codebook on what the current encoder actually
        // emits; the EMA lags the encoder badly and the decoder amplifies
        // the resulting quantization noise
        refit_codebook(model, images, 1)?;
        ema = EmaState::new(model.params.get(CODEBOOK_PATH).unwrap());
    }
    refit_codebook(model, images, 2)?;
    model.params.check_finite("codec params after pretraining")?;
    Ok(epoch_losses)
}

/// A few Lloyd passes at the end: re-centers every code on the mean of
/// the residual rows it actually receives from the *final* encoder, which
/// the lagging EMA never quite catches up with.
fn refit_codebook(model: &mut CodecModel, images: &[Tensor], passes: usize) -> Result<()> {
    for _ in 0..passes {
        let mut assignments: Vec<(Tensor, Vec<usize>)> = Vec::new();
        for x in images {
            let z = model.encode_latent(x)?;
            let (_, _, assign) = model.encode_multiscale_latent(&z)?;
            assignments.extend(assign);
        }
        let cb = model.params.get_mut(CODEBOOK_PATH).unwrap();
        let (v, c) = (cb.dims()[0], cb.dims()[1]);
        let mut n = vec![0.0f64; v];
        let mut s = vec![0.0f64; v * c];
        for (rows, indices) in &assignments {
            for (i, &j) in indices.iter().enumerate() {
                n[j] += 1.0;
                for k in 0..c {
                    s[j * c + k] += rows.data()[i * c + k];
                }
            }
        }
        for j in 0..v {
            if n[j] > 0.0 {
                for k in 0..c {
                    cb.set2(j, k, s[j * c + k] / n[j]);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;
    use crate::vq_codec::CodecConfig;

    #[test]
    fn ema_zero_assignments_leaves_row_unchanged() {
        let mut cb = random_tensor(&[4, 3], 11);
        let before = cb.clone();
        let mut ema = EmaState::new(&cb);
        // only code 2 receives mass
        let rows = random_tensor(&[5, 3], 12);
        ema.update(&mut cb, &[(rows, vec![2; 5])], 0.99);
        for j in [0usize, 1, 3] {
            for k in 0..3 {
                assert!((cb.data()[j * 3 + k] - before.data()[j * 3 + k]).abs() < 1e-12);
            }
        }
        // the assigned row moved
        let moved: f64 = (0..3)
            .map(|k| (cb.data()[2 * 3 + k] - before.data()[2 * 3 + k]).abs())
            .sum();
        assert!(moved > 1e-6);
    }

    #[test]
    fn straight_through_gradient_identity() {
        // grad w.r.t. the pre-quantization latent equals the grad the
        // substituted embedding would receive.
        let z_val = random_tensor(&[2, 3], 21);
        let zq_val = random_tensor(&[2, 3], 22);
        let target = random_tensor(&[2, 3], 23);

        let mut tape = Tape::new();
        let z = tape.leaf(z_val.clone());
        let zq = tape.constant(zq_val.clone());
        let st = tape.add(zq, z).unwrap();
        let zc = tape.constant(z_val);
        let z_st = tape.sub(st, zc).unwrap();
        assert!(tape.value(z_st).sub(&zq_val).unwrap().norm() < 1e-12);
        let t = tape.constant(target.clone());
        let loss = tape.mse(z_st, t).unwrap();
        let store = tape.backward(loss).unwrap();
        let g_z = store.get(z).unwrap().clone();

        let mut ref_tape = Tape::new();
        let w = ref_tape.leaf(zq_val);
        let t = ref_tape.constant(target);
        let loss = ref_tape.mse(w, t).unwrap();
        let store = ref_tape.backward(loss).unwrap();
        let g_w = store.get(w).unwrap();
        assert!(g_z.sub(g_w).unwrap().norm() < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss_and_stays_finite() {
        let cfg = CodecConfig {
            h: 16,
            w: 16,
            latent_channels: 4,
            vocab: 12,
            schedule: vec![1, 2, 4],
            width: 6,
        };
        let mut model = CodecModel::new(cfg, 31).unwrap();
        let images: Vec<Tensor> = (0..6)
            .map(|i| {
                let mut x = Tensor::complex_zeros(&[16, 16]);
                for p in 0..256 {
                    let v = 0.4 + 0.3 * ((p + 17 * i) as f64 * 0.21).sin();
                    x.c_set(p, v, 0.0);
                }
                x
            })
            .collect();
        let train_cfg = CodecTrainConfig {
            epochs: 4,
            batch_size: 3,
            ..CodecTrainConfig::default()
        };
        let losses = pretrain_codec(&mut model, &images, &train_cfg).unwrap();
        assert_eq!(losses.len(), 4);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = CodecModel::new(CodecConfig::default(), 1).unwrap();
        let err = pretrain_codec(&mut model, &[], &CodecTrainConfig::default());
        assert!(err.is_err());
    }
}
