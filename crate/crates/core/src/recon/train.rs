//! Two-stage reconstruction training: local pre-training, then hybrid
//! fine-tuning on local data mixed with prior-synthesized data from the
//! other sites, one source site per epoch in rotation.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_recon, ReconModel, ReconSample};
use crate::ar_transformer::PriorModel;
use crate::error::{Error, Result};
use crate::imaging::OperatorPool;
use crate::nn::seeded_rng;
use crate::numerics::{adamw_step, AdamWHyper, AdamWState, Binding, ParamSet, Tape};
use crate::vq_codec::CodecModel;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamWHyper,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig {
            epochs: 30,
            batch_size: 4,
            hyper: AdamWHyper { lr: 1e-3, ..AdamWHyper::default() },
            seed: 0,
        }
    }
}

/// One epoch of shuffled mini-batch AdamW on ‖x_ref − H(x_us, y)‖² over
/// the given pool (borrowed samples so pools can be mixed without copies).
fn train_epoch(
    model: &mut ReconModel,
    pool: &[&ReconSample],
    batch_size: usize,
    hyper: &AdamWHyper,
    opt: &mut AdamWState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut epoch_sum = 0.0;
    for batch in order.chunks(batch_size) {
        let mut grads: Option<ParamSet> = None;
        for &idx in batch {
            let sample = pool[idx];
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &model.params, true);
            let x_us = tape.constant(sample.x_us.complex_to_channels());
            let x_ref = tape.constant(sample.x_ref.complex_to_channels());
            let out = forward_recon(model, &mut tape, &bind, x_us, &sample.op, &sample.y)?;
            let loss = tape.mse(out, x_ref)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::training(format!(
                    "recon loss diverged at site {}: {loss_val}",
                    model.site
                )));
            }
            epoch_sum += loss_val;
            let store = tape.backward(loss)?;
            let g = bind.grads(&store, &model.params);
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (path, t) in acc.iter_mut() {
                        *t = t.add(g.get(path).unwrap())?;
                    }
                    acc
                }
            });
        }
        let mut g = grads.unwrap();
        let inv = 1.0 / batch.len() as f64;
        for (_, t) in g.iter_mut() {
            *t = t.scale(inv);
        }
        adamw_step(&mut model.params, &g, opt, hyper)?;
    }
    Ok(epoch_sum / pool.len() as f64)
}

/// Stage one: epochs of AdamW on the site's local triples only.
pub fn pretrain_local(
    model: &mut ReconModel,
    local: &[ReconSample],
    cfg: &ReconTrainConfig,
) -> Result<Vec<f64>> {
    if local.is_empty() {
        return Err(Error::config("pretrain_local: empty dataset"));
    }
    let mut opt = AdamWState::new(&model.params);
    let mut rng = seeded_rng(cfg.seed);
    let pool: Vec<&ReconSample> = local.iter().collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(train_epoch(model, &pool, cfg.batch_size, &cfg.hyper, &mut opt, &mut rng)?);
    }
    Ok(losses)
}

/// Synthetic-source rotation: at epoch e, site k trains against data
/// synthesized from the sites other than k, cycling through them in index
/// order.
pub fn synthetic_source(k: usize, epoch: usize, num_sites: usize) -> usize {
    let others: Vec<usize> = (0..num_sites).filter(|&j| j != k).collect();
    others[epoch % others.len()]
}

/// Generate `n` images from the prior under the source site's prompt and
/// acquire each through a fresh operator from the target site's pool.
pub fn synth_site_dataset(
    prior: &PriorModel,
    codec: &CodecModel,
    source_site: usize,
    pool: &OperatorPool,
    n: usize,
    mask_index_base: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ReconSample>> {
    (0..n)
        .map(|i| {
            let (_, img) = prior.generate(source_site, codec, rng)?;
            let op = pool.draw(mask_index_base + i as u64)?;
            ReconSample::acquire(img, op)
        })
        .collect()
}

/// Stage two: epochs of AdamW where the pool is the local set joined with
/// one rotating synthetic set (equal parts local / synthetic by
/// construction of the pools).
pub fn finetune_hybrid(
    model: &mut ReconModel,
    local: &[ReconSample],
    synthetic: &[(usize, Vec<ReconSample>)],
    num_sites: usize,
    cfg: &ReconTrainConfig,
) -> Result<Vec<f64>> {
    if local.is_empty() {
        return Err(Error::config("finetune_hybrid: empty local dataset"));
    }
    if synthetic.iter().any(|(_, s)| s.is_empty()) || synthetic.len() + 1 < num_sites {
        return Err(Error::config(
            "finetune_hybrid: need a nonempty synthetic set per other site",
        ));
    }
    let mut opt = AdamWState::new(&model.params);
    let mut rng = seeded_rng(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let source = synthetic_source(model.site, epoch, num_sites);
        let active = synthetic
            .iter()
            .find(|(j, _)| *j == source)
            .ok_or_else(|| Error::config(format!("no synthetic set from site {source}")))?;
        let pool: Vec<&ReconSample> = local.iter().chain(active.1.iter()).collect();
        losses.push(train_epoch(model, &pool, cfg.batch_size, &cfg.hyper, &mut opt, &mut rng)?);
    }
    Ok(losses)
}
