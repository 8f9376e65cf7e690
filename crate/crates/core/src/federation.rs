//! Server–client federated averaging over the prior: broadcast the global
//! parameters, run local mini-batch training at each site, aggregate the
//! results as a weighted average.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar_transformer::PriorModel;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::numerics::{adamw_step, AdamWHyper, AdamWState, Binding, ParamSet, Tape};
use crate::persistence::paramset_checksum;
use crate::vq_codec::TokenPyramid;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Communication rounds L.
    pub rounds: usize,
    /// Local epochs I per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Aggregation weights α_k, one per site, summing to 1.
    pub weights: Vec<f64>,
    pub hyper: AdamWHyper,
    pub seed: u64,
    /// Train sites as parallel tasks; output is bit-identical either way.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn uniform(num_sites: usize) -> Self {
        FederationConfig {
            rounds: 50,
            local_epochs: 1,
            batch_size: 8,
            weights: vec![1.0 / num_sites as f64; num_sites],
            hyper: AdamWHyper { lr: 1e-3, ..AdamWHyper::default() },
            seed: 0,
            parallel: true,
        }
    }

    pub fn num_sites(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("rounds, local_epochs, batch_size must be ≥ 1"));
        }
        if self.weights.is_empty() || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::config("weights must be nonnegative and nonempty"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// One communication round's record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Per-site, per-epoch mean training loss.
    pub site_epoch_losses: Vec<Vec<f64>>,
    /// Checksum of the aggregated parameters.
    pub checksum: u64,
    pub wall_ms: f64,
}

impl RoundLog {
    pub fn mean_loss(&self) -> f64 {
        let all: Vec<f64> = self.site_epoch_losses.iter().flatten().cloned().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }
}

/// K independent deep copies of the global parameters.
pub fn broadcast(global: &ParamSet, k: usize) -> Vec<ParamSet> {
    (0..k).map(|_| global.clone()).collect()
}

/// Path-wise convex combination Σ α_k θ^k.
pub fn aggregate(locals: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::config("aggregate: locals/weights length mismatch"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("aggregate: weights sum to {sum}")));
    }
    for l in &locals[1..] {
        locals[0].ensure_compatible(l)?;
    }
    let mut out = ParamSet::new();
    for path in locals[0].paths() {
        let mut acc = locals[0].get(path).unwrap().clone();
        let mut addends = vec![0.0f64; locals.len()];
        for i in 0..acc.data().len() {
            for (slot, (l, &w)) in addends.iter_mut().zip(locals.iter().zip(weights)) {
                *slot = w * l.get(path).unwrap().data()[i];
            }
            // summing in value order makes the result independent of the
            // order the (local, weight) pairs arrive in
            addends.sort_by(f64::total_cmp);
            acc.data_mut()[i] = addends.iter().sum();
        }
        out.insert(path.clone(), acc);
    }
    Ok(out)
}

/// I epochs of shuffled mini-batch AdamW on the prior loss with the given
/// site index. Deterministic given the seed; optimizer state starts fresh.
pub fn local_train(
    model: &PriorModel,
    site: usize,
    data: &[TokenPyramid],
    epochs: usize,
    batch_size: usize,
    hyper: &AdamWHyper,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::config("local_train: empty dataset"));
    }
    let mut params = model.params.clone();
    let mut opt = AdamWState::new(&params);
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grads: Option<ParamSet> = None;
            for &idx in batch {
                let m = PriorModel { cfg: model.cfg.clone(), params: params.clone() };
                let mut tape = Tape::new();
                let bind = Binding::bind(&mut tape, &m.params, true);
                let loss = m.loss_on_tape(&mut tape, &bind, &data[idx], site)?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(Error::training(format!(
                        "site {site} loss diverged at epoch {epoch}, sample {idx}: {loss_val}"
                    )));
                }
                epoch_sum += loss_val;
                let store = tape.backward(loss)?;
                let g = bind.grads(&store, &m.params);
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
            adamw_step(&mut params, &g, &mut opt, hyper)?;
        }
        epoch_losses.push(epoch_sum / data.len() as f64);
    }
    Ok((params, epoch_losses))
}

fn site_seed(base: u64, round: usize, site: usize) -> u64 {
    let mut x = base
        ^ (round as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (site as u64).wrapping_mul(0xd1b54a32d192ed03);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x
}

/// Algorithm: L rounds of broadcast → per-site local training → weighted
/// aggregation. Sites run serially or as parallel tasks; results are
/// reduced in site order, so the trained parameters are bit-identical
/// either way.
pub fn run_federation(
    init: &PriorModel,
    datasets: &[Vec<TokenPyramid>],
    cfg: &FederationConfig,
) -> Result<(PriorModel, Vec<RoundLog>)> {
    cfg.validate()?;
    let k = cfg.num_sites();
    if datasets.len() != k {
        return Err(Error::config(format!(
            "{} datasets for {k} sites",
            datasets.len()
        )));
    }
    let mut global = init.params.clone();
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let copies = broadcast(&global, k);
        let job = |site: usize, params: &ParamSet| {
            let m = PriorModel { cfg: init.cfg.clone(), params: params.clone() };
            local_train(
                &m,
                site,
                &datasets[site],
                cfg.local_epochs,
                cfg.batch_size,
                &cfg.hyper,
                site_seed(cfg.seed, round, site),
            )
        };
        let results: Vec<(ParamSet, Vec<f64>)> = if cfg.parallel {
            copies
                .par_iter()
                .enumerate()
                .map(|(site, p)| job(site, p))
                .collect::<Result<Vec<_>>>()?
        } else {
            copies
                .iter()
                .enumerate()
                .map(|(site, p)| job(site, p))
                .collect::<Result<Vec<_>>>()?
        };
        let locals: Vec<ParamSet> = results.iter().map(|(p, _)| p.clone()).collect();
        global = aggregate(&locals, &cfg.weights)?;
        logs.push(RoundLog {
            round,
            site_epoch_losses: results.into_iter().map(|(_, l)| l).collect(),
            checksum: paramset_checksum(&global),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((PriorModel { cfg: init.cfg.clone(), params: global }, logs))
}

/// CSV log: round, site, epoch, loss.
pub fn write_round_logs_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "round,site,epoch,loss").map_err(|e| Error::io(path.display().to_string(), e))?;
    for log in logs {
        for (site, epochs) in log.site_epoch_losses.iter().enumerate() {
            for (epoch, loss) in epochs.iter().enumerate() {
                writeln!(f, "{},{site},{epoch},{loss}", log.round)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
    }
    Ok(())
}

/// JSON run summary: config echo plus per-round mean losses and checksums.
pub fn write_run_summary_json(
    path: &Path,
    cfg: &FederationConfig,
    logs: &[RoundLog],
) -> Result<()> {
    let summary = serde_json::json!({
        "config": cfg,
        "rounds": logs.iter().map(|l| serde_json::json!({
            "round": l.round,
            "mean_loss": l.mean_loss(),
            "checksum": l.checksum,
            "wall_ms": l.wall_ms,
        })).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar_transformer::TransformerConfig;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn micro_model(seed: u64) -> PriorModel {
        let cfg = TransformerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_mult: 2,
            vocab: 8,
            schedule: vec![1, 2],
            num_sites: 3,
            ..TransformerConfig::default()
        };
        PriorModel::new(cfg, seed).unwrap()
    }

    fn micro_data(seed: u64, n: usize) -> Vec<TokenPyramid> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| TokenPyramid {
                schedule: vec![1, 2],
                maps: vec![
                    vec![rng.gen_range(0..8)],
                    (0..4).map(|_| rng.gen_range(0..8)).collect(),
                ],
            })
            .collect()
    }

    fn set(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn broadcast_deep_copies() {
        let g = set(&[1.0, 2.0]);
        let mut copies = broadcast(&g, 3);
        assert_eq!(copies.len(), 3);
        for c in &copies {
            assert_eq!(c.get("w").unwrap().data(), g.get("w").unwrap().data());
        }
        copies[0].get_mut("w").unwrap().data_mut()[0] = 99.0;
        assert_eq!(copies[1].get("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(broadcast(&g, 1).len(), 1);
    }

    #[test]
    fn aggregate_hand_examples() {
        let a = aggregate(&[set(&[1.0, 3.0]), set(&[3.0, 5.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(a.get("w").unwrap().data(), &[2.0, 4.0]);
        let b = aggregate(&[set(&[2.0]), set(&[6.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(b.get("w").unwrap().data(), &[5.0]);
    }

    #[test]
    fn aggregate_identical_locals_is_identity() {
        let locals = vec![set(&[0.3, -1.2, 7.0]); 3];
        let a = aggregate(&locals, &[0.2, 0.5, 0.3]).unwrap();
        for (x, y) in a.get("w").unwrap().data().iter().zip(&[0.3, -1.2, 7.0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_bad_weights_and_shapes() {
        assert!(aggregate(&[set(&[1.0]), set(&[2.0])], &[0.5, 0.6]).is_err());
        assert!(aggregate(&[set(&[1.0]), set(&[2.0, 3.0])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn aggregate_linearity() {
        let locals = vec![set(&[1.0, 2.0]), set(&[-3.0, 0.5])];
        let w = [0.4, 0.6];
        let base = aggregate(&locals, &w).unwrap();
        let scaled: Vec<ParamSet> = locals
            .iter()
            .map(|p| {
                let mut q = p.clone();
                let t = q.get_mut("w").unwrap();
                *t = t.scale(2.5);
                q
            })
            .collect();
        let agg2 = aggregate(&scaled, &w).unwrap();
        for (a, b) in agg2.get("w").unwrap().data().iter().zip(base.get("w").unwrap().data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_permutation_invariance() {
        let locals = vec![set(&[1.0, 2.0]), set(&[5.0, -1.0]), set(&[0.0, 9.0])];
        let w = [0.2, 0.3, 0.5];
        let a = aggregate(&locals, &w).unwrap();
        let perm = [2usize, 0, 1];
        let locals_p: Vec<ParamSet> = perm.iter().map(|&i| locals[i].clone()).collect();
        let w_p: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let b = aggregate(&locals_p, &w_p).unwrap();
        assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let model = micro_model(60);
        let data = micro_data(61, 4);
        let hyper = AdamWHyper { lr: 0.0, weight_decay: 0.0, ..AdamWHyper::default() };
        let (params, losses) = local_train(&model, 0, &data, 2, 2, &hyper, 7).unwrap();
        assert_eq!(losses.len(), 2);
        for path in model.params.paths() {
            assert_eq!(
                params.get(&path).unwrap().data(),
                model.params.get(&path).unwrap().data(),
                "{path}"
            );
        }
    }

    #[test]
    fn local_train_deterministic() {
        let model = micro_model(62);
        let data = micro_data(63, 5);
        let hyper = AdamWHyper::default();
        let (p1, l1) = local_train(&model, 1, &data, 2, 2, &hyper, 11).unwrap();
        let (p2, l2) = local_train(&model, 1, &data, 2, 2, &hyper, 11).unwrap();
        assert_eq!(l1, l2);
        for path in p1.paths() {
            assert_eq!(p1.get(&path).unwrap().data(), p2.get(&path).unwrap().data());
        }
    }

    #[test]
    fn identical_trajectories_aggregate_to_local() {
        // same site index, data, and seed at every "site": the weighted
        // average of identical updates equals any single update
        let model = micro_model(64);
        let data = micro_data(65, 4);
        let hyper = AdamWHyper::default();
        let copies = broadcast(&model.params, 3);
        let locals: Vec<ParamSet> = copies
            .iter()
            .map(|p| {
                let m = PriorModel { cfg: model.cfg.clone(), params: p.clone() };
                local_train(&m, 0, &data, 1, 2, &hyper, 17).unwrap().0
            })
            .collect();
        let agg = aggregate(&locals, &[1.0 / 3.0; 3]).unwrap();
        for path in agg.paths() {
            let a = agg.get(&path).unwrap();
            let l = locals[0].get(&path).unwrap();
            assert!(a.sub(l).unwrap().norm() < 1e-12, "{path}");
        }
    }

    #[test]
    fn serial_and_parallel_runs_bit_identical() {
        let model = micro_model(66);
        let datasets: Vec<Vec<TokenPyramid>> =
            (0..3).map(|s| micro_data(70 + s, 4)).collect();
        let mut cfg = FederationConfig::uniform(3);
        cfg.rounds = 2;
        cfg.batch_size = 2;
        cfg.parallel = false;
        let (serial, logs_s) = run_federation(&model, &datasets, &cfg).unwrap();
        cfg.parallel = true;
        let (parallel, logs_p) = run_federation(&model, &datasets, &cfg).unwrap();
        assert_eq!(logs_s.len(), 2);
        for (a, b) in logs_s.iter().zip(&logs_p) {
            assert_eq!(a.checksum, b.checksum);
            assert_eq!(a.site_epoch_losses, b.site_epoch_losses);
        }
        for path in serial.params.paths() {
            assert_eq!(
                serial.params.get(&path).unwrap().data(),
                parallel.params.get(&path).unwrap().data(),
                "{path}"
            );
        }
    }

    #[test]
    fn round_logs_and_loss_decrease() {
        let model = micro_model(67);
        let datasets: Vec<Vec<TokenPyramid>> =
            (0..3).map(|s| micro_data(80 + s, 3)).collect();
        let mut cfg = FederationConfig::uniform(3);
        cfg.rounds = 6;
        cfg.batch_size = 3;
        cfg.hyper.lr = 3e-3;
        let (_, logs) = run_federation(&model, &datasets, &cfg).unwrap();
        assert_eq!(logs.len(), 6);
        assert!(logs.last().unwrap().mean_loss() < logs[0].mean_loss());
    }

    #[test]
    fn log_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let logs = vec![RoundLog {
            round: 0,
            site_epoch_losses: vec![vec![1.5, 1.2], vec![1.4, 1.1]],
            checksum: 42,
            wall_ms: 3.0,
        }];
        let csv = dir.path().join("rounds.csv");
        write_round_logs_csv(&csv, &logs).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("round,site,epoch,loss"));
        assert!(text.contains("0,1,0,1.4"));
        let json = dir.path().join("summary.json");
        write_run_summary_json(&json, &FederationConfig::uniform(2), &logs).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["rounds"][0]["checksum"], 42);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FederationConfig::uniform(3);
        assert!(cfg.validate().is_ok());
        cfg.weights[0] += 1e-6;
        assert!(cfg.validate().is_err());
        let mut cfg = FederationConfig::uniform(2);
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FederationConfig::uniform(2);
        cfg.local_epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
