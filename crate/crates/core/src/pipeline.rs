//! Stage orchestration shared by the command-line front end and the
//! end-to-end tests: dataset generation, codec pre-training, federated
//! prior training, synthesis, reconstruction training and evaluation,
//! plus checkpoint and manifest plumbing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar_transformer::{PriorModel, TransformerConfig};
use crate::config::{seed_offsets, RunConfig};
use crate::datasets::{gen_site_dataset, load_site_dataset, save_site_dataset, SiteDataset};
use crate::error::{Error, Result};
use crate::federation::{run_federation, RoundLog};
use crate::imaging::{default_acs_half_width, gen_coils, ImagingOperator, Mask, OperatorPool};
use crate::nn::seeded_rng;
use crate::numerics::Tensor;
use crate::persistence;
use crate::recon::{
    build_model, evaluate, finetune_hybrid, pretrain_local, synth_site_dataset, EvalRow,
    ReconModel, ReconSample,
};
use crate::vq_codec::{pretrain_codec, CodecConfig, CodecModel, TokenPyramid};

// ---------------------------------------------------------------- datasets

pub fn gen_all_datasets(cfg: &RunConfig) -> Result<Vec<SiteDataset>> {
    cfg.site_specs()
        .iter()
        .map(|spec| {
            gen_site_dataset(
                spec,
                cfg.sites.n_train,
                cfg.sites.n_val,
                cfg.sites.n_test,
                cfg.sites.h,
                cfg.sites.w,
            )
        })
        .collect()
}

pub fn save_all_datasets(datasets: &[SiteDataset], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for ds in datasets {
        save_site_dataset(ds, dir.join(format!("site_{}", ds.spec.site)))?;
    }
    Ok(())
}

pub fn load_all_datasets(dir: impl AsRef<Path>, count: usize) -> Result<Vec<SiteDataset>> {
    let dir = dir.as_ref();
    (0..count)
        .map(|k| load_site_dataset(dir.join(format!("site_{k}"))))
        .collect()
}

// ------------------------------------------------------------------- codec

/// Round-robin interleave of the sites' training images, so any prefix of
/// the pooled set spans all sites (the codebook is seeded from a prefix).
pub fn pooled_train_images(datasets: &[SiteDataset]) -> Vec<Tensor> {
    let longest = datasets.iter().map(|d| d.train.len()).max().unwrap_or(0);
    let mut pooled = Vec::new();
    for i in 0..longest {
        for ds in datasets {
            if let Some(img) = ds.train.get(i) {
                pooled.push(img.clone());
            }
        }
    }
    pooled
}

/// Codec pre-training on the pooled training images of all sites; the
/// codec is shared and frozen before federation starts.
pub fn run_codec_stage(
    cfg: &RunConfig,
    datasets: &[SiteDataset],
) -> Result<(CodecModel, Vec<f64>)> {
    let mut model = CodecModel::new(
        cfg.codec_config()?,
        cfg.seed.wrapping_add(seed_offsets::CODEC_INIT),
    )?;
    let losses = pretrain_codec(&mut model, &pooled_train_images(datasets), &cfg.codec_train_config())?;
    Ok((model, losses))
}

pub fn encode_pyramids(
    codec: &CodecModel,
    datasets: &[SiteDataset],
) -> Result<Vec<Vec<TokenPyramid>>> {
    datasets
        .iter()
        .map(|ds| ds.train.iter().map(|img| codec.encode_multiscale(img)).collect())
        .collect()
}

// ------------------------------------------------------------------- prior

pub fn run_prior_stage(
    cfg: &RunConfig,
    pyramids: &[Vec<TokenPyramid>],
) -> Result<(PriorModel, Vec<RoundLog>)> {
    let init = PriorModel::new(
        cfg.transformer_config(),
        cfg.seed.wrapping_add(seed_offsets::PRIOR_INIT),
    )?;
    run_federation(&init, pyramids, &cfg.federation_config())
}

// ------------------------------------------------------------- checkpoints

fn save_with_header<H: Serialize>(
    path: &Path,
    header: &H,
    params: &crate::numerics::ParamSet,
) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::config(e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&persistence::paramset_to_bytes(params));
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_with_header<H: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(H, crate::numerics::ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(Error::format(0, "truncated checkpoint"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + len {
        return Err(Error::format(4, "truncated checkpoint header"));
    }
    let header: H =
        serde_json::from_slice(&bytes[4..4 + len]).map_err(|e| Error::format(4, e.to_string()))?;
    let params = persistence::paramset_from_bytes(&bytes[4 + len..])?;
    Ok((header, params))
}

pub fn save_codec(path: &Path, model: &CodecModel) -> Result<()> {
    save_with_header(path, &model.cfg, &model.params)
}

pub fn load_codec(path: &Path) -> Result<CodecModel> {
    let (cfg, params): (CodecConfig, _) = load_with_header(path)?;
    Ok(CodecModel { cfg, params })
}

pub fn save_prior(path: &Path, model: &PriorModel) -> Result<()> {
    save_with_header(path, &model.cfg, &model.params)
}

pub fn load_prior(path: &Path) -> Result<PriorModel> {
    let (cfg, params): (TransformerConfig, _) = load_with_header(path)?;
    Ok(PriorModel { cfg, params })
}

// ----------------------------------------------------------------- imaging

/// One operator pool per (site, acceleration); coils are shared within a
/// site, masks are drawn per sample index.
pub fn operator_pool(cfg: &RunConfig, site: usize, accel: f64) -> Result<OperatorPool> {
    let (h, w) = (cfg.sites.h, cfg.sites.w);
    let mask_base = cfg
        .seed
        .wrapping_add(seed_offsets::MASKS)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(site as u64)
        .wrapping_add(accel.to_bits());
    OperatorPool::new(
        h,
        w,
        cfg.eval.ncoils,
        accel,
        default_acs_half_width(h),
        cfg.seed
            .wrapping_add(seed_offsets::COILS)
            .wrapping_add(site as u64),
        mask_base,
    )
}

/// Acquire every image through a fresh operator drawn at `base + i`.
pub fn acquire_set(
    images: &[Tensor],
    pool: &OperatorPool,
    base: u64,
) -> Result<Vec<ReconSample>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| ReconSample::acquire(img.clone(), pool.draw(base + i as u64)?))
        .collect()
}

// ------------------------------------------------------------------- recon

pub struct ReconStageOutput {
    pub model: ReconModel,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
}

/// Train one site's reconstruction model: local pre-training on the
/// site's own triples, then (unless skipped) hybrid fine-tuning against
/// prior-synthesized data from each other site in rotation.
pub fn run_recon_stage(
    cfg: &RunConfig,
    site: usize,
    datasets: &[SiteDataset],
    prior: &PriorModel,
    codec: &CodecModel,
    skip_finetune: bool,
) -> Result<ReconStageOutput> {
    let sec = cfg.recon_section(site);
    let accel = cfg.eval.accels[0];
    let pool = operator_pool(cfg, site, accel)?;
    let local = acquire_set(&datasets[site].train, &pool, 0)?;
    let mut model = build_model(
        &sec.arch_spec(),
        site,
        cfg.seed
            .wrapping_add(seed_offsets::RECON_INIT)
            .wrapping_add(site as u64),
    )?;
    let pretrain_losses =
        pretrain_local(&mut model, &local, &cfg.recon_train_config(site, sec.pretrain_epochs))?;
    if skip_finetune {
        return Ok(ReconStageOutput { model, pretrain_losses, finetune_losses: Vec::new() });
    }
    let mut rng = seeded_rng(
        cfg.seed
            .wrapping_add(seed_offsets::SYNTH)
            .wrapping_add(site as u64),
    );
    let mut synthetic = Vec::new();
    for source in (0..cfg.sites.count).filter(|&j| j != site) {
        let set = synth_site_dataset(
            prior,
            codec,
            source,
            &pool,
            sec.n_synth,
            1_000_000 + source as u64 * 10_000,
            &mut rng,
        )?;
        synthetic.push((source, set));
    }
    let finetune_losses = finetune_hybrid(
        &mut model,
        &local,
        &synthetic,
        cfg.sites.count,
        &cfg.recon_train_config(site, sec.finetune_epochs),
    )?;
    Ok(ReconStageOutput { model, pretrain_losses, finetune_losses })
}

// -------------------------------------------------------------- evaluation

/// The full cross-site metric matrix: every model against every site's
/// test set at every configured acceleration.
pub fn run_eval_stage(
    cfg: &RunConfig,
    models: &[ReconModel],
    datasets: &[SiteDataset],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &accel in &cfg.eval.accels {
        for model in models {
            for (target, ds) in datasets.iter().enumerate() {
                let pool = operator_pool(cfg, target, accel)?;
                let test = acquire_set(&ds.test, &pool, 500_000)?;
                rows.push(EvalRow {
                    site: model.site,
                    target_site: target,
                    accel,
                    metrics: evaluate(model, &test)?,
                });
            }
        }
    }
    Ok(rows)
}

// --------------------------------------------------------- synthetic sets

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    n: usize,
    h: usize,
    w: usize,
    ncoils: usize,
    coil_seed: u64,
    accel: f64,
    acs_half_width: usize,
    source_site: usize,
}

/// Persist synthesized triples: per-sample reference, k-space, zero-filled
/// and mask tensors plus a manifest that pins the shared coil set.
pub fn save_samples(
    dir: impl AsRef<Path>,
    samples: &[ReconSample],
    coil_seed: u64,
    source_site: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, s) in samples.iter().enumerate() {
        persistence::save_tensor(&s.x_ref, dir.join(format!("ref_{i}.fvt")))?;
        persistence::save_tensor(&s.y, dir.join(format!("ksp_{i}.fvt")))?;
        persistence::save_tensor(&s.x_us, dir.join(format!("us_{i}.fvt")))?;
        persistence::save_tensor(&s.op.mask.pattern, dir.join(format!("mask_{i}.fvt")))?;
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::config("save_samples: empty set"))?;
    let manifest = SynthManifest {
        n: samples.len(),
        h: first.op.h(),
        w: first.op.w(),
        ncoils: first.op.ncoils(),
        coil_seed,
        accel: first.op.mask.accel,
        acs_half_width: first.op.mask.acs_half_width,
        source_site,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_samples(dir: impl AsRef<Path>) -> Result<Vec<ReconSample>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let raw =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: SynthManifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(0, e.to_string()))?;
    let coils = gen_coils(manifest.h, manifest.w, manifest.ncoils, manifest.coil_seed)?;
    (0..manifest.n)
        .map(|i| {
            let pattern = persistence::load_tensor(dir.join(format!("mask_{i}.fvt")))?;
            let mask = Mask {
                pattern,
                accel: manifest.accel,
                acs_half_width: manifest.acs_half_width,
            };
            let op = ImagingOperator::new(mask, coils.clone())?;
            Ok(ReconSample {
                x_ref: persistence::load_tensor(dir.join(format!("ref_{i}.fvt")))?,
                y: persistence::load_tensor(dir.join(format!("ksp_{i}.fvt")))?,
                x_us: persistence::load_tensor(dir.join(format!("us_{i}.fvt")))?,
                op,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- manifest

/// Provenance record written next to every command's outputs (named
/// distinctly so it can coexist with dataset/sample manifests).
pub fn write_manifest(dir: impl AsRef<Path>, cfg: &RunConfig, command: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": cfg.hash(),
        "master_seed": cfg.seed,
        "site_seeds": cfg.site_specs().iter().map(|s| s.seed).collect::<Vec<_>>(),
        "stage_seeds": {
            "codec_init": cfg.seed.wrapping_add(seed_offsets::CODEC_INIT),
            "codec_train": cfg.seed.wrapping_add(seed_offsets::CODEC_TRAIN),
            "prior_init": cfg.seed.wrapping_add(seed_offsets::PRIOR_INIT),
            "federation": cfg.seed.wrapping_add(seed_offsets::FEDERATION),
            "recon_init": cfg.seed.wrapping_add(seed_offsets::RECON_INIT),
            "recon_train": cfg.seed.wrapping_add(seed_offsets::RECON_TRAIN),
            "synth": cfg.seed.wrapping_add(seed_offsets::SYNTH),
            "coils": cfg.seed.wrapping_add(seed_offsets::COILS),
            "masks": cfg.seed.wrapping_add(seed_offsets::MASKS),
        },
        "config": serde_json::to_value(cfg).map_err(|e| Error::config(e.to_string()))?,
    });
    let path = dir.join("run_manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
