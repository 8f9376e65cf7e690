//! `fedprior`: five-stage experiment pipeline. Each command reads the
//! same TOML run configuration, so (config, seeds) determine every output
//! byte-for-byte.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fedprior_core::config::{seed_offsets, RunConfig};
use fedprior_core::error::{Error, Result};
use fedprior_core::federation::{write_round_logs_csv, write_run_summary_json};
use fedprior_core::nn::seeded_rng;
use fedprior_core::pipeline;
use fedprior_core::recon::{load_recon_model, save_recon_model, synth_site_dataset, write_eval_csv};

#[derive(Parser)]
#[command(name = "fedprior", version, about = "Federated multi-site MRI prior pipeline")]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the per-site phantom datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the codec (optional) and run federated prior training.
    TrainPrior {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing codec checkpoint; required unless --pretrain-codec.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Pre-train the codec here and write codec.ckpt next to the prior.
        #[arg(long)]
        pretrain_codec: bool,
        /// Override federation.rounds from the config.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Sample synthetic triples from a trained prior.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Site prompt to condition generation on.
        #[arg(long)]
        site: usize,
        #[arg(long)]
        n: usize,
        /// Site whose imaging-operator pool acquires the samples.
        #[arg(long)]
        ops_from: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one site's reconstruction model (pre-train, then fine-tune).
    TrainRecon {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        site: usize,
        #[arg(long)]
        out: PathBuf,
        /// Stop after local pre-training (single-site baseline).
        #[arg(long)]
        skip_finetune: bool,
    },
    /// Cross-site metric matrix over all models, sites and accelerations.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding recon_site_<k>.ckpt files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Load the config, applying the FEDPRIOR_SEED master-seed override.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("FEDPRIOR_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::config(format!("FEDPRIOR_SEED={seed:?} is not a u64")))?;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            ensure_dir(&out)?;
            let datasets = pipeline::gen_all_datasets(&cfg)?;
            pipeline::save_all_datasets(&datasets, &out)?;
            pipeline::write_manifest(&out, &cfg, "gen-data")?;
            println!("wrote {} site datasets to {}", datasets.len(), out.display());
        }
        Command::TrainPrior { config, data, out, codec, pretrain_codec, rounds } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = rounds {
                cfg.federation.rounds = r;
                cfg.validate()?;
            }
            ensure_dir(&out)?;
            let datasets = pipeline::load_all_datasets(&data, cfg.sites.count)?;
            let codec_model = match (codec, pretrain_codec) {
                (Some(path), false) => pipeline::load_codec(&path)?,
                (None, true) => {
                    let (model, losses) = pipeline::run_codec_stage(&cfg, &datasets)?;
                    pipeline::save_codec(&out.join("codec.ckpt"), &model)?;
                    println!(
                        "codec pre-trained: loss {:.5} -> {:.5}",
                        losses.first().unwrap(),
                        losses.last().unwrap()
                    );
                    model
                }
                (Some(_), true) => {
                    return Err(Error::config("pass either --codec or --pretrain-codec, not both"))
                }
                (None, false) => {
                    return Err(Error::config("need --codec <checkpoint> or --pretrain-codec"))
                }
            };
            let pyramids = pipeline::encode_pyramids(&codec_model, &datasets)?;
            let (prior, logs) = pipeline::run_prior_stage(&cfg, &pyramids)?;
            pipeline::save_prior(&out.join("prior.ckpt"), &prior)?;
            write_round_logs_csv(&out.join("rounds.csv"), &logs)?;
            write_run_summary_json(&out.join("summary.json"), &cfg.federation_config(), &logs)?;
            pipeline::write_manifest(&out, &cfg, "train-prior")?;
            println!(
                "prior trained: mean loss {:.4} -> {:.4} over {} rounds",
                logs.first().map(|l| l.mean_loss()).unwrap_or(f64::NAN),
                logs.last().map(|l| l.mean_loss()).unwrap_or(f64::NAN),
                logs.len()
            );
        }
        Command::Synth { config, prior, codec, site, n, ops_from, out } => {
            let cfg = load_config(&config)?;
            if n == 0 {
                return Err(Error::config("--n must be >= 1"));
            }
            let prior_model = pipeline::load_prior(&prior)?;
            let codec_model = pipeline::load_codec(&codec)?;
            let pool = pipeline::operator_pool(&cfg, ops_from, cfg.eval.accels[0])?;
            let mut rng = seeded_rng(
                cfg.seed
                    .wrapping_add(seed_offsets::SYNTH)
                    .wrapping_add(site as u64),
            );
            let samples =
                synth_site_dataset(&prior_model, &codec_model, site, &pool, n, 2_000_000, &mut rng)?;
            let coil_seed = cfg
                .seed
                .wrapping_add(seed_offsets::COILS)
                .wrapping_add(ops_from as u64);
            pipeline::save_samples(&out, &samples, coil_seed, site)?;
            pipeline::write_manifest(&out, &cfg, "synth")?;
            println!("wrote {n} synthetic triples to {}", out.display());
        }
        Command::TrainRecon { config, data, prior, codec, site, out, skip_finetune } => {
            let cfg = load_config(&config)?;
            if site >= cfg.sites.count {
                return Err(Error::config(format!(
                    "--site {site} out of range for {} sites",
                    cfg.sites.count
                )));
            }
            ensure_dir(&out)?;
            let datasets = pipeline::load_all_datasets(&data, cfg.sites.count)?;
            let prior_model = pipeline::load_prior(&prior)?;
            let codec_model = pipeline::load_codec(&codec)?;
            let stage = pipeline::run_recon_stage(
                &cfg,
                site,
                &datasets,
                &prior_model,
                &codec_model,
                skip_finetune,
            )?;
            save_recon_model(&out.join(format!("recon_site_{site}.ckpt")), &stage.model)?;
            let mut csv = String::from("stage,epoch,loss\n");
            for (e, l) in stage.pretrain_losses.iter().enumerate() {
                csv.push_str(&format!("pretrain,{e},{l}\n"));
            }
            for (e, l) in stage.finetune_losses.iter().enumerate() {
                csv.push_str(&format!("finetune,{e},{l}\n"));
            }
            let csv_path = out.join(format!("recon_site_{site}_loss.csv"));
            std::fs::write(&csv_path, csv)
                .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
            pipeline::write_manifest(&out, &cfg, "train-recon")?;
            println!(
                "site {site} reconstruction model trained ({})",
                if skip_finetune { "local only" } else { "local + hybrid fine-tune" }
            );
        }
        Command::Evaluate { config, models, data, out } => {
            let cfg = load_config(&config)?;
            ensure_dir(&out)?;
            let datasets = pipeline::load_all_datasets(&data, cfg.sites.count)?;
            let model_list = (0..cfg.sites.count)
                .map(|k| load_recon_model(&models.join(format!("recon_site_{k}.ckpt"))))
                .collect::<Result<Vec<_>>>()?;
            let rows = pipeline::run_eval_stage(&cfg, &model_list, &datasets)?;
            write_eval_csv(&out.join("eval.csv"), &rows)?;
            pipeline::write_manifest(&out, &cfg, "evaluate")?;
            println!("wrote {} metric rows to {}", rows.len(), out.join("eval.csv").display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
