//! Run configuration: one TOML file drives the whole pipeline. Every
//! field has a default, unknown keys are rejected, and the master seed
//! plus fixed per-stage offsets determine every random stream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar_transformer::TransformerConfig;
use crate::datasets::SiteSpec;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::numerics::AdamWHyper;
use crate::persistence::fnv1a;
use crate::recon::{ArchFamily, ArchSpec, ReconTrainConfig};
use crate::vq_codec::{CodecConfig, CodecTrainConfig};

fn d_count() -> usize {
    3
}
fn d_side() -> usize {
    32
}
fn d_n_train() -> usize {
    128
}
fn d_n_val() -> usize {
    16
}
fn d_n_test() -> usize {
    32
}
fn d_bases() -> Vec<f64> {
    vec![0.3, 0.5, 0.7]
}
fn d_freqs() -> Vec<f64> {
    vec![2.0, 4.0, 7.0]
}
fn d_polarities() -> Vec<f64> {
    vec![1.0, -1.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SitesSection {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub intensity_bases: Vec<f64>,
    pub texture_freqs: Vec<f64>,
    pub contrast_polarities: Vec<f64>,
}

impl Default for SitesSection {
    fn default() -> Self {
        SitesSection {
            count: d_count(),
            h: d_side(),
            w: d_side(),
            n_train: d_n_train(),
            n_val: d_n_val(),
            n_test: d_n_test(),
            intensity_bases: d_bases(),
            texture_freqs: d_freqs(),
            contrast_polarities: d_polarities(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub latent_channels: usize,
    pub vocab: usize,
    pub schedule: Vec<usize>,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub commit_weight: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        let t = CodecTrainConfig::default();
        CodecSection {
            latent_channels: c.latent_channels,
            vocab: c.vocab,
            schedule: c.schedule,
            width: c.width,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.hyper.lr,
            ema_decay: t.ema_decay,
            commit_weight: t.commit_weight,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub site_loss_weight: f64,
    pub nucleus_q: f64,
    pub start_noise_std: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let t = TransformerConfig::default();
        PriorSection {
            layers: t.layers,
            dim: t.dim,
            heads: t.heads,
            ffn_mult: t.ffn_mult,
            site_loss_weight: t.site_loss_weight,
            nucleus_q: t.nucleus_q,
            start_noise_std: t.start_noise_std,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Aggregation weights; empty means uniform 1/K.
    pub weights: Vec<f64>,
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            rounds: 50,
            local_epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            weights: Vec::new(),
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub arch: ArchFamily,
    pub cascades: usize,
    pub width: usize,
    pub mu_init: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Synthetic images generated per source site for fine-tuning.
    pub n_synth: usize,
}

impl Default for ReconSection {
    fn default() -> Self {
        ReconSection {
            arch: ArchFamily::CascadeDc,
            cascades: 3,
            width: 12,
            mu_init: 0.05,
            pretrain_epochs: 30,
            finetune_epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            n_synth: 32,
        }
    }
}

impl ReconSection {
    /// The default heterogeneous line-up: a different family per site.
    pub fn default_for_site(site: usize) -> Self {
        let spec = match site % 3 {
            0 => ArchSpec::cascade_dc(3),
            1 => ArchSpec::conv_autoencoder(),
            _ => ArchSpec::unrolled(5),
        };
        ReconSection {
            arch: spec.family,
            cascades: spec.cascades,
            width: spec.width,
            mu_init: spec.mu_init,
            ..ReconSection::default()
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            family: self.arch,
            cascades: self.cascades,
            width: self.width,
            mu_init: self.mu_init,
        }
    }
}

fn d_accels() -> Vec<f64> {
    vec![4.0, 8.0]
}
fn d_ncoils() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub accels: Vec<f64>,
    pub ncoils: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { accels: d_accels(), ncoils: d_ncoils() }
    }
}

/// Per-stage seed offsets mixed into the master seed; recorded verbatim
/// in the output manifest so any artifact can be traced to its stream.
pub mod seed_offsets {
    pub const CODEC_INIT: u64 = 10;
    pub const CODEC_TRAIN: u64 = 11;
    pub const PRIOR_INIT: u64 = 20;
    pub const FEDERATION: u64 = 30;
    pub const RECON_INIT: u64 = 40;
    pub const RECON_TRAIN: u64 = 41;
    pub const SYNTH: u64 = 50;
    pub const COILS: u64 = 60;
    pub const MASKS: u64 = 70;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub sites: SitesSection,
    pub codec: CodecSection,
    pub prior: PriorSection,
    pub federation: FederationSection,
    /// Keyed "site_0", "site_1", …; missing sites use the default
    /// per-site family rotation.
    pub recon: BTreeMap<String, ReconSection>,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sites: SitesSection::default(),
            codec: CodecSection::default(),
            prior: PriorSection::default(),
            federation: FederationSection::default(),
            recon: BTreeMap::new(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if let Some(field) = msg.strip_prefix("missing field ") {
                Error::config(format!("config is missing section {field}"))
            } else {
                Error::config(format!("config parse: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the canonical TOML rendering.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.sites.count;
        if k < 2 {
            return Err(Error::config("sites.count must be >= 2"));
        }
        for (name, v) in [
            ("intensity_bases", &self.sites.intensity_bases),
            ("texture_freqs", &self.sites.texture_freqs),
            ("contrast_polarities", &self.sites.contrast_polarities),
        ] {
            if v.len() < k {
                return Err(Error::config(format!(
                    "sites.{name} has {} entries for {k} sites",
                    v.len()
                )));
            }
        }
        if self.federation.rounds == 0 {
            return Err(Error::config("federation.rounds must be >= 1"));
        }
        if !self.federation.weights.is_empty() && self.federation.weights.len() != k {
            return Err(Error::config(format!(
                "federation.weights has {} entries for {k} sites",
                self.federation.weights.len()
            )));
        }
        for key in self.recon.keys() {
            let site = key
                .strip_prefix("site_")
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::config(format!("recon key {key:?}: expected site_<k>")))?;
            if site >= k {
                return Err(Error::config(format!("recon.{key}: only {k} sites configured")));
            }
        }
        if self.eval.accels.is_empty() {
            return Err(Error::config("eval.accels must be nonempty"));
        }
        self.codec_config()?.validate()?;
        self.transformer_config().validate()?;
        Ok(())
    }

    pub fn site_specs(&self) -> Vec<SiteSpec> {
        (0..self.sites.count)
            .map(|site| SiteSpec {
                site,
                ellipse_count_min: 3,
                ellipse_count_max: 7,
                intensity_base: self.sites.intensity_bases[site],
                texture_freq: self.sites.texture_freqs[site],
                contrast_polarity: self.sites.contrast_polarities[site],
                seed: self.seed.wrapping_add(1000 * (site as u64 + 1)),
            })
            .collect()
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        Ok(CodecConfig {
            h: self.sites.h,
            w: self.sites.w,
            latent_channels: self.codec.latent_channels,
            vocab: self.codec.vocab,
            schedule: self.codec.schedule.clone(),
            width: self.codec.width,
        })
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            epochs: self.codec.epochs,
            batch_size: self.codec.batch_size,
            hyper: AdamWHyper { lr: self.codec.lr, ..AdamWHyper::default() },
            ema_decay: self.codec.ema_decay,
            commit_weight: self.codec.commit_weight,
            seed: self.seed.wrapping_add(seed_offsets::CODEC_TRAIN),
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.prior.layers,
            dim: self.prior.dim,
            heads: self.prior.heads,
            ffn_mult: self.prior.ffn_mult,
            vocab: self.codec.vocab,
            schedule: self.codec.schedule.clone(),
            num_sites: self.sites.count,
            site_loss_weight: self.prior.site_loss_weight,
            nucleus_q: self.prior.nucleus_q,
            start_noise_std: self.prior.start_noise_std,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        let k = self.sites.count;
        let weights = if self.federation.weights.is_empty() {
            vec![1.0 / k as f64; k]
        } else {
            self.federation.weights.clone()
        };
        FederationConfig {
            rounds: self.federation.rounds,
            local_epochs: self.federation.local_epochs,
            batch_size: self.federation.batch_size,
            weights,
            hyper: AdamWHyper { lr: self.federation.lr, ..AdamWHyper::default() },
            seed: self.seed.wrapping_add(seed_offsets::FEDERATION),
            parallel: self.federation.parallel,
        }
    }

    pub fn recon_section(&self, site: usize) -> ReconSection {
        self.recon
            .get(&format!("site_{site}"))
            .cloned()
            .unwrap_or_else(|| ReconSection::default_for_site(site))
    }

    pub fn recon_train_config(&self, site: usize, epochs: usize) -> ReconTrainConfig {
        let sec = self.recon_section(site);
        ReconTrainConfig {
            epochs,
            batch_size: sec.batch_size,
            hyper: AdamWHyper { lr: sec.lr, ..AdamWHyper::default() },
            seed: self
                .seed
                .wrapping_add(seed_offsets::RECON_TRAIN)
                .wrapping_add(100 * site as u64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_text() -> String {
        RunConfig::default().to_toml()
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::parse(&default_text()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{}\n[bogus]\nx = 1\n", default_text());
        assert!(RunConfig::parse(&text).is_err());
        let text2 = default_text().replace("count = 3", "count = 3\nshoe_size = 9");
        assert!(RunConfig::parse(&text2).is_err());
    }

    #[test]
    fn missing_section_names_the_section() {
        let text = default_text();
        let start = text.find("[federation]").unwrap();
        let end = text[start..].find("\n[").map(|o| start + o).unwrap_or(text.len());
        let without = format!("{}{}", &text[..start], &text[end..]);
        let err = RunConfig::parse(&without).unwrap_err().to_string();
        assert!(err.contains("federation"), "error should name the section: {err}");
    }

    #[test]
    fn overrides_apply() {
        let text = default_text()
            .replace("rounds = 50", "rounds = 3")
            .replace("seed = 0", "seed = 99");
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.federation_config().rounds, 3);
    }

    #[test]
    fn recon_site_sections_parse() {
        let text = format!(
            "{}\n[recon.site_1]\narch = \"unrolled\"\ncascades = 2\n",
            default_text()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.recon_section(1).arch, ArchFamily::Unrolled);
        assert_eq!(cfg.recon_section(1).cascades, 2);
        // unconfigured sites fall back to the family rotation
        assert_eq!(cfg.recon_section(0).arch, ArchFamily::CascadeDc);
        assert_eq!(cfg.recon_section(2).arch, ArchFamily::Unrolled);
        assert_eq!(cfg.recon_section(2).cascades, 5);
    }

    #[test]
    fn bad_recon_key_rejected() {
        let text = format!("{}\n[recon.station_9]\ncascades = 2\n", default_text());
        assert!(RunConfig::parse(&text).is_err());
        let text2 = format!("{}\n[recon.site_7]\ncascades = 2\n", default_text());
        assert!(RunConfig::parse(&text2).is_err());
    }

    #[test]
    fn zero_rounds_rejected() {
        let text = default_text().replace("rounds = 50", "rounds = 0");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn derived_configs_are_consistent() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.site_specs().len(), 3);
        assert_eq!(cfg.codec_config().unwrap(), CodecConfig::default());
        let t = cfg.transformer_config();
        assert_eq!((t.vocab, t.num_sites), (128, 3));
        let f = cfg.federation_config();
        assert_eq!(f.weights, vec![1.0 / 3.0; 3]);
    }
}
