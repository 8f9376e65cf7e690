//! Site-prompted decoder-only transformer over multi-scale token pyramids:
//! scale-causal attention, AdaLN conditioning on the site embedding, and
//! nucleus/greedy decoding for synthesis.

mod sampling;

pub use sampling::{greedy_pick, sample_nucleus};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, linear};
use crate::numerics::{Binding, ParamSet, Tape, Tensor, Var};
use crate::vq_codec::{CodecModel, TokenPyramid};

/// Additive mask value standing in for −∞; exp underflows to exactly 0
/// after max subtraction while the tape stays finite.
const MASK_NEG: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const QK_EPS: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
    pub vocab: usize,
    pub schedule: Vec<usize>,
    pub num_sites: usize,
    /// λ weight on the auxiliary site-classification loss.
    pub site_loss_weight: f64,
    /// Nucleus keep fraction q.
    pub nucleus_q: f64,
    /// Std of additive noise on the start embedding at generation time.
    pub start_noise_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            vocab: 128,
            schedule: vec![1, 2, 4, 8],
            num_sites: 3,
            site_loss_weight: 0.0015,
            nucleus_q: 0.05,
            start_noise_std: 0.0,
        }
    }
}

impl TransformerConfig {
    /// Token positions Σ p_s² (sequence is one longer: the site token).
    pub fn num_tokens(&self) -> usize {
        self.schedule.iter().map(|p| p * p).sum()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.num_sites == 0 {
            return Err(Error::config("layers, dim, num_sites must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("dim must be divisible by heads"));
        }
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("schedule must be strictly increasing"));
        }
        if !(0.0 < self.nucleus_q && self.nucleus_q <= 1.0) {
            return Err(Error::config("nucleus_q must be in (0,1]"));
        }
        Ok(())
    }

    /// Per-position scale id; 0 for the site token, s = 1.. for scales.
    pub fn scale_ids(&self) -> Vec<usize> {
        let mut ids = vec![0usize];
        for (s, &p) in self.schedule.iter().enumerate() {
            ids.extend(std::iter::repeat(s + 1).take(p * p));
        }
        ids
    }

    /// Additive attention mask: position i may attend to j iff
    /// scale(j) ≤ scale(i); the site token (scale 0) is visible to all.
    pub fn attention_mask(&self) -> Tensor {
        let ids = self.scale_ids();
        let t = ids.len();
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..t {
                if ids[j] > ids[i] {
                    m.set2(i, j, MASK_NEG);
                }
            }
        }
        m
    }
}

/// Prior parameters plus their configuration.
#[derive(Clone, Debug)]
pub struct PriorModel {
    pub cfg: TransformerConfig,
    pub params: ParamSet,
}

impl PriorModel {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = nn::seeded_rng(seed);
        let d = cfg.dim;
        let f = cfg.ffn_mult * d;
        let mut p = ParamSet::new();
        p.insert("site_emb", nn::normal_init(&[cfg.num_sites, d], 0.02, &mut rng));
        p.insert("tok_emb", nn::normal_init(&[cfg.vocab, d], 0.02, &mut rng));
        p.insert("pos_emb", nn::normal_init(&[cfg.seq_len(), d], 0.02, &mut rng));
        p.insert("sca_emb", nn::normal_init(&[cfg.schedule.len() + 1, d], 0.02, &mut rng));
        p.insert("start_emb", nn::normal_init(&[1, d], 0.02, &mut rng));
        for i in 0..cfg.layers {
            for ln in ["ln1", "ln2"] {
                // zero-init heads: γ = 1, β = 0 at start
                p.insert(format!("blk{i}/{ln}/gw"), Tensor::zeros(&[d, d]));
                p.insert(format!("blk{i}/{ln}/gb"), Tensor::zeros(&[d]));
                p.insert(format!("blk{i}/{ln}/bw"), Tensor::zeros(&[d, d]));
                p.insert(format!("blk{i}/{ln}/bb"), Tensor::zeros(&[d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("blk{i}/attn/{w}"), nn::he_uniform(&[d, d], d, &mut rng));
            }
            p.insert(format!("blk{i}/ffn/w1"), nn::he_uniform(&[d, f], d, &mut rng));
            p.insert(format!("blk{i}/ffn/b1"), Tensor::zeros(&[f]));
            p.insert(format!("blk{i}/ffn/w2"), nn::he_uniform(&[f, d], f, &mut rng));
            p.insert(format!("blk{i}/ffn/b2"), Tensor::zeros(&[d]));
        }
        for ln in ["final_ln"] {
            p.insert(format!("{ln}/gw"), Tensor::zeros(&[d, d]));
            p.insert(format!("{ln}/gb"), Tensor::zeros(&[d]));
            p.insert(format!("{ln}/bw"), Tensor::zeros(&[d, d]));
            p.insert(format!("{ln}/bb"), Tensor::zeros(&[d]));
        }
        // zero-init output heads → exactly uniform logits before training
        p.insert("head/w", Tensor::zeros(&[d, cfg.vocab]));
        p.insert("head/b", Tensor::zeros(&[cfg.vocab]));
        p.insert("probe/w", Tensor::zeros(&[d, cfg.num_sites]));
        p.insert("probe/b", Tensor::zeros(&[cfg.num_sites]));
        Ok(PriorModel { cfg, params: p })
    }

    fn check_pyramid(&self, f: &TokenPyramid) -> Result<()> {
        if f.schedule != self.cfg.schedule {
            return Err(Error::shape("pyramid schedule mismatch"));
        }
        f.validate(self.cfg.vocab)
    }

    /// AdaLN: per-row standardization with γ,β affine in the site token.
    fn adaln(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        prefix: &str,
        h: Var,
        st: Var,
    ) -> Result<Var> {
        let hn = tape.row_norm(h, LN_EPS);
        let gw = bind.var(&format!("{prefix}/gw"));
        let gb = bind.var(&format!("{prefix}/gb"));
        let bw = bind.var(&format!("{prefix}/bw"));
        let bb = bind.var(&format!("{prefix}/bb"));
        let g = linear(tape, st, gw, gb)?;
        let ones = tape.constant(Tensor::full(&[1, self.cfg.dim], 1.0));
        let gamma = tape.add(g, ones)?;
        let beta = linear(tape, st, bw, bb)?;
        let scaled = tape.mul_row(hn, gamma)?;
        tape.add_row(scaled, beta)
    }

    /// Columns [start, start+len) of a row-major matrix.
    fn col_slice(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = tape.transpose(x)?;
        let s = tape.slice_rows(xt, start, len)?;
        tape.transpose(s)
    }

    /// Multi-head self-attention with unit-norm queries/keys and the
    /// additive scale mask.
    fn mhsa(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        prefix: &str,
        h: Var,
        mask: Var,
    ) -> Result<Var> {
        let dk = self.cfg.dim / self.cfg.heads;
        let q = {
            let w = bind.var(&format!("{prefix}/wq"));
            tape.matmul(h, w)?
        };
        let k = {
            let w = bind.var(&format!("{prefix}/wk"));
            tape.matmul(h, w)?
        };
        let v = {
            let w = bind.var(&format!("{prefix}/wv"));
            tape.matmul(h, w)?
        };
        let mut head_outs_t = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let qh = Self::col_slice(tape, q, head * dk, dk)?;
            let kh = Self::col_slice(tape, k, head * dk, dk)?;
            let vh = Self::col_slice(tape, v, head * dk, dk)?;
            let qn = tape.l2_normalize_rows(qh, QK_EPS);
            let kn = tape.l2_normalize_rows(kh, QK_EPS);
            let kt = tape.transpose(kn)?;
            let scores = tape.matmul(qn, kt)?;
            let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax(scores);
            let out = tape.matmul(probs, vh)?;
            head_outs_t.push(tape.transpose(out)?);
        }
        let cat_t = tape.concat_rows(&head_outs_t)?;
        let cat = tape.transpose(cat_t)?;
        let wo = bind.var(&format!("{prefix}/wo"));
        tape.matmul(cat, wo)
    }

    /// Teacher-forced input sequence: [site token; shifted scale inputs]
    /// plus position and scale encodings. Scale 1 reads the learned start
    /// embedding (optionally perturbed); scale s ≥ 2 reads the embeddings
    /// of f_{s−1} bilinearly upsampled to p_s×p_s. f_S is never an input.
    pub fn build_input(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        f: &TokenPyramid,
        site: usize,
        start_noise: Option<&Tensor>,
    ) -> Result<Var> {
        self.check_pyramid(f)?;
        if site >= self.cfg.num_sites {
            return Err(Error::index(format!("site {site} out of range")));
        }
        let d = self.cfg.dim;
        let site_emb = bind.var("site_emb");
        let tok_emb = bind.var("tok_emb");
        let st = tape.gather(site_emb, &[site])?;
        let mut parts = vec![st];
        let start = bind.var("start_emb");
        let p1 = self.cfg.schedule[0];
        let mut s1 = tape.gather(start, &vec![0; p1 * p1])?;
        if let Some(noise) = start_noise {
            let n = tape.constant(noise.clone());
            s1 = tape.add_row(s1, n)?;
        }
        parts.push(s1);
        for s in 1..self.cfg.schedule.len() {
            let p_prev = self.cfg.schedule[s - 1];
            let p = self.cfg.schedule[s];
            let emb = tape.gather(tok_emb, &f.maps[s - 1])?;
            let grid = tape.nchw_from_rows(emb, d, p_prev, p_prev)?;
            let up = tape.upsample_bilinear(grid, p, p)?;
            parts.push(tape.rows_from_nchw(up)?);
        }
        let h = tape.concat_rows(&parts)?;
        let pos = bind.var("pos_emb");
        let h = tape.add(h, pos)?;
        let sca_emb = bind.var("sca_emb");
        let sca = tape.gather(sca_emb, &self.cfg.scale_ids())?;
        tape.add(h, sca)
    }

    /// Full forward pass; returns (token logits [T,V], site-token output
    /// row [1,d] for the probe).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        f: &TokenPyramid,
        site: usize,
        start_noise: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let mut h = self.build_input(tape, bind, f, site, start_noise)?;
        let site_emb = bind.var("site_emb");
        let st = tape.gather(site_emb, &[site])?;
        let mask = tape.constant(self.cfg.attention_mask());
        for i in 0..self.cfg.layers {
            let a_in = self.adaln(tape, bind, &format!("blk{i}/ln1"), h, st)?;
            let a = self.mhsa(tape, bind, &format!("blk{i}/attn"), a_in, mask)?;
            h = tape.add(h, a)?;
            let f_in = self.adaln(tape, bind, &format!("blk{i}/ln2"), h, st)?;
            let w1 = bind.var(&format!("blk{i}/ffn/w1"));
            let b1 = bind.var(&format!("blk{i}/ffn/b1"));
            let w2 = bind.var(&format!("blk{i}/ffn/w2"));
            let b2 = bind.var(&format!("blk{i}/ffn/b2"));
            let ff = linear(tape, f_in, w1, b1)?;
            let ff = tape.gelu(ff);
            let ff = linear(tape, ff, w2, b2)?;
            h = tape.add(h, ff)?;
        }
        let out = self.adaln(tape, bind, "final_ln", h, st)?;
        let site_row = tape.slice_rows(out, 0, 1)?;
        let tok_rows = tape.slice_rows(out, 1, self.cfg.num_tokens())?;
        let hw = bind.var("head/w");
        let hb = bind.var("head/b");
        let logits = linear(tape, tok_rows, hw, hb)?;
        Ok((logits, site_row))
    }

    /// Detached forward pass returning the logits tensor.
    pub fn forward(&self, f: &TokenPyramid, site: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let (logits, _) = self.forward_on_tape(&mut tape, &bind, f, site, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean token cross-entropy plus λ-weighted site-probe cross-entropy
    /// for one (pyramid, site) sample.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        f: &TokenPyramid,
        site: usize,
    ) -> Result<Var> {
        let (logits, site_row) = self.forward_on_tape(tape, bind, f, site, None)?;
        let targets = f.flat();
        let token_ce = tape.cross_entropy(logits, &targets)?;
        if self.cfg.site_loss_weight == 0.0 {
            return Ok(token_ce);
        }
        let pw = bind.var("probe/w");
        let pb = bind.var("probe/b");
        let site_logits = linear(tape, site_row, pw, pb)?;
        let site_ce = tape.cross_entropy(site_logits, &[site])?;
        let site_ce = tape.scale(site_ce, self.cfg.site_loss_weight);
        tape.add(token_ce, site_ce)
    }

    /// Detached loss value for a batch of (pyramid, site) samples: the
    /// mean of per-sample losses.
    pub fn loss_prior(&self, batch: &[(TokenPyramid, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::config("loss_prior: empty batch"));
        }
        let mut total = 0.0;
        for (f, site) in batch {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &self.params, false);
            let l = self.loss_on_tape(&mut tape, &bind, f, *site)?;
            total += tape.value(l).item();
        }
        Ok(total / batch.len() as f64)
    }

    /// Scale-by-scale ancestral sampling: nucleus-sample every position of
    /// a scale jointly from one forward pass, append, repeat; then decode
    /// the pyramid with the frozen codec. Output magnitude clipped to 1.
    pub fn generate(
        &self,
        site: usize,
        codec: &CodecModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TokenPyramid, Tensor)> {
        let f = self.generate_tokens(site, rng)?;
        let img = codec.decode_multiscale(&f)?;
        Ok((f, clip_magnitude(&img, 1.0)))
    }

    /// Token pyramid only (no decode).
    pub fn generate_tokens(&self, site: usize, rng: &mut ChaCha8Rng) -> Result<TokenPyramid> {
        use rand_distr::{Distribution, Normal};
        let noise = if self.cfg.start_noise_std > 0.0 {
            let dist = Normal::new(0.0, self.cfg.start_noise_std)
                .map_err(|e| Error::config(e.to_string()))?;
            let data: Vec<f64> = (0..self.cfg.dim).map(|_| dist.sample(rng)).collect();
            Some(Tensor::from_vec(&[self.cfg.dim], data)?)
        } else {
            None
        };
        // placeholder zeros for future scales are invisible to the current
        // scale's logits by the causal masking contract
        let mut f = TokenPyramid {
            schedule: self.cfg.schedule.clone(),
            maps: self.cfg.schedule.iter().map(|p| vec![0usize; p * p]).collect(),
        };
        let mut offset = 0usize;
        for s in 0..self.cfg.schedule.len() {
            let n = self.cfg.schedule[s] * self.cfg.schedule[s];
            let logits = {
                let mut tape = Tape::new();
                let bind = Binding::bind(&mut tape, &self.params, false);
                let (l, _) =
                    self.forward_on_tape(&mut tape, &bind, &f, site, noise.as_ref())?;
                tape.value(l).clone()
            };
            let vocab = self.cfg.vocab;
            for i in 0..n {
                let row = &logits.data()[(offset + i) * vocab..(offset + i + 1) * vocab];
                f.maps[s][i] = sample_nucleus(row, self.cfg.nucleus_q, rng)?;
            }
            offset += n;
        }
        Ok(f)
    }
}

/// Scale complex pixels with |v| > max down onto the magnitude ball.
pub fn clip_magnitude(img: &Tensor, max: f64) -> Tensor {
    let mut out = img.clone();
    for i in 0..img.numel() {
        let (re, im) = img.c_get(i);
        let m = (re * re + im * im).sqrt();
        if m > max {
            out.c_set(i, re * max / m, im * max / m);
        }
    }
    out
}
