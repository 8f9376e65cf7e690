//! Multi-scale residual vector-quantizing autoencoder: images are encoded
//! to a latent grid, tokenized coarse-to-fine against a shared codebook,
//! and decoded back from the accumulated token embeddings.

mod train;

pub use train::{pretrain_codec, CodecTrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, conv2d, res_block};
use crate::numerics::tape::downsample_area;
use crate::numerics::{Binding, ParamSet, Tape, Tensor, Var};

/// Codec geometry and capacity. The default is a faithful miniature of the
/// full-scale setup: 32×32 images, 8×8 latent grid, schedule {1,2,4,8}.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    pub h: usize,
    pub w: usize,
    /// Latent channel width c.
    pub latent_channels: usize,
    /// Codebook size V.
    pub vocab: usize,
    /// Strictly increasing square scale sides, last equals the latent side.
    pub schedule: Vec<usize>,
    /// Conv stack width.
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            h: 32,
            w: 32,
            latent_channels: 16,
            vocab: 128,
            schedule: vec![1, 2, 4, 8],
            width: 32,
        }
    }
}

impl CodecConfig {
    pub fn latent_side(&self) -> usize {
        *self.schedule.last().unwrap()
    }

    pub fn num_scales(&self) -> usize {
        self.schedule.len()
    }

    /// Total token count Σ p_s².
    pub fn total_tokens(&self) -> usize {
        self.schedule.iter().map(|p| p * p).sum()
    }

    fn num_down(&self) -> usize {
        let ratio = self.h / self.latent_side();
        (ratio as f64).log2().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("schedule must be strictly increasing"));
        }
        let ps = self.latent_side();
        if self.h != self.w || self.h % ps != 0 || !(self.h / ps).is_power_of_two() {
            return Err(Error::config("H must be square and a power-of-two multiple of p_S"));
        }
        for &p in &self.schedule {
            if ps % p != 0 {
                return Err(Error::config("each scale side must divide the latent side"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be >= 2"));
        }
        Ok(())
    }
}

/// Integer token maps f_1..f_S, coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPyramid {
    pub schedule: Vec<usize>,
    pub maps: Vec<Vec<usize>>,
}

impl TokenPyramid {
    pub fn total_tokens(&self) -> usize {
        self.maps.iter().map(|m| m.len()).sum()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.maps.len() != self.schedule.len() {
            return Err(Error::shape("pyramid/schedule length mismatch"));
        }
        for (p, m) in self.schedule.iter().zip(&self.maps) {
            if m.len() != p * p {
                return Err(Error::shape("token map size mismatch"));
            }
            if m.iter().any(|&t| t >= vocab) {
                return Err(Error::index("token index out of range"));
            }
        }
        Ok(())
    }

    /// Flat token list in autoregressive order.
    pub fn flat(&self) -> Vec<usize> {
        self.maps.iter().flatten().cloned().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let flat: Vec<f64> = self.flat().iter().map(|&t| t as f64).collect();
        Tensor::from_vec(&[flat.len()], flat).unwrap()
    }

    pub fn from_tensor(t: &Tensor, schedule: &[usize]) -> Result<TokenPyramid> {
        let mut maps = Vec::new();
        let mut off = 0;
        for &p in schedule {
            let n = p * p;
            if off + n > t.data().len() {
                return Err(Error::shape("token tensor too short for schedule"));
            }
            maps.push(t.data()[off..off + n].iter().map(|&v| v as usize).collect());
            off += n;
        }
        if off != t.data().len() {
            return Err(Error::shape("token tensor too long for schedule"));
        }
        Ok(TokenPyramid { schedule: schedule.to_vec(), maps })
    }
}

/// Nearest codebook row by squared Euclidean distance, ties broken by the
/// smallest index.
pub fn quantize(vectors: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    if codebook.dims()[0] == 0 {
        return Err(Error::config("empty codebook"));
    }
    if vectors.dims()[1] != codebook.dims()[1] {
        return Err(Error::shape("quantize: channel mismatch"));
    }
    let (n, c) = (vectors.dims()[0], vectors.dims()[1]);
    let v = codebook.dims()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &vectors.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..v {
            let code = &codebook.data()[j * c..(j + 1) * c];
            let mut d = 0.0;
            for k in 0..c {
                let diff = row[k] - code[k];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Codec parameters (conv stacks + codebook) with their configuration.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub cfg: CodecConfig,
    pub params: ParamSet,
}

pub const CODEBOOK_PATH: &str = "codebook";

impl CodecModel {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = nn::seeded_rng(seed);
        let w = cfg.width;
        let c = cfg.latent_channels;
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet, name: &str, cin: usize, cout: usize| {
            // the closing conv of every residual block starts at zero so
            // each block begins as the identity; he_uniform there makes
            // the stacked blocks blow up the initial reconstruction
            let w = if name.ends_with('b') && name.contains("res") {
                Tensor::zeros(&[cin * 9, cout])
            } else {
                nn::he_uniform(&[cin * 9, cout], cin * 9, &mut rng)
            };
            p.insert(format!("{name}/w"), w);
            p.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
        };
        conv(&mut p, "enc/in", 2, w);
        conv(&mut p, "enc/res_in_a", w, w);
        conv(&mut p, "enc/res_in_b", w, w);
        for i in 0..cfg.num_down() {
            conv(&mut p, &format!("enc/down{i}"), w, w);
            conv(&mut p, &format!("enc/res{i}a"), w, w);
            conv(&mut p, &format!("enc/res{i}b"), w, w);
        }
        conv(&mut p, "enc/out", w, c);
        conv(&mut p, "dec/in", c, w);
        for i in 0..cfg.num_down() {
            conv(&mut p, &format!("dec/res{i}a"), w, w);
            conv(&mut p, &format!("dec/res{i}b"), w, w);
            conv(&mut p, &format!("dec/up{i}"), w, w);
        }
        conv(&mut p, "dec/res_out_a", w, w);
        conv(&mut p, "dec/res_out_b", w, w);
        conv(&mut p, "dec/out", w, 2);
        p.insert("proj/w", nn::identity_conv_weight(c));
        p.insert("proj/b", Tensor::zeros(&[c]));
        p.insert(CODEBOOK_PATH, nn::normal_init(&[cfg.vocab, c], 0.5, &mut rng));
        Ok(CodecModel { cfg, params: p })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(CODEBOOK_PATH).unwrap()
    }

    fn pair(&self, bind: &Binding, name: &str) -> (Var, Var) {
        (bind.var(&format!("{name}/w")), bind.var(&format!("{name}/b")))
    }

    /// Encoder conv stack on a [2,H,W] channel image var.
    pub fn encoder_forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let (w, b) = self.pair(bind, "enc/in");
        let mut h = conv2d(tape, x, w, b, 1)?;
        h = tape.relu(h);
        {
            // full-resolution block: fine texture is lost to the first
            // stride otherwise
            let (wa, ba) = self.pair(bind, "enc/res_in_a");
            let (wb, bb) = self.pair(bind, "enc/res_in_b");
            h = res_block(tape, h, wa, ba, wb, bb)?;
        }
        for i in 0..self.cfg.num_down() {
            let (w, b) = self.pair(bind, &format!("enc/down{i}"));
            h = conv2d(tape, h, w, b, 2)?;
            h = tape.relu(h);
            let (wa, ba) = self.pair(bind, &format!("enc/res{i}a"));
            let (wb, bb) = self.pair(bind, &format!("enc/res{i}b"));
            h = res_block(tape, h, wa, ba, wb, bb)?;
        }
        let (w, b) = self.pair(bind, "enc/out");
        conv2d(tape, h, w, b, 1)
    }

    /// Decoder conv stack on a [c,p_S,p_S] latent var.
    pub fn decoder_forward(&self, tape: &mut Tape, bind: &Binding, z: Var) -> Result<Var> {
        let (w, b) = self.pair(bind, "dec/in");
        let mut h = conv2d(tape, z, w, b, 1)?;
        h = tape.relu(h);
        let mut side = self.cfg.latent_side();
        for i in 0..self.cfg.num_down() {
            let (wa, ba) = self.pair(bind, &format!("dec/res{i}a"));
            let (wb, bb) = self.pair(bind, &format!("dec/res{i}b"));
            h = res_block(tape, h, wa, ba, wb, bb)?;
            side *= 2;
            h = tape.upsample_bilinear(h, side, side)?;
            let (w, b) = self.pair(bind, &format!("dec/up{i}"));
            h = conv2d(tape, h, w, b, 1)?;
            h = tape.relu(h);
        }
        {
            let (wa, ba) = self.pair(bind, "dec/res_out_a");
            let (wb, bb) = self.pair(bind, "dec/res_out_b");
            h = res_block(tape, h, wa, ba, wb, bb)?;
        }
        let (w, b) = self.pair(bind, "dec/out");
        conv2d(tape, h, w, b, 1)
    }

    /// Token embeddings for one scale, projected and upsampled to the
    /// latent grid: Proj(Up(Lookup(codebook, f_s))).
    pub fn scale_contribution(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        codebook: Var,
        tokens: &[usize],
        side: usize,
    ) -> Result<Var> {
        let c = self.cfg.latent_channels;
        let ps = self.cfg.latent_side();
        let emb = tape.gather(codebook, tokens)?;
        let grid = tape.nchw_from_rows(emb, c, side, side)?;
        let up = if side == ps { grid } else { tape.upsample_bilinear(grid, ps, ps)? };
        let (w, b) = self.pair(bind, "proj");
        conv2d(tape, up, w, b, 1)
    }

    /// Accumulated latent reconstruction from a token pyramid.
    pub fn tokens_to_latent_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        codebook: Var,
        f: &TokenPyramid,
    ) -> Result<Var> {
        f.validate(self.cfg.vocab)?;
        let mut acc: Option<Var> = None;
        for (s, tokens) in f.maps.iter().enumerate() {
            let contrib =
                self.scale_contribution(tape, bind, codebook, tokens, f.schedule[s])?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// Deterministic encoder pass, [H,W] complex image to [c,p_S,p_S].
    pub fn encode_latent(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != [self.cfg.h, self.cfg.w] || !x.is_complex() {
            return Err(Error::shape("encode_latent: image shape mismatch"));
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let xc = tape.constant(x.complex_to_channels());
        let z = self.encoder_forward(&mut tape, &bind, xc)?;
        Ok(tape.value(z).clone())
    }

    /// Coarse-to-fine residual tokenization of a latent grid. Returns the
    /// pyramid, the accumulated quantized latent, and the per-scale
    /// (rows, indices) assignments for codebook EMA updates.
    pub fn encode_multiscale_latent(
        &self,
        z: &Tensor,
    ) -> Result<(TokenPyramid, Tensor, Vec<(Tensor, Vec<usize>)>)> {
        let ps = self.cfg.latent_side();
        let c = self.cfg.latent_channels;
        if z.dims() != [c, ps, ps] {
            return Err(Error::shape("encode_multiscale_latent: latent shape mismatch"));
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let codebook = bind.var(CODEBOOK_PATH);
        let mut residual = tape.constant(z.clone());
        let mut maps = Vec::new();
        let mut assignments = Vec::new();
        let mut acc: Option<Var> = None;
        for &p in &self.cfg.schedule {
            let r_val = tape.value(residual).clone();
            let down = if p == ps { r_val } else { downsample_area(&r_val, ps / p) };
            let rows = {
                let mut t = Tape::new();
                let d = t.constant(down.clone());
                let r = t.rows_from_nchw(d)?;
                t.value(r).clone()
            };
            let tokens = quantize(&rows, self.codebook())?;
            let contrib = self.scale_contribution(&mut tape, &bind, codebook, &tokens, p)?;
            residual = tape.sub(residual, contrib)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
            maps.push(tokens.clone());
            assignments.push((rows, tokens));
        }
        let zq = tape.value(acc.unwrap()).clone();
        Ok((
            TokenPyramid { schedule: self.cfg.schedule.clone(), maps },
            zq,
            assignments,
        ))
    }

    /// Image to token pyramid.
    pub fn encode_multiscale(&self, x: &Tensor) -> Result<TokenPyramid> {
        let z = self.encode_latent(x)?;
        Ok(self.encode_multiscale_latent(&z)?.0)
    }

    /// Plain latent reconstruction from tokens.
    pub fn tokens_to_latent(&self, f: &TokenPyramid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let codebook = bind.var(CODEBOOK_PATH);
        let v = self.tokens_to_latent_on_tape(&mut tape, &bind, codebook, f)?;
        Ok(tape.value(v).clone())
    }

    /// Token pyramid to complex [H,W] image.
    pub fn decode_multiscale(&self, f: &TokenPyramid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let codebook = bind.var(CODEBOOK_PATH);
        let zq = self.tokens_to_latent_on_tape(&mut tape, &bind, codebook, f)?;
        let out = self.decoder_forward(&mut tape, &bind, zq)?;
        Ok(tape.value(out).clone().channels_to_complex())
    }

    /// decode(encode(x)) convenience round trip.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.encode_multiscale(x)?;
        self.decode_multiscale(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            h: 16,
            w: 16,
            latent_channels: 4,
            vocab: 16,
            schedule: vec![1, 2, 4],
            width: 6,
        }
    }

    #[test]
    fn quantize_examples() {
        let cb = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let v = Tensor::from_vec(&[1, 2], vec![0.9, 1.2]).unwrap();
        assert_eq!(quantize(&v, &cb).unwrap(), vec![1]);
        let exact = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(quantize(&exact, &cb).unwrap(), vec![1]);
        // tie between rows 0 and 1 resolves to the smaller index
        let tie = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&tie, &cb).unwrap(), vec![0]);
    }

    #[test]
    fn quantize_matches_brute_force() {
        let cb = random_tensor(&[16, 4], 1);
        let vs = random_tensor(&[64, 4], 2);
        let got = quantize(&vs, &cb).unwrap();
        // independent oracle via norm expansion ‖a−b‖² = ‖a‖² − 2a·b + ‖b‖²
        for i in 0..64 {
            let row = &vs.data()[i * 4..(i + 1) * 4];
            let a2: f64 = row.iter().map(|v| v * v).sum();
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..16 {
                let code = &cb.data()[j * 4..(j + 1) * 4];
                let b2: f64 = code.iter().map(|v| v * v).sum();
                let ab: f64 = row.iter().zip(code).map(|(a, b)| a * b).sum();
                let d = a2 - 2.0 * ab + b2;
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(got[i], best.1, "vector {i}");
        }
    }

    #[test]
    fn token_count_arithmetic() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.total_tokens(), 85);
    }

    #[test]
    fn zero_image_zero_latent() {
        let model = CodecModel::new(tiny_cfg(), 3).unwrap();
        let z = model.encode_latent(&Tensor::complex_zeros(&[16, 16])).unwrap();
        assert_eq!(z.dims(), &[4, 4, 4]);
        assert_eq!(z.norm(), 0.0); // zero biases, ReLU fixes 0
    }

    #[test]
    fn encode_deterministic_with_shape() {
        let model = CodecModel::new(tiny_cfg(), 4).unwrap();
        let mut x = Tensor::complex_zeros(&[16, 16]);
        for i in 0..256 {
            x.c_set(i, (i as f64 * 0.37).sin() * 0.5, 0.0);
        }
        let f1 = model.encode_multiscale(&x).unwrap();
        let f2 = model.encode_multiscale(&x).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.total_tokens(), 1 + 4 + 16);
        let img = model.decode_multiscale(&f1).unwrap();
        assert_eq!(img.dims(), &[16, 16]);
        assert!(img.is_complex());
    }

    #[test]
    fn zero_latent_all_zero_tokens() {
        let mut model = CodecModel::new(tiny_cfg(), 5).unwrap();
        // force code 0 to the zero vector
        let cb = model.params.get_mut(CODEBOOK_PATH).unwrap();
        for k in 0..4 {
            cb.set2(0, k, 0.0);
        }
        let z = Tensor::zeros(&[4, 4, 4]);
        let (f, _, _) = model.encode_multiscale_latent(&z).unwrap();
        for m in &f.maps {
            assert!(m.iter().all(|&t| t == 0));
        }
    }

    #[test]
    fn single_scale_is_plain_vq() {
        let cfg = CodecConfig {
            schedule: vec![4],
            ..tiny_cfg()
        };
        let model = CodecModel::new(cfg, 6).unwrap();
        let z = random_tensor(&[4, 4, 4], 7);
        let (f, _, assignments) = model.encode_multiscale_latent(&z).unwrap();
        assert_eq!(f.maps.len(), 1);
        // equals direct quantization of the latent rows
        let rows = &assignments[0].0;
        assert_eq!(f.maps[0], quantize(rows, model.codebook()).unwrap());
    }

    #[test]
    fn exact_codebook_telescoping() {
        // codebook seeded with the true residual rows + identity projection
        // must reproduce the latent exactly through the token pyramid.
        let cfg = tiny_cfg();
        let mut model = CodecModel::new(cfg.clone(), 8).unwrap();
        model.params.insert("proj/w", nn::identity_conv_weight(cfg.latent_channels));
        model.params.insert("proj/b", Tensor::zeros(&[cfg.latent_channels]));
        let z = random_tensor(&[4, 4, 4], 9);
        // simulate the residual loop with identity quantization to collect
        // the exact rows the codebook must contain
        let c = cfg.latent_channels;
        let ps = cfg.latent_side();
        let mut rows: Vec<f64> = Vec::new();
        let mut count = 0;
        let mut residual = z.clone();
        for &p in &cfg.schedule {
            let down = if p == ps {
                residual.clone()
            } else {
                crate::numerics::tape::downsample_area(&residual, ps / p)
            };
            let mut t = Tape::new();
            let dv = t.constant(down.clone());
            let rv = t.rows_from_nchw(dv).unwrap();
            rows.extend_from_slice(t.value(rv).data());
            count += t.value(rv).dims()[0];
            // contribution through identity projection = bilinear upsample
            let g = t.constant(down);
            let up = if p == ps { g } else { t.upsample_bilinear(g, ps, ps).unwrap() };
            residual = residual.sub(t.value(up)).unwrap();
        }
        model
            .params
            .insert(CODEBOOK_PATH, Tensor::from_vec(&[count, c], rows).unwrap());
        model.cfg.vocab = count;
        let (f, zq, _) = model.encode_multiscale_latent(&z).unwrap();
        assert!(zq.sub(&z).unwrap().norm() < 1e-8, "telescoping failed");
        let back = model.tokens_to_latent(&f).unwrap();
        assert!(back.sub(&z).unwrap().norm() < 1e-8);
    }

    #[test]
    fn zero_pyramid_zero_decoder_bias_gives_zero_image() {
        let mut model = CodecModel::new(tiny_cfg(), 10).unwrap();
        let cb = model.params.get_mut(CODEBOOK_PATH).unwrap();
        for k in 0..4 {
            cb.set2(0, k, 0.0);
        }
        let f = TokenPyramid {
            schedule: vec![1, 2, 4],
            maps: vec![vec![0], vec![0; 4], vec![0; 16]],
        };
        let img = model.decode_multiscale(&f).unwrap();
        assert_eq!(img.dims(), &[16, 16]);
        assert_eq!(img.norm(), 0.0);
    }

    #[test]
    fn pyramid_tensor_round_trip() {
        let f = TokenPyramid {
            schedule: vec![1, 2],
            maps: vec![vec![3], vec![0, 1, 2, 3]],
        };
        let t = f.to_tensor();
        assert_eq!(TokenPyramid::from_tensor(&t, &[1, 2]).unwrap(), f);
    }
}
