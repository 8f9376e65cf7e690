//! Synthetic multi-site phantom generation with controlled inter-site
//! heterogeneity, dataset persistence and a moment-based distribution
//! distance between image sets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::persistence;

/// Per-site phantom family parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SiteSpec {
    pub site: usize,
    pub ellipse_count_min: usize,
    pub ellipse_count_max: usize,
    /// Target mean magnitude, in (0,1).
    pub intensity_base: f64,
    /// Cycles across the field of view for the sinusoidal texture.
    pub texture_freq: f64,
    /// Interior ellipses brighten (+1) or darken (−1) relative to the shell.
    pub contrast_polarity: f64,
    pub seed: u64,
}

impl SiteSpec {
    pub fn default_three_sites(master_seed: u64) -> Vec<SiteSpec> {
        let bases = [0.3, 0.5, 0.7];
        let freqs = [2.0, 4.0, 7.0];
        let pols = [1.0, -1.0, 1.0];
        (0..3)
            .map(|k| SiteSpec {
                site: k,
                ellipse_count_min: 3,
                ellipse_count_max: 7,
                intensity_base: bases[k],
                texture_freq: freqs[k],
                contrast_polarity: pols[k],
                seed: master_seed.wrapping_add(1000 * (k as u64 + 1)),
            })
            .collect()
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos_t: f64,
    sin_t: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.ax;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ay;
        u * u + v * v <= 1.0
    }
}

fn phantom_rng(spec: &SiteSpec, index: usize) -> ChaCha8Rng {
    let s = spec
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((index as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    ChaCha8Rng::seed_from_u64(s)
}

/// One complex phantom image: random ellipse composition with the site's
/// base intensity, sinusoidal texture and a smooth phase map. Magnitude in
/// [0,1], mean magnitude rescaled to the site base level.
pub fn gen_phantom(spec: &SiteSpec, index: usize, h: usize, w: usize) -> Tensor {
    let mut rng = phantom_rng(spec, index);
    let mut ellipses = Vec::new();
    // outer shell
    let shell = Ellipse {
        cy: h as f64 * rng.gen_range(0.48..0.52),
        cx: w as f64 * rng.gen_range(0.48..0.52),
        ay: h as f64 * rng.gen_range(0.38..0.46),
        ax: w as f64 * rng.gen_range(0.36..0.44),
        cos_t: 1.0,
        sin_t: 0.0,
        value: 0.8,
    };
    let n_inner = rng.gen_range(spec.ellipse_count_min..=spec.ellipse_count_max);
    for _ in 0..n_inner {
        let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        ellipses.push(Ellipse {
            cy: shell.cy + h as f64 * rng.gen_range(-0.25..0.25),
            cx: shell.cx + w as f64 * rng.gen_range(-0.25..0.25),
            ay: h as f64 * rng.gen_range(0.04..0.16),
            ax: w as f64 * rng.gen_range(0.04..0.16),
            cos_t: t.cos(),
            sin_t: t.sin(),
            value: spec.contrast_polarity * rng.gen_range(0.1..0.35),
        });
    }
    let tex_theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let tex_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    // smooth phase map coefficients
    let p0: f64 = rng.gen_range(-1.0..1.0);
    let p1: f64 = rng.gen_range(-0.5..0.5);
    let p2: f64 = rng.gen_range(-0.5..0.5);
    let p3: f64 = rng.gen_range(-0.5..0.5);

    let mut mag = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let mut v = 0.08;
            if shell.contains(yf, xf) {
                v += shell.value;
                for e in &ellipses {
                    if e.contains(yf, xf) {
                        v += e.value;
                    }
                }
                let u = (xf * tex_theta.cos() + yf * tex_theta.sin()) / h as f64;
                v += 0.06 * (std::f64::consts::TAU * spec.texture_freq * u + tex_phase).sin();
            }
            mag[y * w + x] = v.max(0.0);
        }
    }
    // partial-volume smoothing: a voxel straddling a tissue boundary
    // averages both compartments, so the magnitude map is blurred with a
    // small separable Gaussian (σ ≈ 0.8 px) instead of keeping step edges
    let kernel = [0.239, 0.522, 0.239f64]; // 3-tap exp(-d²/2σ²), σ = 0.8, renormalized
    let blur_1d = |src: &[f64], h: usize, w: usize, along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let d = t as isize - 1;
                    let (yy, xx) = if along_x {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    mag = blur_1d(&blur_1d(&mag, h, w, true), h, w, false);
    // rescale toward the site's base mean, keeping magnitudes in [0,1];
    // additive correction rounds convert clamping losses into a lifted floor
    for _ in 0..3 {
        let mean: f64 = mag.iter().sum::<f64>() / mag.len() as f64;
        let s = spec.intensity_base / mean;
        for v in mag.iter_mut() {
            *v = (*v * s).clamp(0.0, 1.0);
        }
    }
    for _ in 0..8 {
        let mean: f64 = mag.iter().sum::<f64>() / mag.len() as f64;
        let shift = spec.intensity_base - mean;
        for v in mag.iter_mut() {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    let tau = std::f64::consts::TAU;
    let mut img = Tensor::complex_zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (yn, xn) = (y as f64 / h as f64, x as f64 / w as f64);
            let phase = p0 + p1 * tau * yn + p2 * tau * xn + p3 * (tau * yn).sin() * (tau * xn).cos();
            let m = mag[y * w + x];
            img.c_set(y * w + x, m * phase.cos(), m * phase.sin());
        }
    }
    img
}

pub fn gen_site_phantoms(spec: &SiteSpec, n: usize, h: usize, w: usize) -> Vec<Tensor> {
    (0..n).map(|i| gen_phantom(spec, i, h, w)).collect()
}

/// Disjoint train/val/test index partition covering 0..n.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {sum}, expected 1")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let b1 = (n as f64 * fractions.0).round() as usize;
    let b2 = (n as f64 * (fractions.0 + fractions.1)).round() as usize;
    Ok(Split {
        train: indices[..b1].to_vec(),
        val: indices[b1..b2].to_vec(),
        test: indices[b2..].to_vec(),
    })
}

/// 8-dim hand-crafted feature vector: mean, std, gradient energy, 5-bin
/// magnitude histogram.
pub fn image_features(img: &Tensor) -> [f64; 8] {
    let mag = if img.is_complex() { img.magnitude() } else { img.clone() };
    let (h, w) = (mag.dims()[0], mag.dims()[1]);
    let n = (h * w) as f64;
    let mean = mag.data().iter().sum::<f64>() / n;
    let var = mag.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut grad = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let d = mag.get2(y, x + 1) - mag.get2(y, x);
                grad += d * d;
            }
            if y + 1 < h {
                let d = mag.get2(y + 1, x) - mag.get2(y, x);
                grad += d * d;
            }
        }
    }
    let mut hist = [0.0f64; 5];
    for &v in mag.data() {
        let b = ((v * 5.0) as usize).min(4);
        hist[b] += 1.0 / n;
    }
    [mean, var.sqrt(), grad / n, hist[0], hist[1], hist[2], hist[3], hist[4]]
}

fn gaussian_fit(images: &[Tensor]) -> (DVector<f64>, DMatrix<f64>) {
    let feats: Vec<[f64; 8]> = images.iter().map(image_features).collect();
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(8);
    for f in &feats {
        for i in 0..8 {
            mu[i] += f[i] / n;
        }
    }
    let mut cov = DMatrix::zeros(8, 8);
    for f in &feats {
        for i in 0..8 {
            for j in 0..8 {
                cov[(i, j)] += (f[i] - mu[i]) * (f[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    cov /= denom;
    // ridge keeps the matrix square roots well defined for degenerate sets
    for i in 0..8 {
        cov[(i, i)] += 1e-8;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = DMatrix::zeros(8, 8);
    for i in 0..8 {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn frechet_cross_term(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(ca);
    let inner = &ra * cb * &ra;
    psd_sqrt(&inner).trace()
}

/// Fréchet distance between Gaussian fits of the per-image feature vectors.
pub fn dist_distance(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::config("dist_distance: empty image set"));
    }
    let (mu_a, cov_a) = gaussian_fit(set_a);
    let (mu_b, cov_b) = gaussian_fit(set_b);
    let dmu = (&mu_a - &mu_b).norm_squared();
    let cross =
        0.5 * (frechet_cross_term(&cov_a, &cov_b) + frechet_cross_term(&cov_b, &cov_a));
    Ok((dmu + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// One site's generated images, already partitioned.
#[derive(Clone, Debug)]
pub struct SiteDataset {
    pub spec: SiteSpec,
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

/// Generates `n_train + n_val + n_test` phantoms and partitions them with
/// a seeded permutation split.
pub fn gen_site_dataset(
    spec: &SiteSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    h: usize,
    w: usize,
) -> Result<SiteDataset> {
    let n = n_train + n_val + n_test;
    let all = gen_site_phantoms(spec, n, h, w);
    let f_train = n_train as f64 / n as f64;
    let f_val = n_val as f64 / n as f64;
    let split = make_split(n, (f_train, f_val, 1.0 - f_train - f_val), spec.seed ^ 0x5eed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect();
    Ok(SiteDataset {
        spec: spec.clone(),
        train: pick(&split.train),
        val: pick(&split.val),
        test: pick(&split.test),
    })
}

#[derive(Serialize, Deserialize)]
pub struct SiteManifest {
    pub spec: SiteSpec,
    pub h: usize,
    pub w: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

pub fn save_site_dataset(ds: &SiteDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (name, images) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(sub.display().to_string(), e))?;
        for (i, img) in images.iter().enumerate() {
            persistence::save_tensor(img, sub.join(format!("img_{i}.fvt")))?;
        }
    }
    let (h, w) = (ds.train[0].dims()[0], ds.train[0].dims()[1]);
    let manifest = SiteManifest {
        spec: ds.spec.clone(),
        h,
        w,
        n_train: ds.train.len(),
        n_val: ds.val.len(),
        n_test: ds.test.len(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialize: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_site_dataset(dir: impl AsRef<Path>) -> Result<SiteDataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: SiteManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::format(0, format!("manifest parse: {e}")))?;
    let load = |name: &str, n: usize| -> Result<Vec<Tensor>> {
        (0..n)
            .map(|i| persistence::load_tensor(dir.join(name).join(format!("img_{i}.fvt"))))
            .collect()
    };
    Ok(SiteDataset {
        spec: manifest.spec,
        train: load("train", manifest.n_train)?,
        val: load("val", manifest.n_val)?,
        test: load("test", manifest.n_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(base: f64, seed: u64) -> SiteSpec {
        SiteSpec {
            site: 0,
            ellipse_count_min: 3,
            ellipse_count_max: 7,
            intensity_base: base,
            texture_freq: 4.0,
            contrast_polarity: 1.0,
            seed,
        }
    }

    #[test]
    fn phantom_deterministic() {
        let s = spec(0.5, 11);
        assert_eq!(gen_phantom(&s, 3, 32, 32), gen_phantom(&s, 3, 32, 32));
        assert_ne!(gen_phantom(&s, 3, 32, 32), gen_phantom(&s, 4, 32, 32));
    }

    #[test]
    fn phantom_magnitude_range_and_mean() {
        for base in [0.3, 0.5, 0.7] {
            let s = spec(base, 21);
            let imgs = gen_site_phantoms(&s, 100, 32, 32);
            let mut total = 0.0;
            for img in &imgs {
                let mag = img.magnitude();
                assert!(mag.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                total += mag.data().iter().sum::<f64>() / mag.data().len() as f64;
            }
            let mean = total / imgs.len() as f64;
            assert!(
                (mean - base).abs() < 0.05,
                "mean magnitude {mean} vs base {base}"
            );
        }
    }

    #[test]
    fn split_sizes_and_union() {
        let s = make_split(10, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(make_split(10, (0.8, 0.1, 0.1), 3).unwrap(), s);
    }

    #[test]
    fn split_bad_fractions() {
        assert!(make_split(10, (0.5, 0.1, 0.1), 3).is_err());
    }

    #[test]
    fn dist_distance_identity_and_symmetry() {
        let a = gen_site_phantoms(&spec(0.3, 31), 16, 32, 32);
        let b = gen_site_phantoms(&spec(0.7, 32), 16, 32, 32);
        assert!(dist_distance(&a, &a).unwrap() < 1e-8);
        let ab = dist_distance(&a, &b).unwrap();
        let ba = dist_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn inter_site_exceeds_intra_site() {
        let sa = spec(0.3, 41);
        let sb = spec(0.7, 42);
        let a1 = gen_site_phantoms(&sa, 24, 32, 32);
        let a2: Vec<Tensor> = (24..48).map(|i| gen_phantom(&sa, i, 32, 32)).collect();
        let b = gen_site_phantoms(&sb, 24, 32, 32);
        let intra = dist_distance(&a1, &a2).unwrap();
        let inter = dist_distance(&a1, &b).unwrap();
        assert!(inter > intra, "inter {inter} vs intra {intra}");
    }

    #[test]
    fn dataset_round_trip() {
        let ds = gen_site_dataset(&spec(0.5, 51), 4, 2, 2, 16, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_site_dataset(&ds, dir.path()).unwrap();
        let back = load_site_dataset(dir.path()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.spec, ds.spec);
    }
}
