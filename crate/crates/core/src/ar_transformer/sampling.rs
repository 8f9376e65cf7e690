//! Token decoding rules over a single logits row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Nucleus sampling: keep the top ⌈q·V⌉ logits, softmax over the kept set,
/// draw one. Ties in the logit sort break toward the smaller index, as
/// does the argmax in `greedy_pick`.
pub fn sample_nucleus(logits: &[f64], q: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if !(0.0 < q && q <= 1.0) {
        return Err(Error::config("nucleus keep fraction must be in (0,1]"));
    }
    if logits.is_empty() {
        return Err(Error::shape("empty logits row"));
    }
    let v = logits.len();
    let keep = ((q * v as f64).ceil() as usize).clamp(1, v);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    order.truncate(keep);
    let max = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (slot, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(order[slot]);
        }
        u -= w;
    }
    Ok(*order.last().unwrap())
}

/// Deterministic argmax decoding.
pub fn greedy_pick(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn keep_count_arithmetic() {
        // ⌈0.05·4096⌉ = 205
        assert_eq!((0.05f64 * 4096.0).ceil() as usize, 205);
    }

    #[test]
    fn dominant_logit_dominates() {
        let mut logits = vec![0.0; 64];
        logits[17] = 1e6;
        let mut rng = seeded_rng(5);
        let hits = (0..10_000)
            .filter(|_| sample_nucleus(&logits, 0.5, &mut rng).unwrap() == 17)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn uniform_logits_full_keep_is_uniform() {
        // χ² goodness-of-fit against uniform over 16 bins
        let logits = vec![0.0; 16];
        let mut rng = seeded_rng(6);
        let n = 16_000usize;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            counts[sample_nucleus(&logits, 1.0, &mut rng).unwrap()] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 15 dof, 99.9th percentile ≈ 37.7
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn keep_one_is_greedy() {
        let logits = vec![0.3, 1.7, -0.2, 1.1];
        let mut rng = seeded_rng(7);
        for _ in 0..32 {
            // keep fraction 0.05 of 4 logits → ⌈0.2⌉ = 1 candidate
            let t = sample_nucleus(&logits, 0.05, &mut rng).unwrap();
            assert_eq!(t, greedy_pick(&logits));
        }
    }

    #[test]
    fn deterministic_given_rng_state() {
        let logits: Vec<f64> = (0..32).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let a: Vec<usize> = {
            let mut rng = seeded_rng(8);
            (0..20).map(|_| sample_nucleus(&logits, 0.25, &mut rng).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut rng = seeded_rng(8);
            (0..20).map(|_| sample_nucleus(&logits, 0.25, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }
}
