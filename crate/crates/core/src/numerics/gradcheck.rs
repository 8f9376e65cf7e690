//! Finite-difference gradient verification used by unit and acceptance
//! tests. Lives in the library so every crate's tests share one oracle.

use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Builds a scalar loss from leaves and compares analytic gradients against
/// central finite differences. Returns the max relative error over all
/// entries of all inputs.
pub fn max_relative_error<F>(build: F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |points: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).expect("backward failed in gradcheck");
        let gs = vars
            .iter()
            .zip(points)
            .map(|(v, t)| grads.get_or_zeros(*v, t))
            .collect();
        (tape.value(loss).item(), gs)
    };

    let (_, analytic) = eval(inputs);
    let mut max_err = 0.0f64;
    for (idx, t) in inputs.iter().enumerate() {
        for i in 0..t.data().len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[i] -= h;
            let (lp, _) = eval(&plus);
            let (lm, _) = eval(&minus);
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[idx].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    max_err
}

/// Deterministic pseudo-random tensor for gradient-check points.
pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradcheck() {
        let a = random_tensor(&[3, 4], 1);
        let b = random_tensor(&[4, 2], 2);
        let err = max_relative_error(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1]).unwrap();
                let sq = tape.mul(c, c).unwrap();
                tape.sum_all(sq)
            },
            &[a, b],
            1e-5,
        );
        assert!(err < 1e-6, "matmul gradient error {err}");
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let l = random_tensor(&[3, 5], 3);
        let err = max_relative_error(
            |tape, vars| tape.cross_entropy(vars[0], &[0, 3, 2]).unwrap(),
            &[l],
            1e-5,
        );
        assert!(err < 1e-6, "cross_entropy gradient error {err}");
    }

    #[test]
    fn row_norm_gradcheck() {
        let x = random_tensor(&[2, 6], 4);
        let w = random_tensor(&[2, 6], 5);
        let err = max_relative_error(
            |tape, vars| {
                let n = tape.row_norm(vars[0], 1e-5);
                let p = tape.mul(n, vars[1]).unwrap();
                tape.sum_all(p)
            },
            &[x, w],
            1e-5,
        );
        assert!(err < 1e-6, "row_norm gradient error {err}");
    }
}
