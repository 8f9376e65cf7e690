use crate::error::Result;
use crate::numerics::paramset::ParamSet;
use crate::numerics::tensor::Tensor;

/// AdamW hyperparameters. Defaults follow the training setup used
/// throughout: β₁ = 0.9, β₂ = 0.95, weight decay 0.05, lr = 1e-4.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { lr: 1e-4, beta1: 0.9, beta2: 0.95, weight_decay: 0.05, eps: 1e-8 }
    }
}

/// First/second moment state, one pair per parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(p, t)| (p.clone(), Tensor::zeros(t.dims())))
            .collect();
        AdamWState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update, in place.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    params.ensure_compatible(grads)?;
    params.ensure_compatible(&state.m)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for ((path, p), (gp, g)) in params.iter_mut().zip(grads.iter()) {
        debug_assert_eq!(path, gp);
        let m = state.m.get_mut(path).unwrap();
        let v = state.v.get_mut(path).unwrap();
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gd[i];
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= hyper.lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * pd[i]);
        }
    }
    Ok(())
}
