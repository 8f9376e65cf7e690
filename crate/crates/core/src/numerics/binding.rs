use std::collections::BTreeMap;

use crate::numerics::paramset::ParamSet;
use crate::numerics::tape::{GradStore, Tape, Var};

/// ParamSet loaded onto a tape, one Var per path.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Load every parameter as a trainable leaf (or as constants).
    pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(path, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (path.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    pub fn var(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("no bound parameter at path {path}"))
    }

    /// Gradients for every bound path, zero where the leaf is off-path.
    pub fn grads(&self, store: &GradStore, params: &ParamSet) -> ParamSet {
        params
            .iter()
            .map(|(path, t)| {
                let g = store.get_or_zeros(self.var(path), t);
                (path.clone(), g)
            })
            .collect()
    }
}
