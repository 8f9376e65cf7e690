use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Named parameter collection. BTreeMap gives the lexicographic iteration
/// order the serialization format and aggregation rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.entries.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn shape_compatible(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((pa, ta), (pb, tb))| {
                pa == pb && ta.dims() == tb.dims() && ta.is_complex() == tb.is_complex()
            })
    }

    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.shape_compatible(other) {
            Ok(())
        } else {
            Err(Error::shape("ParamSets are not shape-compatible"))
        }
    }

    /// Flatten all values into one vector, lexicographic path order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of `flatten` against this set's own shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        let mut out = self.clone();
        let mut off = 0;
        for t in out.entries.values_mut() {
            let n = t.data().len();
            if off + n > flat.len() {
                return Err(Error::shape("unflatten: vector too short"));
            }
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        if off != flat.len() {
            return Err(Error::shape("unflatten: vector too long"));
        }
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.data().len()).sum()
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (p, t) in self.iter() {
            t.check_finite(&format!("{ctx}:{p}"))?;
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        p.insert("a", Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]); // "a" before "b"
        let q = p.unflatten(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn compatibility() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let mut q = ParamSet::new();
        q.insert("w", Tensor::zeros(&[2, 2]));
        assert!(p.shape_compatible(&q));
        q.insert("extra", Tensor::zeros(&[1]));
        assert!(!p.shape_compatible(&q));
    }
}
