use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{FateError, Result};

/// Gradients keyed by parameter name. Frozen parameters never appear.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Named parameters in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<F>> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| FateError::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| FateError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    /// Marks exactly the parameters whose names satisfy `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, p) in self.entries.iter_mut() {
            p.trainable = pred(k);
        }
    }

    /// Moves every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore<F>) {
        self.entries.extend(other.entries);
    }

    /// Copies the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// SHA-256 over names, shapes, and raw values of entries whose names
    /// start with `prefix` (empty prefix hashes everything).
    pub fn content_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_values_and_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::zeros(&[2, 2]), false);
        s.insert("b.w", Tensor::zeros(&[2]), true);
        let ha = s.content_hash("a.");
        let all = s.content_hash("");
        s.get_mut("b.w").unwrap().tensor.data_mut()[0] = 1.0;
        assert_eq!(ha, s.content_hash("a."));
        assert_ne!(all, s.content_hash(""));
    }

    #[test]
    fn trainable_filtering() {
        let mut s = ParamStore::<f64>::new();
        s.insert("dp", Tensor::zeros(&[1]), true);
        s.insert("vit.x", Tensor::zeros(&[1]), true);
        s.set_trainable_where(|n| n == "dp");
        assert_eq!(s.trainable_names(), vec!["dp".to_string()]);
    }
}
