//! Named tensor storage shared by the host, the resamplers and the adapters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub value: Mat,
    pub trainable: bool,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a frozen tensor, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat, decay: bool) {
        self.tensors.insert(
            name.into(),
            Tensor {
                value,
                trainable: false,
                decay,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensor(name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.tensors
            .get_mut(name)
            .map(|t| &mut t.value)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Registers `name` on the tape as a borrowed leaf.
    pub fn leaf<'a>(&'a self, tape: &mut Tape<'a>, name: &str) -> Result<Var> {
        let t = self.tensor(name)?;
        Ok(tape.param(name, &t.value, t.trainable))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Marks every tensor trainable iff `pred(name)` holds.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.tensors {
            t.trainable = pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_elements(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, t)| t.value.len())
            .sum()
    }

    /// SHA-256 over the names, shapes and little-endian values of every
    /// tensor selected by `pred`.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| pred(k)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            let (r, c) = t.value.dim();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for v in t.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every tensor of `other` into `self`, keeping existing flags
    /// where the name already exists.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for (name, t) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(mine) => mine.value = t.value.clone(),
                None => {
                    self.tensors.insert(name.clone(), t.clone());
                }
            }
        }
    }
}

/// `rows x cols` matrix with entries uniform in `[-scale, scale]`.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale))
}

/// `rows x cols` matrix with standard normal entries times `std`.
pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_tracks_values_and_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert("a.w", uniform(&mut rng, 2, 3, 1.0), true);
        s.insert("b.w", normal(&mut rng, 3, 2, 1.0), true);
        let all = s.checksum(|_| true);
        let only_a = s.checksum(|n| n.starts_with("a."));
        assert_ne!(all, only_a);
        s.get_mut("b.w").unwrap()[[0, 0]] += 1e-12;
        assert_eq!(only_a, s.checksum(|n| n.starts_with("a.")));
        assert_ne!(all, s.checksum(|_| true));
    }

    #[test]
    fn trainable_flags() {
        let mut s = ParamStore::new();
        s.insert("host.x", Mat::zeros((1, 1)), true);
        s.insert("lora.0.q.A", Mat::zeros((1, 1)), true);
        s.set_trainable(|n| !n.starts_with("host."));
        assert_eq!(s.trainable_names(), vec!["lora.0.q.A".to_string()]);
        assert!(s.get("missing").is_err());
    }
}
