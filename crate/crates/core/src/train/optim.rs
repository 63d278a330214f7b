//! AdamW with linear warmup and decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::Zip;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 1e-2,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    /// `lr * min(1, step / warmup)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Moment estimates for every trainable tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Mat> = store
            .iter()
            .filter(|(_, t)| t.trainable)
            .map(|(n, t)| (n.to_string(), Mat::zeros(t.value.raw_dim())))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Mat, &Mat)> {
        self.m.iter().map(|(n, m)| (n.as_str(), m, &self.v[n]))
    }

    /// One update. Tensors without an entry in `grads` see a zero
    /// gradient. Nothing is modified when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) -> Result<f64> {
        for (name, g) in grads {
            if !self.m.contains_key(name) {
                return Err(Error::Config(format!("gradient for untracked tensor `{name}`")));
            }
            if g.dim() != store.get(name)?.dim() {
                return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}", g.dim())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.cfg.lr_at(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (name, m) in &mut self.m {
            let v = self.v.get_mut(name).expect("moments share keys");
            let tensor = store.tensor(name)?;
            let decay = tensor.decay;
            let p = store.get_mut(name)?;
            let zeros;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zeros = Mat::zeros(p.raw_dim());
                    &zeros
                }
            };
            let (lr, wd, eps) = (lr, self.cfg.weight_decay, self.cfg.eps);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decay {
                    *p -= lr * wd * *p;
                }
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Mat::from_elem((1, 1), value), decay);
        s.set_trainable(|_| true);
        s
    }

    #[test]
    fn warmup_schedule() {
        let c = AdamWConfig::default();
        assert!((c.lr_at(10) - 1.5e-4).abs() < 1e-18);
        assert_eq!(c.lr_at(20), 3e-4);
        assert_eq!(c.lr_at(500), 3e-4);
        let lrs: Vec<f64> = (1..=40).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut s = one(1.0, false);
        let mut opt = AdamW::new(cfg, &s);
        let g = BTreeMap::from([("w".to_string(), Mat::from_elem((1, 1), 1.0))]);
        opt.update(&mut s, &g).unwrap();
        let want = 1.0 - 3e-4 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap()[[0, 0]] - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_is_independent_of_gradient() {
        let cfg = AdamWConfig {
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut with = one(2.0, true);
        let mut without = one(2.0, false);
        let g = BTreeMap::from([("w".to_string(), Mat::from_elem((1, 1), 0.0))]);
        AdamW::new(cfg, &with).update(&mut with, &g).unwrap();
        AdamW::new(cfg, &without).update(&mut without, &g).unwrap();
        let diff = without.get("w").unwrap()[[0, 0]] - with.get("w").unwrap()[[0, 0]];
        assert!((diff - 3e-4 * 1e-2 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_changes_nothing() {
        let mut s = one(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let g = BTreeMap::from([("w".to_string(), Mat::from_elem((1, 1), f64::NAN))]);
        match opt.update(&mut s, &g) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
        assert_eq!(s.get("w").unwrap()[[0, 0]], 1.0);
    }
}
