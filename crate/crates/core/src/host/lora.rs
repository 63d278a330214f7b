//! Low-rank adapters on the query and value projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layer_param, HostConfig};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d_model {
            return Err(Error::Config(format!(
                "LoRA rank {} must lie in 1..{d_model}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// `[A, B]` tensor names of the adapter on projection `which` (`q` or `v`).
pub fn lora_names(layer: usize, which: &str) -> [String; 2] {
    [format!("lora.{layer}.{which}.A"), format!("lora.{layer}.{which}.B")]
}

/// Adds adapters to every layer: `A` (`d x r`) random, `B` (`r x d`) zero.
pub fn init_lora(store: &mut ParamStore, host: &HostConfig, cfg: &LoraConfig, seed: u64) -> Result<()> {
    cfg.validate(host.d_model)?;
    let d = host.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..host.n_layers {
        for which in ["q", "v"] {
            let [a, b] = lora_names(l, which);
            store.insert(a, uniform(&mut rng, d, cfg.rank, 1.0 / (d as f64).sqrt()), true);
            store.insert(b, Mat::zeros((cfg.rank, d)), true);
        }
    }
    Ok(())
}

/// Copy of `store` with `W + scaling·A·B` written into the adapted
/// projections and the adapter tensors dropped.
pub fn merge_lora(store: &ParamStore, host: &HostConfig, cfg: &LoraConfig) -> Result<ParamStore> {
    cfg.validate(host.d_model)?;
    let mut out = store.clone();
    for l in 0..host.n_layers {
        for which in ["q", "v"] {
            let [a, b] = lora_names(l, which);
            let delta = store.get(&a)?.dot(store.get(&b)?) * cfg.scaling();
            *out.get_mut(&layer_param(l, &format!("w_{which}")))? += &delta;
            out.remove(&a);
            out.remove(&b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{build_host, Host, SeqInput};
    use super::*;
    use crate::params::normal;
    use crate::vocab;

    #[test]
    fn scaling_and_rank_limits() {
        assert_eq!(LoraConfig::default().scaling(), 2.0);
        let mut s = ParamStore::new();
        let bad = LoraConfig { rank: 64, alpha: 16.0 };
        assert!(matches!(
            init_lora(&mut s, &HostConfig::default(), &bad, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_at_init_and_merge_equivalence() {
        let cfg = HostConfig::default();
        let lcfg = LoraConfig::default();
        let mut s = ParamStore::new();
        build_host(&cfg, 1, &mut s).unwrap();
        init_lora(&mut s, &cfg, &lcfg, 2).unwrap();
        let plain = Host::new(cfg.clone()).unwrap();
        let mut adapted = plain.clone();
        adapted.lora = Some(lcfg);

        let tokens: Vec<u32> = (0..20).map(|i| vocab::OBJECT_BASE + (i % 16)).collect();
        let seq = SeqInput {
            tokens: &tokens,
            frames: &[],
        };
        assert_eq!(
            plain.last_logits(&s, &seq).unwrap(),
            adapted.last_logits(&s, &seq).unwrap()
        );

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in 0..cfg.n_layers {
            for which in ["q", "v"] {
                let [_, b] = lora_names(l, which);
                *s.get_mut(&b).unwrap() = normal(&mut rng, 8, 64, 0.1);
            }
        }
        let merged = merge_lora(&s, &cfg, &lcfg).unwrap();
        assert!(!merged.contains("lora.0.q.A"));
        for trial in 0..10u32 {
            let tokens: Vec<u32> = (0..25).map(|i| 2 + (i * 7 + trial * 3) % 62).collect();
            let seq = SeqInput {
                tokens: &tokens,
                frames: &[],
            };
            let a = adapted.last_logits(&s, &seq).unwrap();
            let b = plain.last_logits(&merged, &seq).unwrap();
            let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(err < 1e-6, "trial {trial}: {err}");
            assert_ne!(a, plain.last_logits(&s, &seq).unwrap());
        }
    }
}
