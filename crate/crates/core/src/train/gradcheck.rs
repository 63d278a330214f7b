//! Central finite differences against the analytic gradients of the
//! answer loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::answer_loss;
use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::host::{FrameInput, SeqInput};
use crate::model::Model;
use crate::params::{normal, ParamStore};
use crate::resampler::Gaze;
use crate::scanpath::{Fixation, Scanpath};
use crate::taskgen::TaskKind;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub max_coords: usize,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            max_coords: 32,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub class: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: (usize, usize),
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    /// Fails on the worst tensor above tolerance.
    pub fn check(&self) -> Result<()> {
        match self.worst() {
            Some(t) if t.max_rel_err >= self.tolerance => Err(Error::GradCheck {
                tensor: t.name.clone(),
                coord: t.worst,
                rel_err: t.max_rel_err,
                tolerance: self.tolerance,
            }),
            _ => Ok(()),
        }
    }

    /// Largest error per tensor class.
    pub fn by_class(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for t in &self.tensors {
            match out.iter_mut().find(|(c, _)| *c == t.class) {
                Some(e) => e.1 = e.1.max(t.max_rel_err),
                None => out.push((t.class, t.max_rel_err)),
            }
        }
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

pub fn tensor_class(name: &str) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("inject.alpha.") {
        "alpha"
    } else if name.starts_with("lora.") {
        if leaf == "A" {
            "lora_a"
        } else {
            "lora_b"
        }
    } else if leaf == "latents" {
        "latents"
    } else if leaf.starts_with("w_") {
        "resampler_matrix"
    } else {
        "resampler_vector"
    }
}

fn loss_at(model: &Model, store: &ParamStore, seq: &SeqInput<'_>, correct: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.answer_logits(&mut tape, store, seq)?;
    let loss = answer_loss(&mut tape, logits, correct)?;
    Ok(tape.scalar(loss))
}

/// Compares analytic and central-difference gradients on up to
/// `max_coords` random coordinates of every trainable tensor.
pub fn grad_check(model: &Model, seq: &SeqInput<'_>, correct: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new();
        let logits = model.answer_logits(&mut tape, &model.store, seq)?;
        let loss = answer_loss(&mut tape, logits, correct)?;
        let g = tape.backward(loss);
        tape.param_grads(&g)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.store.clone();
    let mut tensors = Vec::new();
    for name in model.store.trainable_names() {
        let value = model.store.get(&name)?.clone();
        let (rows, cols) = value.dim();
        let zeros = Mat::zeros((rows, cols));
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let n = rows * cols;
        let picks = sample(&mut rng, n, n.min(cfg.max_coords));
        let mut check = TensorCheck {
            class: tensor_class(&name),
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst: (0, 0),
            max_abs_grad: 0.0,
        };
        for flat in picks.iter() {
            let (r, c) = (flat / cols, flat % cols);
            let orig = value[[r, c]];
            store.get_mut(&name)?[[r, c]] = orig + cfg.h;
            let up = loss_at(model, &store, seq, correct)?;
            store.get_mut(&name)?[[r, c]] = orig - cfg.h;
            let down = loss_at(model, &store, seq, correct)?;
            store.get_mut(&name)?[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = grad[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = (r, c);
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}

/// Replaces zero-initialised output projections and adapter up-projections
/// with small random values so every path carries gradient.
pub fn randomize_zero_init(store: &mut ParamStore, std: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".w_out") || (n.starts_with("lora.") && n.ends_with(".B")))
        .map(str::to_string)
        .collect();
    for name in names {
        let (r, c) = store.get(&name)?.dim();
        *store.get_mut(&name)? = normal(&mut rng, r, c, std);
    }
    Ok(())
}

/// A random clip sized for a model's configuration, for gradient checks.
#[derive(Clone, Debug)]
pub struct Probe {
    pub tokens: Vec<u32>,
    pub features: Vec<Mat>,
    pub path: Scanpath,
    pub frame_times: Vec<f64>,
    pub correct: usize,
}

impl Probe {
    pub fn random(model: &Model, frames: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rc = &model.cfg.resampler;
        let hw = rc.tokens();
        let mut tokens = vec![vocab::VIS; frames * hw];
        tokens.push(TaskKind::Nfi.token());
        tokens.push(vocab::BUCKET_BASE + rng.random_range(0..vocab::BUCKETS));
        for i in 0..vocab::OPTIONS {
            tokens.push(vocab::object_token(i * 4 + rng.random_range(0..4)));
        }
        tokens.push(vocab::CUE);
        let features = (0..frames).map(|_| normal(&mut rng, hw, rc.d_v, 1.0)).collect();
        let frame_times: Vec<f64> = (0..frames).map(|f| f as f64 * 0.5).collect();
        let fixations = frame_times
            .iter()
            .map(|&t| Fixation::new(rng.random::<f64>(), rng.random::<f64>(), t + 0.1, 0.3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Probe {
            tokens,
            features,
            path: Scanpath::new(fixations)?,
            frame_times,
            correct: rng.random_range(0..vocab::OPTIONS),
        })
    }

    pub fn frames(&self) -> Vec<FrameInput<'_>> {
        self.features
            .iter()
            .zip(&self.frame_times)
            .map(|(features, &t)| FrameInput {
                features,
                gaze: Gaze::Scanpath {
                    path: &self.path,
                    frame_time: t + 0.15,
                },
            })
            .collect()
    }
}
