//! Two-stage training against the four-way answer cross-entropy.

pub mod gradcheck;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, EvalReport};
use crate::host::SeqInput;
use crate::model::{Model, Stage};
use crate::taskgen::{DatasetSplit, QaItem};
use crate::vocab;

pub use optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_accum: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub patience: usize,
    /// Feed empty scanpaths everywhere (the gaze-free control).
    pub gaze_free: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-2,
            warmup_steps: 20,
            grad_accum: 8,
            max_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            patience: 5,
            gaze_free: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.grad_accum == 0 {
            return Err(Error::Config("need lr > 0 and grad_accum >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Cross-entropy over a `1 x 4` row of answer logits.
pub fn answer_loss(tape: &mut Tape<'_>, answer_logits: Var, correct: usize) -> Result<Var> {
    if tape.shape(answer_logits) != (1, vocab::OPTIONS) {
        return Err(Error::Shape(format!(
            "answer logits of shape {:?}",
            tape.shape(answer_logits)
        )));
    }
    if correct >= vocab::OPTIONS {
        return Err(Error::InputDomain(format!("answer index {correct} outside 0..4")));
    }
    Ok(tape.cross_entropy(answer_logits, correct))
}

/// Loss, prediction and parameter gradients of one item.
pub fn item_gradients(
    model: &Model,
    corpus: &Corpus,
    item: &QaItem,
    gaze_free: bool,
) -> Result<(f64, usize, BTreeMap<String, Mat>)> {
    let frames = corpus.frames(item, gaze_free)?;
    let seq = SeqInput {
        tokens: &item.prompt_tokens,
        frames: &frames,
    };
    let mut tape = Tape::new();
    let logits = model.answer_logits(&mut tape, &model.store, &seq)?;
    let predicted = predict(tape.value(logits).as_slice().expect("row is contiguous"));
    let loss = answer_loss(&mut tape, logits, item.correct)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), predicted, tape.param_grads(&grads)))
}

/// Mean loss, number correct and mean gradients over `items`, summed in
/// item order.
pub fn batch_gradients(
    model: &Model,
    corpus: &Corpus,
    items: &[&QaItem],
    gaze_free: bool,
) -> Result<(f64, usize, BTreeMap<String, Mat>)> {
    if items.is_empty() {
        return Err(Error::EmptySplit("empty batch".into()));
    }
    let mut total: BTreeMap<String, Mat> = BTreeMap::new();
    let (mut loss, mut hits) = (0.0, 0);
    for item in items {
        let (l, p, g) = item_gradients(model, corpus, item, gaze_free)?;
        loss += l;
        hits += usize::from(p == item.correct);
        for (name, g) in g {
            match total.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let n = items.len() as f64;
    for g in total.values_mut() {
        *g /= n;
    }
    Ok((loss / n, hits, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub records: Vec<MetricRecord>,
    pub final_val: EvalReport,
}

fn emit(log: &mut Option<&mut dyn Write>, records: &mut Vec<MetricRecord>, rec: MetricRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(&rec)?;
        writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    records.push(rec);
    Ok(())
}

/// Trains the stage's tensors on the train split with validation after
/// every epoch, early stopping after `patience` epochs without
/// improvement (or at perfect accuracy), and restores the best-validated
/// weights. The untrained state counts as epoch 0.
pub fn run_stage(
    model: &mut Model,
    corpus: &Corpus,
    split: &DatasetSplit,
    stage: Stage,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<StageReport> {
    cfg.validate()?;
    let mut train = corpus.items_of(&split.train);
    let val = corpus.items_of(&split.val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    model.set_stage(stage);
    let mut opt = AdamW::new(cfg.adamw(), &model.store);
    let mut records = Vec::new();
    let s = stage as u8;

    let report = evaluate(model, corpus, &val, cfg.gaze_free)?;
    let mut best = (report.mean_accuracy, 0usize, snapshot(model), report);
    emit(
        &mut log,
        &mut records,
        MetricRecord {
            stage: s,
            step: 0,
            epoch: 0,
            split: "val".into(),
            loss: best.3.mean_loss,
            accuracy: Some(best.0),
            lr: 0.0,
        },
    )?;

    let mut stale = 0;
    let mut epochs_run = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.max_epochs {
        if best.0 >= 1.0 || stale >= cfg.patience {
            break;
        }
        epochs_run = epoch;
        train.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in train.chunks(cfg.grad_accum) {
            let (loss, h, grads) = batch_gradients(model, corpus, batch, cfg.gaze_free)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(opt.step + 1));
            }
            lr = opt.update(&mut model.store, &grads)?;
            loss_sum += loss * batch.len() as f64;
            hits += h;
            emit(
                &mut log,
                &mut records,
                MetricRecord {
                    stage: s,
                    step: opt.step,
                    epoch,
                    split: "train_step".into(),
                    loss,
                    accuracy: None,
                    lr,
                },
            )?;
        }
        let n = train.len() as f64;
        emit(
            &mut log,
            &mut records,
            MetricRecord {
                stage: s,
                step: opt.step,
                epoch,
                split: "train".into(),
                loss: loss_sum / n,
                accuracy: Some(hits as f64 / n),
                lr,
            },
        )?;
        let report = evaluate(model, corpus, &val, cfg.gaze_free)?;
        emit(
            &mut log,
            &mut records,
            MetricRecord {
                stage: s,
                step: opt.step,
                epoch,
                split: "val".into(),
                loss: report.mean_loss,
                accuracy: Some(report.mean_accuracy),
                lr,
            },
        )?;
        if report.mean_accuracy > best.0 {
            best = (report.mean_accuracy, epoch, snapshot(model), report);
            stale = 0;
        } else {
            stale += 1;
        }
    }
    for (name, value) in best.2 {
        *model.store.get_mut(&name)? = value;
    }
    Ok(StageReport {
        best_val_accuracy: best.0,
        best_epoch: best.1,
        epochs_run,
        steps: opt.step,
        records,
        final_val: best.3,
    })
}

fn snapshot(model: &Model) -> Vec<(String, Mat)> {
    model
        .store
        .iter()
        .filter(|(_, t)| t.trainable)
        .map(|(n, t)| (n.to_string(), t.value.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use crate::host::ResamplerSharing;
    use crate::model::ModelConfig;
    use crate::scanpath::GazeScheme;
    use crate::synthvideo::FeatureMode;
    use crate::taskgen::{gen_dataset, split_by_video, DatasetConfig, TaskMix};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn corpus() -> &'static Corpus {
        static C: OnceLock<Corpus> = OnceLock::new();
        C.get_or_init(|| {
            let cfg = DatasetConfig {
                seed: 2,
                n_videos: 7,
                items_per_video: 6,
                mix: TaskMix::uniform(),
                ..DatasetConfig::default()
            };
            let d = gen_dataset(&cfg, 16, 64).unwrap();
            let spec = FeatureSpec {
                d_v: 32,
                grid_h: 4,
                grid_w: 4,
                mode: FeatureMode::Temporal,
                seed: 2,
            };
            Corpus::build(d, spec).unwrap()
        })
    }

    fn model() -> Model {
        Model::new(ModelConfig::new(GazeScheme::CoordPe, ResamplerSharing::PerLayer), 4).unwrap()
    }

    #[test]
    fn answer_loss_checks_inputs() {
        let mut t = Tape::new();
        let l = t.constant(Mat::zeros((1, 4)));
        let loss = answer_loss(&mut t, l, 1).unwrap();
        assert!((t.scalar(loss) - 4f64.ln()).abs() < 1e-15);
        assert!(answer_loss(&mut t, l, 4).is_err());
        let wide = t.constant(Mat::zeros((1, 5)));
        assert!(answer_loss(&mut t, wide, 0).is_err());
    }

    #[test]
    fn frozen_tensors_get_no_gradient() {
        let m = model();
        let c = corpus();
        let (_, _, g) = item_gradients(&m, c, &c.dataset.items[0], false).unwrap();
        assert!(!g.is_empty());
        assert!(g.keys().all(|n| Stage::One.trains(n)));
        assert!(g.keys().any(|n| n.ends_with("w_out")));
    }

    fn summed_step(m: &Model, items: &[&QaItem]) -> BTreeMap<String, Mat> {
        let c = corpus();
        let frames: Vec<_> = items.iter().map(|i| c.frames(i, false).unwrap()).collect();
        let mut tape = Tape::new();
        let mut losses = Vec::new();
        for (item, f) in items.iter().zip(&frames) {
            let seq = SeqInput {
                tokens: &item.prompt_tokens,
                frames: f,
            };
            let logits = m.answer_logits(&mut tape, &m.store, &seq).unwrap();
            losses.push(answer_loss(&mut tape, logits, item.correct).unwrap());
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        let mean = tape.scale(total, 1.0 / items.len() as f64);
        let g = tape.backward(mean);
        tape.param_grads(&g)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]
        #[test]
        fn accumulation_matches_one_summed_step(start in 0usize..30, seed in 0u64..100) {
            let c = corpus();
            let items: Vec<&QaItem> = c.dataset.items.iter().cycle().skip(start).step_by(1 + seed as usize % 3).take(8).collect();
            let mut a = Model::new(ModelConfig::new(GazeScheme::CoordPe, ResamplerSharing::PerLayer), seed).unwrap();
            for (n, t) in a.store.clone().iter() {
                if n.ends_with("w_out") {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    *a.store.get_mut(n).unwrap() = crate::params::normal(&mut rng, t.value.nrows(), t.value.ncols(), 0.05);
                }
            }
            let mut b = a.clone();
            let (_, _, ga) = batch_gradients(&a, c, &items, false).unwrap();
            let gb = summed_step(&b, &items);
            let mut oa = AdamW::new(AdamWConfig::default(), &a.store);
            let mut ob = AdamW::new(AdamWConfig::default(), &b.store);
            oa.update(&mut a.store, &ga).unwrap();
            ob.update(&mut b.store, &gb).unwrap();
            for (n, t) in a.store.iter() {
                let other = b.store.get(n).unwrap();
                let err = t.value.iter().zip(other.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                prop_assert!(err < 1e-10, "{} differs by {}", n, err);
            }
        }
    }

    #[test]
    fn stage_one_keeps_host_and_adapters_fixed_and_is_deterministic() {
        let c = corpus();
        let split = split_by_video(&c.dataset.items, [0.7, 0.15, 0.15], 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let mut m = model();
        let frozen = |n: &str| n.starts_with("host.") || n.starts_with("lora.");
        let before = m.store.checksum(frozen);
        let mut log_a = Vec::new();
        let r = run_stage(&mut m, c, &split, Stage::One, &cfg, Some(&mut log_a)).unwrap();
        assert_eq!(before, m.store.checksum(frozen));
        assert!(r.steps > 0);
        assert_eq!(r.records.iter().filter(|x| x.split == "val").count(), r.epochs_run + 1);

        let mut m2 = model();
        let mut log_b = Vec::new();
        run_stage(&mut m2, c, &split, Stage::One, &cfg, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(m.store.checksum(|_| true), m2.store.checksum(|_| true));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let c = corpus();
        let split = DatasetSplit {
            train: vec![],
            val: vec!["vid0000".into()],
            test: vec![],
        };
        let mut m = model();
        assert!(matches!(
            run_stage(&mut m, c, &split, Stage::One, &TrainConfig::default(), None),
            Err(Error::EmptySplit(_))
        ));
    }
}
