//! Multiple-choice evaluation: one forward per item, argmax over the four
//! answer letters at the last position.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::host::SeqInput;
use crate::model::Model;
use crate::taskgen::{QaItem, TaskKind};
use crate::vocab;

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(logits)[target]`.
pub fn answer_loss_value(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InputDomain(format!(
            "answer index {target} outside 0..{}",
            logits.len()
        )));
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    Ok(lse - logits[target])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub task_kind: TaskKind,
    pub correct: usize,
    pub predicted: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
}

impl TaskScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<TaskKind, TaskScore>,
    /// Unweighted mean of the per-task accuracies.
    pub mean_accuracy: f64,
    pub mean_loss: f64,
    pub items: usize,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[ItemOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::EmptySplit("nothing to evaluate".into()));
        }
        let mut per_task: BTreeMap<TaskKind, TaskScore> = BTreeMap::new();
        let mut loss = 0.0;
        for o in outcomes {
            let s = per_task.entry(o.task_kind).or_default();
            s.total += 1;
            s.correct += usize::from(o.predicted == o.correct);
            loss += o.loss;
        }
        let mean_accuracy = per_task.values().map(TaskScore::accuracy).sum::<f64>() / per_task.len() as f64;
        Ok(EvalReport {
            per_task,
            mean_accuracy,
            mean_loss: loss / outcomes.len() as f64,
            items: outcomes.len(),
        })
    }

    pub fn accuracy(&self, kind: TaskKind) -> Option<f64> {
        self.per_task.get(&kind).map(TaskScore::accuracy)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8}\n", "task", "items", "acc");
        for (k, s) in &self.per_task {
            out += &format!("{:<16} {:>8} {:>7.2}%\n", k.name(), s.total, 100.0 * s.accuracy());
        }
        out += &format!(
            "{:<16} {:>8} {:>7.2}%\n",
            "mean",
            self.items,
            100.0 * self.mean_accuracy
        );
        out
    }
}

pub fn evaluate_item(model: &Model, corpus: &Corpus, item: &QaItem, gaze_free: bool) -> Result<ItemOutcome> {
    if item.correct >= vocab::OPTIONS {
        return Err(Error::InputDomain(format!(
            "answer index {} outside 0..4",
            item.correct
        )));
    }
    let frames = corpus.frames(item, gaze_free)?;
    let seq = SeqInput {
        tokens: &item.prompt_tokens,
        frames: &frames,
    };
    let logits = model.predict_logits(&seq)?;
    Ok(ItemOutcome {
        task_kind: item.task_kind,
        correct: item.correct,
        predicted: predict(&logits),
        loss: answer_loss_value(&logits, item.correct)?,
    })
}

/// Evaluates every item independently (batch size 1), in parallel.
pub fn evaluate(model: &Model, corpus: &Corpus, items: &[&QaItem], gaze_free: bool) -> Result<EvalReport> {
    let outcomes = items
        .par_iter()
        .map(|item| evaluate_item(model, corpus, item, gaze_free))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_outcomes(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_with_low_tie_break() {
        assert_eq!(predict(&[0.1, 0.9, 0.3, 0.2]), 1);
        assert_eq!(predict(&[0.5, 0.1, 0.5, 0.2]), 0);
        assert_eq!(predict(&[0.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn loss_examples() {
        assert!((answer_loss_value(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let want = (std::f64::consts::E + 3.0).ln() - 1.0;
        assert!((answer_loss_value(&[1.0, 0.0, 0.0, 0.0], 0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.7437).abs() < 1e-4);
        assert!(answer_loss_value(&[1e6, 0.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert!(answer_loss_value(&[0.0; 4], 4).is_err());
    }

    #[test]
    fn report_is_order_invariant() {
        let mk = |k, c, p| ItemOutcome {
            task_kind: k,
            correct: c,
            predicted: p,
            loss: 0.5,
        };
        let mut v = vec![
            mk(TaskKind::OiHard, 0, 0),
            mk(TaskKind::OiHard, 1, 2),
            mk(TaskKind::Nfi, 3, 3),
            mk(TaskKind::OiHard, 2, 2),
        ];
        let a = EvalReport::from_outcomes(&v).unwrap();
        v.reverse();
        assert_eq!(a, EvalReport::from_outcomes(&v).unwrap());
        assert!((a.accuracy(TaskKind::OiHard).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.mean_accuracy - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(EvalReport::from_outcomes(&[]).is_err());
    }
}
