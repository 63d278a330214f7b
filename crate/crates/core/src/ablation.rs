//! Grid sweep over gaze encoding (G), feature backbone (B), resampler
//! sharing (S) and host adaptation (A).
//!
//! Every cell trains from the same dataset with the same budget and is
//! scored on the test split. Per axis the harness reports the option with
//! the best marginal mean accuracy and the spread: on each replicate, the
//! largest gap over tasks between the best and worst option marginals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, FeatureSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::host::ResamplerSharing;
use crate::model::{Model, ModelConfig, ModelScale, Stage};
use crate::scanpath::GazeScheme;
use crate::synthvideo::FeatureMode;
use crate::taskgen::{Dataset, DatasetSplit, TaskKind};
use crate::train::{run_stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    Lora,
    None,
}

impl Adaptation {
    pub const ALL: [Adaptation; 2] = [Adaptation::Lora, Adaptation::None];

    pub fn name(self) -> &'static str {
        match self {
            Adaptation::Lora => "lora",
            Adaptation::None => "none",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Adaptation::Lora => Stage::Two,
            Adaptation::None => Stage::One,
        }
    }
}

impl fmt::Display for Adaptation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Adaptation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Adaptation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adaptation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGridSpec {
    pub schemes: Vec<GazeScheme>,
    pub backbones: Vec<FeatureMode>,
    pub sharing: Vec<ResamplerSharing>,
    pub adaptation: Vec<Adaptation>,
    pub scale: ModelScale,
    pub base_seed: u64,
    pub replicates: usize,
}

impl AblationGridSpec {
    /// The 3 x 2 x 2 x 2 grid.
    pub fn full(base_seed: u64, replicates: usize) -> Self {
        AblationGridSpec {
            schemes: GazeScheme::ALL.to_vec(),
            backbones: FeatureMode::ALL.to_vec(),
            sharing: ResamplerSharing::ALL.to_vec(),
            adaptation: Adaptation::ALL.to_vec(),
            scale: ModelScale::Desk,
            base_seed,
            replicates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("ablation needs at least one replicate".into()));
        }
        Ok(())
    }

    /// Cells in G, B, S, A order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &backbone in &self.backbones {
                for &sharing in &self.sharing {
                    for &adaptation in &self.adaptation {
                        out.push(Cell {
                            scheme,
                            backbone,
                            sharing,
                            adaptation,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.base_seed.wrapping_add(replicate as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub scheme: GazeScheme,
    pub backbone: FeatureMode,
    pub sharing: ResamplerSharing,
    pub adaptation: Adaptation,
}

impl Cell {
    /// Option name on axis `G`, `B`, `S` or `A`.
    pub fn option(&self, axis: Axis) -> &'static str {
        match axis {
            Axis::G => self.scheme.name(),
            Axis::B => self.backbone.name(),
            Axis::S => self.sharing.name(),
            Axis::A => self.adaptation.name(),
        }
    }

    pub fn model_config(&self, scale: ModelScale) -> ModelConfig {
        scale.config(self.scheme, self.sharing)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.scheme, self.backbone, self.sharing, self.adaptation
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    G,
    B,
    S,
    A,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::G, Axis::B, Axis::S, Axis::A];

    fn options(self, spec: &AblationGridSpec) -> Vec<&'static str> {
        match self {
            Axis::G => spec.schemes.iter().map(|s| s.name()).collect(),
            Axis::B => spec.backbones.iter().map(|s| s.name()).collect(),
            Axis::S => spec.sharing.iter().map(|s| s.name()).collect(),
            Axis::A => spec.adaptation.iter().map(|s| s.name()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub replicate: usize,
    pub seed: u64,
    pub manifest_hash: String,
    /// Test accuracy per task; empty when training failed.
    pub accuracy: BTreeMap<TaskKind, f64>,
    pub mean_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub error: Option<String>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: Axis,
    /// Mean test accuracy per option over cells and replicates.
    pub option_accuracy: BTreeMap<String, f64>,
    pub best: Option<String>,
    /// Spread per replicate; `None` when the axis has one option.
    pub spread: Vec<Option<Spread>>,
    pub spread_mean: Option<f64>,
    pub spread_min: Option<f64>,
    pub spread_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub value: f64,
    pub task: TaskKind,
    pub best: String,
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationGridSpec,
    pub results: Vec<CellResult>,
    pub axes: Vec<AxisSummary>,
}

/// Mean test accuracy per (option, task) over the successful cells of one
/// replicate.
pub fn marginals(
    results: &[CellResult],
    replicate: usize,
    axis: Axis,
) -> BTreeMap<&'static str, BTreeMap<TaskKind, f64>> {
    let mut sums: BTreeMap<&'static str, BTreeMap<TaskKind, (f64, usize)>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.replicate == replicate && r.ok()) {
        let per = sums.entry(r.cell.option(axis)).or_default();
        for (&task, &acc) in &r.accuracy {
            let e = per.entry(task).or_insert((0.0, 0));
            e.0 += acc;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(o, per)| (o, per.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()))
        .collect()
}

fn spread(marg: &BTreeMap<&'static str, BTreeMap<TaskKind, f64>>) -> Option<Spread> {
    if marg.len() < 2 {
        return None;
    }
    let tasks: Vec<TaskKind> = marg.values().flat_map(|m| m.keys().copied()).collect();
    let mut out: Option<Spread> = None;
    for task in tasks {
        let vals: Vec<(&str, f64)> = marg
            .iter()
            .filter_map(|(o, m)| m.get(&task).map(|&a| (*o, a)))
            .collect();
        if vals.len() < 2 {
            continue;
        }
        let hi = vals
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let lo = vals
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let value = hi.1 - lo.1;
        if out.as_ref().map_or(true, |s| value > s.value) {
            out = Some(Spread {
                value,
                task,
                best: hi.0.to_string(),
                worst: lo.0.to_string(),
            });
        }
    }
    out
}

pub fn summarize(spec: &AblationGridSpec, results: &[CellResult]) -> Vec<AxisSummary> {
    Axis::ALL
        .iter()
        .map(|&axis| {
            let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for r in results.iter().filter(|r| r.ok()) {
                if let Some(m) = r.mean_accuracy {
                    let e = acc.entry(r.cell.option(axis).to_string()).or_insert((0.0, 0));
                    e.0 += m;
                    e.1 += 1;
                }
            }
            let option_accuracy: BTreeMap<String, f64> = acc.into_iter().map(|(o, (s, n))| (o, s / n as f64)).collect();
            let best = if axis.options(spec).len() < 2 {
                None
            } else {
                option_accuracy
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(o, _)| o.clone())
            };
            let spread: Vec<Option<Spread>> = (0..spec.replicates)
                .map(|rep| spread(&marginals(results, rep, axis)))
                .collect();
            let values: Vec<f64> = spread.iter().flatten().map(|s| s.value).collect();
            let (spread_mean, spread_min, spread_max) = if values.is_empty() {
                (None, None, None)
            } else {
                (
                    Some(values.iter().sum::<f64>() / values.len() as f64),
                    values.iter().copied().reduce(f64::min),
                    values.iter().copied().reduce(f64::max),
                )
            };
            AxisSummary {
                axis,
                option_accuracy,
                best,
                spread,
                spread_mean,
                spread_min,
                spread_max,
            }
        })
        .collect()
}

fn train_cell(
    cell: Cell,
    scale: ModelScale,
    corpus: &Corpus,
    split: &DatasetSplit,
    train: &TrainConfig,
    seed: u64,
) -> Result<(BTreeMap<TaskKind, f64>, f64, f64, usize)> {
    let mut model = Model::new(cell.model_config(scale), seed)?;
    let cfg = TrainConfig { seed, ..train.clone() };
    let report = run_stage(&mut model, corpus, split, cell.adaptation.stage(), &cfg, None)?;
    let test = corpus.items_of(&split.test);
    let eval = evaluate(&model, corpus, &test, false)?;
    let acc = eval.per_task.iter().map(|(&k, s)| (k, s.accuracy())).collect();
    Ok((acc, eval.mean_accuracy, report.best_val_accuracy, report.epochs_run))
}

/// Trains every cell of every replicate in G, B, S, A order. A failing
/// cell is recorded and the sweep continues. `on_result` sees each cell
/// as soon as it finishes.
pub fn run_ablation(
    spec: &AblationGridSpec,
    dataset: &Dataset,
    split: &DatasetSplit,
    manifest_hash: &str,
    train: &TrainConfig,
    mut on_result: impl FnMut(&CellResult),
) -> Result<AblationReport> {
    spec.validate()?;
    let cells = spec.cells();
    let reference = spec.scale.config(GazeScheme::CoordPe, ResamplerSharing::PerLayer);
    let mut corpora = BTreeMap::new();
    for &mode in &spec.backbones {
        let fs = FeatureSpec::for_model(&reference, mode, dataset.cfg.seed);
        corpora.insert(mode.name(), Corpus::build(dataset.clone(), fs)?);
    }
    let mut results = Vec::with_capacity(cells.len() * spec.replicates);
    for replicate in 0..spec.replicates {
        let seed = spec.replicate_seed(replicate);
        for &cell in &cells {
            let corpus = &corpora[cell.backbone.name()];
            let outcome = train_cell(cell, spec.scale, corpus, split, train, seed);
            let result = match outcome {
                Ok((accuracy, mean, val, epochs)) => CellResult {
                    cell,
                    replicate,
                    seed,
                    manifest_hash: manifest_hash.to_string(),
                    accuracy,
                    mean_accuracy: Some(mean),
                    best_val_accuracy: Some(val),
                    epochs_run: epochs,
                    error: None,
                },
                Err(e) => CellResult {
                    cell,
                    replicate,
                    seed,
                    manifest_hash: manifest_hash.to_string(),
                    accuracy: BTreeMap::new(),
                    mean_accuracy: None,
                    best_val_accuracy: None,
                    epochs_run: 0,
                    error: Some(e.to_string()),
                },
            };
            on_result(&result);
            results.push(result);
        }
    }
    Ok(AblationReport {
        spec: spec.clone(),
        axes: summarize(spec, &results),
        results,
    })
}

impl AblationReport {
    /// Line-delimited JSON: one record per cell, then one per axis.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.results {
            out += &serde_json::to_string(r)?;
            out.push('\n');
        }
        for a in &self.axes {
            out += &serde_json::to_string(a)?;
            out.push('\n');
        }
        Ok(out)
    }

    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut out = format!(
            "{:<38} {:>3} {:>7} {:>7} {:>7} {:>7}\n",
            "cell", "rep", "oi_hard", "otp", "nfi", "mean"
        );
        for r in &self.results {
            let task = |k| pct(r.accuracy.get(&k).copied());
            let mean = match &r.error {
                Some(_) => "failed".to_string(),
                None => pct(r.mean_accuracy),
            };
            out += &format!(
                "{:<38} {:>3} {:>7} {:>7} {:>7} {:>7}\n",
                r.cell.to_string(),
                r.replicate,
                task(TaskKind::OiHard),
                task(TaskKind::Otp),
                task(TaskKind::Nfi),
                mean
            );
        }
        out += &format!(
            "\n{:<5} {:<12} {:>8} {:>8} {:>8}\n",
            "axis", "best", "spread", "min", "max"
        );
        for a in &self.axes {
            out += &format!(
                "{:<5} {:<12} {:>8} {:>8} {:>8}\n",
                format!("{:?}", a.axis),
                a.best.as_deref().unwrap_or("n/a"),
                pct(a.spread_mean),
                pct(a.spread_min),
                pct(a.spread_max)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(cell: Cell, replicate: usize, accs: &[(TaskKind, f64)]) -> CellResult {
        let accuracy: BTreeMap<_, _> = accs.iter().copied().collect();
        let mean = accuracy.values().sum::<f64>() / accuracy.len() as f64;
        CellResult {
            cell,
            replicate,
            seed: 0,
            manifest_hash: String::new(),
            accuracy,
            mean_accuracy: Some(mean),
            best_val_accuracy: Some(mean),
            epochs_run: 1,
            error: None,
        }
    }

    fn one(scheme: GazeScheme, adaptation: Adaptation) -> Cell {
        Cell {
            scheme,
            backbone: FeatureMode::Temporal,
            sharing: ResamplerSharing::PerLayer,
            adaptation,
        }
    }

    #[test]
    fn full_grid_has_24_cells() {
        let spec = AblationGridSpec::full(0, 3);
        assert_eq!(spec.cells().len(), 24);
        spec.validate().unwrap();
        let mut empty = spec.clone();
        empty.schemes.clear();
        assert!(empty.validate().is_err());
        assert!(AblationGridSpec { replicates: 0, ..spec }.validate().is_err());
    }

    #[test]
    fn single_cell_spreads_are_undefined() {
        let spec = AblationGridSpec {
            schemes: vec![GazeScheme::CoordPe],
            backbones: vec![FeatureMode::Temporal],
            sharing: vec![ResamplerSharing::PerLayer],
            adaptation: vec![Adaptation::None],
            scale: ModelScale::Compact,
            base_seed: 0,
            replicates: 1,
        };
        let r = vec![result(spec.cells()[0], 0, &[(TaskKind::Nfi, 0.5)])];
        for a in summarize(&spec, &r) {
            assert_eq!(a.spread, vec![None]);
            assert_eq!(a.spread_mean, None);
            assert_eq!(a.best, None);
        }
    }

    #[test]
    fn two_cells_spread_is_largest_task_gap() {
        let spec = AblationGridSpec {
            schemes: vec![GazeScheme::CoordPe],
            backbones: vec![FeatureMode::Temporal],
            sharing: vec![ResamplerSharing::PerLayer],
            adaptation: Adaptation::ALL.to_vec(),
            scale: ModelScale::Compact,
            base_seed: 0,
            replicates: 1,
        };
        let r = vec![
            result(
                one(GazeScheme::CoordPe, Adaptation::Lora),
                0,
                &[(TaskKind::OiHard, 0.9), (TaskKind::Nfi, 0.4)],
            ),
            result(
                one(GazeScheme::CoordPe, Adaptation::None),
                0,
                &[(TaskKind::OiHard, 0.8), (TaskKind::Nfi, 0.7)],
            ),
        ];
        let axes = summarize(&spec, &r);
        let a = axes.iter().find(|a| a.axis == Axis::A).unwrap();
        let s = a.spread[0].as_ref().unwrap();
        assert!((s.value - 0.3).abs() < 1e-12);
        assert_eq!(
            (s.task, s.best.as_str(), s.worst.as_str()),
            (TaskKind::Nfi, "none", "lora")
        );
        assert_eq!(a.best.as_deref(), Some("none"));
        assert!(axes.iter().find(|a| a.axis == Axis::G).unwrap().spread[0].is_none());
    }

    #[test]
    fn failed_cells_are_skipped_in_summaries() {
        let spec = AblationGridSpec {
            schemes: vec![GazeScheme::CoordPe, GazeScheme::HeatmapDur],
            backbones: vec![FeatureMode::Temporal],
            sharing: vec![ResamplerSharing::PerLayer],
            adaptation: vec![Adaptation::None],
            scale: ModelScale::Compact,
            base_seed: 0,
            replicates: 2,
        };
        let mut bad = result(one(GazeScheme::HeatmapDur, Adaptation::None), 1, &[]);
        bad.error = Some("boom".into());
        bad.mean_accuracy = None;
        let r = vec![
            result(one(GazeScheme::CoordPe, Adaptation::None), 0, &[(TaskKind::Nfi, 0.6)]),
            result(
                one(GazeScheme::HeatmapDur, Adaptation::None),
                0,
                &[(TaskKind::Nfi, 0.5)],
            ),
            result(one(GazeScheme::CoordPe, Adaptation::None), 1, &[(TaskKind::Nfi, 0.7)]),
            bad,
        ];
        let g = summarize(&spec, &r).into_iter().find(|a| a.axis == Axis::G).unwrap();
        assert!(g.spread[0].is_some());
        assert!(g.spread[1].is_none());
        assert_eq!(g.spread_min, g.spread_max);
        let report = AblationReport {
            spec,
            results: r,
            axes: vec![g],
        };
        assert!(report.table().contains("failed"));
        assert_eq!(report.to_jsonl().unwrap().lines().count(), 5);
    }
}
