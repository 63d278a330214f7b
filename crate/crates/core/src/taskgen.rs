//! Multiple-choice questions over synthetic scenes and scanpaths.
//!
//! Every scene holds one representative object per category plus
//! distractors. A scanpath dwells on representatives for one to three
//! frames at a time, with exactly one fixation active per frame. The four
//! options of every question are the representatives listed in category
//! order, so the prompt is identical for every possible answer and only
//! the gaze tells them apart. Within a video, correct positions cycle
//! through a shuffled order, so answers are balanced per video and hence
//! per split.
//!
//! * `oi_hard_analog`: which object is fixated at the query frame.
//! * `otp_analog`: which object was fixated first in the clip.
//! * `nfi_analog`: which object was never fixated in the clip (three of the
//!   four are).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scanpath::{Fixation, Scanpath};
use crate::synthvideo::{gen_scene, Scene, SceneConfig};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "oi_hard_analog")]
    OiHard,
    #[serde(rename = "otp_analog")]
    Otp,
    #[serde(rename = "nfi_analog")]
    Nfi,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::OiHard, TaskKind::Otp, TaskKind::Nfi];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::OiHard => "oi_hard_analog",
            TaskKind::Otp => "otp_analog",
            TaskKind::Nfi => "nfi_analog",
        }
    }

    pub fn token(self) -> u32 {
        vocab::TASK_BASE + self as u32
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let short = s.trim_end_matches("_analog");
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().trim_end_matches("_analog") == short)
            .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub video_id: String,
    pub task_kind: TaskKind,
    pub query_time: f64,
    pub query_frame: usize,
    /// First frame of the clip shown to the model; the clip ends at the
    /// query frame.
    pub clip_start: usize,
    pub clip_len: usize,
    /// Object ids.
    pub options: [usize; vocab::OPTIONS],
    pub correct: usize,
    pub prompt_tokens: Vec<u32>,
}

impl QaItem {
    pub fn clip_frames(&self) -> std::ops::Range<usize> {
        self.clip_start..self.clip_start + self.clip_len
    }
}

/// Relative weights of the three task kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub Vec<(TaskKind, f64)>);

impl TaskMix {
    pub fn only(kind: TaskKind) -> Self {
        TaskMix(vec![(kind, 1.0)])
    }

    pub fn uniform() -> Self {
        TaskMix(TaskKind::ALL.iter().map(|&k| (k, 1.0)).collect())
    }

    /// Per-kind counts summing to `total`, by largest remainder.
    pub fn allocate(&self, total: usize) -> Result<Vec<(TaskKind, usize)>> {
        let weights: Vec<f64> = self.0.iter().map(|(_, w)| *w).collect();
        let counts = largest_remainder(&weights, total)?;
        Ok(self.0.iter().map(|(k, _)| *k).zip(counts).collect())
    }
}

impl fmt::Display for TaskMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, w)| format!("{}:{w}", k.name())).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TaskMix {
    type Err = Error;

    /// `oi_hard` or `oi_hard:2,nfi:1` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(TaskMix::uniform());
        }
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, w) = match part.split_once(':') {
                Some((n, w)) => (
                    n,
                    w.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad task weight `{w}`")))?,
                ),
                None => (part, 1.0),
            };
            out.push((name.parse()?, w));
        }
        if out.is_empty() {
            return Err(Error::Config("empty task mix".into()));
        }
        Ok(TaskMix(out))
    }
}

/// Integer allocation of `total` proportional to `weights`: floors first,
/// then the largest fractional remainders (ties to the earlier entry).
pub fn largest_remainder(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) {
        return Err(Error::Config(format!("invalid weights {weights:?}")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub items_per_video: usize,
    pub mix: TaskMix,
    pub scene: SceneConfig,
    /// Frames shown for past-style questions.
    pub past_clip_frames: usize,
    pub min_dwell: usize,
    pub max_dwell: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_videos: 40,
            items_per_video: 40,
            mix: TaskMix::only(TaskKind::OiHard),
            scene: SceneConfig::default(),
            past_clip_frames: 4,
            min_dwell: 1,
            max_dwell: 3,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_videos < 7 {
            return Err(Error::Config(format!(
                "{} videos cannot fill a 70/15/15 split",
                self.n_videos
            )));
        }
        if self.scene.categories != vocab::OPTIONS {
            return Err(Error::Config(format!(
                "questions need {} object categories, scene has {}",
                vocab::OPTIONS,
                self.scene.categories
            )));
        }
        if self.past_clip_frames == 0 || self.past_clip_frames > self.scene.num_frames {
            return Err(Error::Config("past clip length outside the scene".into()));
        }
        if self.min_dwell == 0 || self.min_dwell > self.max_dwell {
            return Err(Error::Config("dwell range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Scenes, scanpaths and questions of one generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cfg: DatasetConfig,
    pub scenes: Vec<Scene>,
    pub scanpaths: BTreeMap<String, Scanpath>,
    pub items: Vec<QaItem>,
}

impl Dataset {
    pub fn scene(&self, video_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.video_id == video_id)
    }
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:04}")
}

/// Fixated representative index (0..4) for every frame, plus the scanpath.
fn gen_scanpath(scene: &Scene, rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> Result<(Vec<usize>, Scanpath)> {
    let reps = cfg.scene.categories;
    let mut per_frame = Vec::with_capacity(scene.num_frames);
    let mut fixations = Vec::new();
    let mut prev = None;
    while per_frame.len() < scene.num_frames {
        let n = rng
            .random_range(cfg.min_dwell..=cfg.max_dwell)
            .min(scene.num_frames - per_frame.len());
        let target = loop {
            let t = rng.random_range(0..reps);
            if Some(t) != prev {
                break t;
            }
        };
        prev = Some(target);
        let a = per_frame.len();
        let (x, y) = scene.objects[target].trajectory[a + (n - 1) / 2];
        let t = (a as f64 + (n as f64 - 1.0) / 2.0) * scene.dt;
        let dur = (n as f64 - 0.2) * scene.dt;
        fixations.push(Fixation::new(x, y, t, dur)?);
        per_frame.extend(std::iter::repeat(target).take(n));
    }
    Ok((per_frame, Scanpath::new(fixations)?))
}

/// Token sequence `[VIS x span][task][time bucket][4 options][cue]`.
pub fn render_prompt(
    task: TaskKind,
    query_frame: usize,
    num_frames: usize,
    options: &[usize; vocab::OPTIONS],
    visual_tokens: usize,
    vocab_size: usize,
) -> Result<Vec<u32>> {
    let bucket = (query_frame * vocab::BUCKETS as usize / num_frames.max(1)) as u32;
    let mut out = vec![vocab::VIS; visual_tokens];
    out.push(task.token());
    out.push(vocab::BUCKET_BASE + bucket.min(vocab::BUCKETS - 1));
    for &o in options {
        let t = vocab::object_token(o);
        if t as usize >= vocab_size {
            return Err(Error::Config(format!(
                "object {o} does not fit a vocabulary of {vocab_size}"
            )));
        }
        out.push(t);
    }
    out.push(vocab::CUE);
    Ok(out)
}

fn make_items(
    scene: &Scene,
    fixated: &[usize],
    cfg: &DatasetConfig,
    tokens_per_frame: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<QaItem>>> {
    let nf = scene.num_frames;
    let reps = cfg.scene.categories;
    let options: [usize; vocab::OPTIONS] = std::array::from_fn(|i| scene.objects[i].object_id);
    let past = cfg.past_clip_frames;
    let missing_in = |q: usize| -> Option<usize> {
        let seen: BTreeSet<usize> = fixated[q + 1 - past..=q].iter().copied().collect();
        (seen.len() == reps - 1).then(|| (0..reps).find(|r| !seen.contains(r)).expect("one of four unseen"))
    };
    // Candidate (query frame, answer) pairs per kind.
    let candidates = |kind: TaskKind| -> Vec<(usize, usize)> {
        match kind {
            TaskKind::OiHard => (0..nf).map(|q| (q, fixated[q])).collect(),
            TaskKind::Otp => (past - 1..nf).map(|q| (q, fixated[q + 1 - past])).collect(),
            TaskKind::Nfi => (past - 1..nf).filter_map(|q| missing_in(q).map(|m| (q, m))).collect(),
        }
    };
    let mut items = Vec::with_capacity(cfg.items_per_video);
    for (kind, count) in cfg.mix.allocate(cfg.items_per_video)? {
        let pool = candidates(kind);
        let by_answer: Vec<Vec<usize>> = (0..reps)
            .map(|a| pool.iter().filter(|c| c.1 == a).map(|c| c.0).collect())
            .collect();
        // Answers cycle through a shuffled order so every video is balanced.
        let mut order: Vec<usize> = (0..reps).collect();
        order.shuffle(rng);
        for j in 0..count {
            let correct = order[j % reps];
            let Some(&q) = by_answer[correct].choose(rng) else {
                return Ok(None);
            };
            let start = match kind {
                TaskKind::OiHard => q,
                TaskKind::Otp | TaskKind::Nfi => q + 1 - past,
            };
            let clip_len = q + 1 - start;
            let prompt_tokens = render_prompt(kind, q, nf, &options, clip_len * tokens_per_frame, vocab_size)?;
            items.push(QaItem {
                video_id: scene.video_id.clone(),
                task_kind: kind,
                query_time: scene.frame_time(q),
                query_frame: q,
                clip_start: start,
                clip_len,
                options,
                correct,
                prompt_tokens,
            });
        }
    }
    Ok(Some(items))
}

/// Generates `n_videos` scenes with one scanpath each and
/// `items_per_video` questions per scene. A scene that cannot host the
/// requested question kinds is regenerated with a fresh sub-seed, at most
/// ten times.
pub fn gen_dataset(cfg: &DatasetConfig, tokens_per_frame: usize, vocab_size: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.n_videos);
    let mut scanpaths = BTreeMap::new();
    let mut items = Vec::new();
    for v in 0..cfg.n_videos {
        let vid = video_id(v);
        let mut done = false;
        for attempt in 0..10u64 {
            let sub = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((v as u64) << 8 | attempt);
            let scene = gen_scene(&vid, sub, &cfg.scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub ^ 0x7363_616e);
            let (fixated, path) = gen_scanpath(&scene, &mut rng, cfg)?;
            if let Some(new_items) = make_items(&scene, &fixated, cfg, tokens_per_frame, vocab_size, &mut rng)? {
                items.extend(new_items);
                scanpaths.insert(vid.clone(), path);
                scenes.push(scene);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Config(format!(
                "video {vid}: no scene could host the requested questions after 10 attempts"
            )));
        }
    }
    Ok(Dataset {
        cfg: cfg.clone(),
        scenes,
        scanpaths,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Items of `items` whose video belongs to `videos`, in input order.
    pub fn select<'d>(items: &'d [QaItem], videos: &[String]) -> Vec<&'d QaItem> {
        let set: BTreeSet<&str> = videos.iter().map(String::as_str).collect();
        items.iter().filter(|i| set.contains(i.video_id.as_str())).collect()
    }

    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Shuffles the distinct videos of `items` with `seed` and partitions them
/// by largest-remainder rounding of `ratios`.
pub fn split_by_video(items: &[QaItem], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} do not sum to 1")));
    }
    let mut videos: Vec<String> = items
        .iter()
        .map(|i| i.video_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = largest_remainder(&ratios, videos.len())?;
    for (name, &c) in ["train", "val", "test"].iter().zip(&counts) {
        if c == 0 {
            return Err(Error::EmptySplit((*name).to_string()));
        }
    }
    let test = videos.split_off(counts[0] + counts[1]);
    let val = videos.split_off(counts[0]);
    Ok(DatasetSplit {
        train: videos,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanpath::active_set;
    use proptest::prelude::*;

    fn small(mix: TaskMix, n: usize, per: usize, seed: u64) -> Dataset {
        let cfg = DatasetConfig {
            seed,
            n_videos: n,
            items_per_video: per,
            mix,
            ..DatasetConfig::default()
        };
        gen_dataset(&cfg, 16, 64).unwrap()
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.7, 0.15, 0.15], 20).unwrap(), vec![14, 3, 3]);
        assert_eq!(largest_remainder(&[0.7, 0.15, 0.15], 40).unwrap(), vec![28, 6, 6]);
        assert_eq!(largest_remainder(&[0.7, 0.15, 0.15], 7).unwrap(), vec![5, 1, 1]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 40).unwrap(), vec![14, 13, 13]);
    }

    #[test]
    fn one_fixation_is_active_per_frame_and_matches_the_answer() {
        let d = small(TaskMix::only(TaskKind::OiHard), 8, 20, 3);
        for item in &d.items {
            let scene = d.scene(&item.video_id).unwrap();
            let active = active_set(&d.scanpaths[&item.video_id], item.query_time);
            assert_eq!(active.len(), 1);
            let obj = &scene.objects[item.correct];
            let (x, y) = (active[0].x, active[0].y);
            assert!(obj.trajectory.contains(&(x, y)));
            assert_eq!(item.options[item.correct], obj.object_id);
            assert_eq!(item.clip_len, 1);
        }
    }

    #[test]
    fn past_tasks_have_consistent_answers() {
        let d = small(TaskMix::uniform(), 8, 30, 5);
        let kinds: BTreeSet<TaskKind> = d.items.iter().map(|i| i.task_kind).collect();
        assert_eq!(kinds.len(), 3);
        for item in d.items.iter().filter(|i| i.task_kind != TaskKind::OiHard) {
            assert_eq!(item.clip_len, 4);
            let path = &d.scanpaths[&item.video_id];
            let scene = d.scene(&item.video_id).unwrap();
            let fixated_in_clip: BTreeSet<usize> = item
                .clip_frames()
                .map(|f| {
                    let a = active_set(path, scene.frame_time(f));
                    (0..4)
                        .find(|&r| scene.objects[r].trajectory.contains(&(a[0].x, a[0].y)))
                        .unwrap()
                })
                .collect();
            match item.task_kind {
                TaskKind::Nfi => {
                    assert_eq!(fixated_in_clip.len(), 3);
                    assert!(!fixated_in_clip.contains(&item.correct));
                }
                _ => assert!(fixated_in_clip.contains(&item.correct)),
            }
        }
    }

    #[test]
    fn prompt_layout_and_label_blindness() {
        let d = small(TaskMix::uniform(), 7, 12, 1);
        for item in &d.items {
            assert_eq!(item.prompt_tokens.len(), item.clip_len * 16 + 7);
            let mut other = item.clone();
            other.correct = (item.correct + 1) % 4;
            let again = render_prompt(
                other.task_kind,
                other.query_frame,
                40,
                &other.options,
                other.clip_len * 16,
                64,
            )
            .unwrap();
            assert_eq!(again, item.prompt_tokens);
            let mut distinct = item.options.to_vec();
            distinct.dedup();
            assert_eq!(distinct.len(), 4);
        }
        assert!(render_prompt(TaskKind::Otp, 0, 40, &[0, 1, 2, 60], 16, 64).is_err());
        let fixed = render_prompt(TaskKind::OiHard, 20, 40, &[4, 1, 2, 3], 2, 64).unwrap();
        assert_eq!(fixed, vec![1, 1, 2, 9, 22, 19, 20, 21, 13]);
    }

    #[test]
    fn correct_positions_are_balanced() {
        let d = small(TaskMix::only(TaskKind::OiHard), 25, 40, 11);
        assert_eq!(d.items.len(), 1000);
        let mut hist = [0usize; 4];
        for i in &d.items {
            hist[i.correct] += 1;
        }
        for h in hist {
            assert!((210..=290).contains(&h), "{hist:?}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_checks_size() {
        assert_eq!(small(TaskMix::uniform(), 7, 5, 9), small(TaskMix::uniform(), 7, 5, 9));
        let cfg = DatasetConfig {
            n_videos: 6,
            ..DatasetConfig::default()
        };
        assert!(gen_dataset(&cfg, 16, 64).is_err());
    }

    #[test]
    fn split_examples() {
        let d = small(TaskMix::only(TaskKind::OiHard), 20, 3, 2);
        let s = split_by_video(&d.items, [0.7, 0.15, 0.15], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        assert_eq!(s, split_by_video(&d.items, [0.7, 0.15, 0.15], 4).unwrap());
        assert!(matches!(
            split_by_video(&d.items[..3], [0.7, 0.15, 0.15], 4),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn task_mix_parsing() {
        assert_eq!("all".parse::<TaskMix>().unwrap(), TaskMix::uniform());
        let m: TaskMix = "oi_hard:2,nfi".parse().unwrap();
        assert_eq!(m.0, vec![(TaskKind::OiHard, 2.0), (TaskKind::Nfi, 1.0)]);
        assert!("bogus".parse::<TaskMix>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn splits_partition_items(n in 7usize..30, seed in 0u64..1000) {
            let d = small(TaskMix::only(TaskKind::OiHard), n, 2, seed);
            let s = split_by_video(&d.items, [0.7, 0.15, 0.15], seed).unwrap();
            let parts = [&s.train, &s.val, &s.test];
            let mut all: Vec<&String> = parts.iter().flat_map(|p| p.iter()).collect();
            let total = all.len();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), total);
            prop_assert_eq!(total, n);
            let covered: usize = parts.iter().map(|p| DatasetSplit::select(&d.items, p).len()).sum();
            prop_assert_eq!(covered, d.items.len());
        }
    }
}
