//! Rendered corpora and the on-disk dataset layout.
//!
//! A dataset directory holds `items.jsonl`, `scanpaths.tsv`,
//! `scenes.jsonl` and `manifest.json`. Frame features are not stored; they
//! are re-rendered deterministically from the scenes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::host::FrameInput;
use crate::model::ModelConfig;
use crate::resampler::Gaze;
use crate::scanpath::{load_scanpaths, write_scanpaths, Scanpath};
use crate::synthvideo::{interp_align, render_features, FeatureGrid, FeatureMode, Scene};
use crate::taskgen::{Dataset, DatasetConfig, DatasetSplit, QaItem};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const SCANPATHS_FILE: &str = "scanpaths.tsv";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub d_v: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mode: FeatureMode,
    pub seed: u64,
}

impl FeatureSpec {
    /// Features shaped for `cfg`'s resampler input.
    pub fn for_model(cfg: &ModelConfig, mode: FeatureMode, seed: u64) -> Self {
        FeatureSpec {
            d_v: cfg.resampler.d_v,
            grid_h: cfg.resampler.grid_h,
            grid_w: cfg.resampler.grid_w,
            mode,
            seed,
        }
    }
}

/// A dataset with its frame features rendered once.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dataset: Dataset,
    pub spec: FeatureSpec,
    features: BTreeMap<String, FeatureGrid>,
    empty: Scanpath,
}

impl Corpus {
    pub fn build(dataset: Dataset, spec: FeatureSpec) -> Result<Self> {
        let rendered: Vec<(String, FeatureGrid)> = dataset
            .scenes
            .par_iter()
            .map(|scene| {
                let grid = render_features(scene, scene.grid_h, scene.grid_w, spec.d_v, spec.mode, spec.seed)?;
                let grid = if (grid.h, grid.w) == (spec.grid_h, spec.grid_w) {
                    grid
                } else {
                    interp_align(&grid, scene.num_frames, spec.grid_h, spec.grid_w)?
                };
                Ok((scene.video_id.clone(), grid))
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            dataset,
            spec,
            features: rendered.into_iter().collect(),
            empty: Scanpath::empty(),
        })
    }

    pub fn features(&self, video_id: &str) -> Result<&FeatureGrid> {
        self.features
            .get(video_id)
            .ok_or_else(|| Error::InputDomain(format!("unknown video `{video_id}`")))
    }

    fn scene(&self, video_id: &str) -> Result<&Scene> {
        self.dataset
            .scene(video_id)
            .ok_or_else(|| Error::InputDomain(format!("unknown video `{video_id}`")))
    }

    /// Per-frame inputs of the item's clip. With `gaze_free` every frame
    /// sees an empty scanpath.
    pub fn frames(&self, item: &QaItem, gaze_free: bool) -> Result<Vec<FrameInput<'_>>> {
        let grid = self.features(&item.video_id)?;
        let scene = self.scene(&item.video_id)?;
        let path = if gaze_free {
            &self.empty
        } else {
            self.dataset
                .scanpaths
                .get(&item.video_id)
                .ok_or_else(|| Error::InputDomain(format!("no scanpath for `{}`", item.video_id)))?
        };
        item.clip_frames()
            .map(|f| {
                let features = grid
                    .frames
                    .get(f)
                    .ok_or_else(|| Error::InputDomain(format!("frame {f} outside video `{}`", item.video_id)))?;
                Ok(FrameInput {
                    features,
                    gaze: Gaze::Scanpath {
                        path,
                        frame_time: scene.frame_time(f),
                    },
                })
            })
            .collect()
    }

    pub fn items_of(&self, videos: &[String]) -> Vec<&QaItem> {
        DatasetSplit::select(&self.dataset.items, videos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub split_seed: u64,
    pub config: DatasetConfig,
    pub split: DatasetSplit,
    /// sha256 of each data file.
    pub files: BTreeMap<String, String>,
    /// sha256 over the per-file digests in name order.
    pub hash: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn digest_files(files: &BTreeMap<String, String>) -> String {
    let joined: String = files.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
    sha_hex(joined.as_bytes())
}

/// Writes the dataset and its split into `dir`, returning the manifest.
pub fn write_dataset(dir: &Path, dataset: &Dataset, split: &DatasetSplit, split_seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let items = jsonl(&dataset.items)?;
    let scenes = jsonl(&dataset.scenes)?;
    let mut paths = Vec::new();
    write_scanpaths(&mut paths, &dataset.scanpaths).map_err(|e| Error::io(dir.join(SCANPATHS_FILE), e))?;
    let mut files = BTreeMap::new();
    for (name, bytes) in [(ITEMS_FILE, &items), (SCENES_FILE, &scenes), (SCANPATHS_FILE, &paths)] {
        write_file(&dir.join(name), bytes)?;
        files.insert(name.to_string(), sha_hex(bytes));
    }
    let manifest = Manifest {
        seed: dataset.cfg.seed,
        split_seed,
        config: dataset.cfg.clone(),
        split: split.clone(),
        hash: digest_files(&files),
        files,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_file(&dir.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    for (name, want) in &manifest.files {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &sha_hex(&bytes) != want {
            return Err(Error::Config(format!(
                "{} does not match the manifest digest",
                p.display()
            )));
        }
    }
    if digest_files(&manifest.files) != manifest.hash {
        return Err(Error::Config("manifest hash is inconsistent".into()));
    }
    let items: Vec<QaItem> = read_jsonl(&dir.join(ITEMS_FILE))?;
    let scenes: Vec<Scene> = read_jsonl(&dir.join(SCENES_FILE))?;
    let spath = dir.join(SCANPATHS_FILE);
    let file = fs::File::open(&spath).map_err(|e| Error::io(&spath, e))?;
    let scanpaths = load_scanpaths(BufReader::new(file))?;
    let dataset = Dataset {
        cfg: manifest.config.clone(),
        scenes,
        scanpaths,
        items,
    };
    Ok((dataset, manifest))
}
