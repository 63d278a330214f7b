//! Synthetic scenes and their per-frame feature grids.
//!
//! Objects drift on a coarse placement grid without sharing a cell. Each
//! object id owns a fixed unit-norm embedding; the feature grid writes that
//! embedding into the cell holding the object's centre, and fills the other
//! cells with a shared background vector plus seeded noise.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::normal;

/// Width of the reserved displacement slice at the end of every embedding.
pub const MOTION_DIMS: usize = 2;

const BACKGROUND_NORM: f64 = 0.3;
const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_objects: usize,
    pub vocab_objects: usize,
    /// Object categories are `object_id % categories`. The first
    /// `categories` objects of a scene hold one object of each category.
    pub categories: usize,
    /// Half-width of the uniform per-frame step of the random walk.
    pub motion: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_frames: 40,
            dt: 0.5,
            grid_h: 4,
            grid_w: 4,
            num_objects: 6,
            vocab_objects: 16,
            categories: 4,
            motion: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.num_objects < 2 {
            return Err(Error::Config("a scene needs at least 2 objects".into()));
        }
        if self.num_objects > self.grid_h * self.grid_w {
            return Err(Error::Config(format!(
                "{} objects do not fit on a {}x{} grid",
                self.num_objects, self.grid_h, self.grid_w
            )));
        }
        if self.num_objects > self.vocab_objects {
            return Err(Error::Config(format!(
                "{} objects exceed the object vocabulary of {}",
                self.num_objects, self.vocab_objects
            )));
        }
        if self.categories > self.num_objects || (self.categories > 0 && self.vocab_objects % self.categories != 0) {
            return Err(Error::Config(format!(
                "{} categories incompatible with {} objects over a vocabulary of {}",
                self.categories, self.num_objects, self.vocab_objects
            )));
        }
        if !(self.dt > 0.0) || !(self.motion >= 0.0) {
            return Err(Error::Config("dt must be positive and motion non-negative".into()));
        }
        Ok(())
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    /// Centre `(x, y)` for every frame.
    pub trajectory: Vec<(f64, f64)>,
    pub visible_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub video_id: String,
    pub num_frames: usize,
    pub dt: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn duration(&self) -> f64 {
        self.num_frames as f64 * self.dt
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt
    }

    /// Row-major placement cell of an object at a frame.
    pub fn cell_of(&self, object: usize, frame: usize) -> usize {
        let (x, y) = self.objects[object].trajectory[frame];
        cell_index(x, y, self.grid_h, self.grid_w)
    }
}

pub fn cell_index(x: f64, y: f64, h: usize, w: usize) -> usize {
    let col = ((x * w as f64) as usize).min(w - 1);
    let row = ((y * h as f64) as usize).min(h - 1);
    row * w + col
}

/// 64-bit FNV-1a, used to derive per-video seeds from ids.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn gen_scene(video_id: &str, seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells_total = cfg.grid_h * cfg.grid_w;

    let mut ids = Vec::with_capacity(cfg.num_objects);
    if let Some(per_cat) = cfg.vocab_objects.checked_div(cfg.categories) {
        for c in 0..cfg.categories {
            ids.push(c + cfg.categories * rng.random_range(0..per_cat));
        }
    }
    let rest: Vec<usize> = (0..cfg.vocab_objects).filter(|o| !ids.contains(o)).collect();
    for i in sample(&mut rng, rest.len(), cfg.num_objects - ids.len()) {
        ids.push(rest[i]);
    }

    let start_cells = sample(&mut rng, cells_total, cfg.num_objects).into_vec();
    let mut pos: Vec<(f64, f64)> = start_cells
        .iter()
        .map(|&c| {
            let (r, k) = (c / cfg.grid_w, c % cfg.grid_w);
            (
                (k as f64 + 0.5) / cfg.grid_w as f64,
                (r as f64 + 0.5) / cfg.grid_h as f64,
            )
        })
        .collect();
    let mut traj: Vec<Vec<(f64, f64)>> = pos.iter().map(|&p| vec![p]).collect();
    for _ in 1..cfg.num_frames {
        for i in 0..cfg.num_objects {
            if cfg.motion > 0.0 {
                let (x, y) = pos[i];
                let nx = (x + rng.random_range(-cfg.motion..=cfg.motion)).clamp(0.0, 1.0);
                let ny = (y + rng.random_range(-cfg.motion..=cfg.motion)).clamp(0.0, 1.0);
                let cell = cell_index(nx, ny, cfg.grid_h, cfg.grid_w);
                let clash = (0..cfg.num_objects)
                    .any(|j| j != i && cell_index(pos[j].0, pos[j].1, cfg.grid_h, cfg.grid_w) == cell);
                if !clash {
                    pos[i] = (nx, ny);
                }
            }
            traj[i].push(pos[i]);
        }
    }
    let objects = ids
        .into_iter()
        .zip(traj)
        .map(|(object_id, trajectory)| SceneObject {
            object_id,
            trajectory,
            visible_frames: (0..cfg.num_frames).collect(),
        })
        .collect();
    Ok(Scene {
        video_id: video_id.to_string(),
        num_frames: cfg.num_frames,
        dt: cfg.dt,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        objects,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Embeddings carry the frame-to-frame displacement of the object.
    Temporal,
    /// Frame-independent embeddings; the displacement slice stays zero.
    Static,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 2] = [FeatureMode::Temporal, FeatureMode::Static];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Temporal => "temporal",
            FeatureMode::Static => "static",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature mode `{s}`")))
    }
}

/// `T x H x W x d_v` features, stored as one `HW x d_v` matrix per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub frames: Vec<Mat>,
    pub mode: FeatureMode,
}

impl FeatureGrid {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn d_v(&self) -> usize {
        self.frames.first().map_or(0, |f| f.ncols())
    }
}

/// Unit-norm object embeddings living in the first `d_v - MOTION_DIMS`
/// dimensions. Up to that many ids are mutually orthogonal.
pub fn object_embeddings(vocab: usize, d_v: usize, seed: u64) -> Mat {
    let d = d_v.saturating_sub(MOTION_DIMS).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_6a65_6374_7321);
    let raw = normal(&mut rng, vocab, d, 1.0);
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(vocab);
    let mut out = Mat::zeros((vocab, d_v));
    for i in 0..vocab {
        let mut v = raw.row(i).to_owned();
        if i < d {
            for b in &basis {
                let proj = v.dot(b);
                v.scaled_add(-proj, b);
            }
        }
        let n = v.dot(&v).sqrt();
        v /= n;
        if i < d {
            basis.push(v.clone());
        }
        out.row_mut(i).slice_mut(ndarray::s![..d]).assign(&v);
    }
    out
}

fn background(d_v: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6267_726e_6421);
    let d = d_v.saturating_sub(MOTION_DIMS).max(1);
    let mut v = Array1::zeros(d_v);
    let raw = normal(&mut rng, 1, d, 1.0);
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    for j in 0..d {
        v[j] = raw[[0, j]] / n * BACKGROUND_NORM;
    }
    v
}

/// Renders an `h x w` feature grid for every frame of `scene`.
///
/// `seed` fixes the object and background embeddings (shared by every
/// scene rendered with that seed) and, mixed with the video id, the
/// background noise.
pub fn render_features(
    scene: &Scene,
    h: usize,
    w: usize,
    d_v: usize,
    mode: FeatureMode,
    seed: u64,
) -> Result<FeatureGrid> {
    if h == 0 || w == 0 || d_v <= MOTION_DIMS {
        return Err(Error::Config(format!("feature grid {h}x{w}x{d_v} too small")));
    }
    let vocab = scene.objects.iter().map(|o| o.object_id + 1).max().unwrap_or(0);
    let emb = object_embeddings(vocab, d_v, seed);
    let bg = background(d_v, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&scene.video_id));
    let mut frames = Vec::with_capacity(scene.num_frames);
    for f in 0..scene.num_frames {
        let mut grid = normal(&mut rng, h * w, d_v, NOISE_STD);
        for mut row in grid.rows_mut() {
            row += &bg;
            for j in d_v - MOTION_DIMS..d_v {
                row[j] = 0.0;
            }
        }
        for obj in &scene.objects {
            if !obj.visible_frames.contains(&f) {
                continue;
            }
            let (x, y) = obj.trajectory[f];
            let cell = cell_index(x, y, h, w);
            let mut row = grid.row_mut(cell);
            row.assign(&emb.row(obj.object_id));
            if mode == FeatureMode::Temporal && f > 0 {
                let (px, py) = obj.trajectory[f - 1];
                row[d_v - 2] = x - px;
                row[d_v - 1] = y - py;
            }
        }
        frames.push(grid);
    }
    Ok(FeatureGrid { h, w, frames, mode })
}

/// Sample positions of an align-corners linear resampling from `n_in` to
/// `n_out` points: `(lower index, upper index, fraction)`.
fn align_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    if frac == 0.0 {
        return a;
    }
    (a + frac * (b - a)).clamp(a.min(b), a.max(b))
}

/// Linear resampling in time followed by bilinear resampling in space,
/// align-corners convention.
pub fn interp_align(grid: &FeatureGrid, t_out: usize, h_out: usize, w_out: usize) -> Result<FeatureGrid> {
    if t_out == 0 || h_out == 0 || w_out == 0 {
        return Err(Error::InputDomain(
            "interp_align output dimensions must be positive".into(),
        ));
    }
    if grid.frames.is_empty() {
        return Err(Error::InputDomain("interp_align on an empty grid".into()));
    }
    let d_v = grid.d_v();
    let temporal: Vec<Mat> = align_positions(grid.frames.len(), t_out)
        .into_iter()
        .map(|(lo, hi, f)| {
            let (a, b) = (&grid.frames[lo], &grid.frames[hi]);
            Mat::from_shape_fn(a.dim(), |ix| lerp(a[ix], b[ix], f))
        })
        .collect();
    let rows = align_positions(grid.h, h_out);
    let cols = align_positions(grid.w, w_out);
    let frames = temporal
        .iter()
        .map(|fr| {
            let at = |r: usize, c: usize, k: usize| fr[[r * grid.w + c, k]];
            let mut out = Mat::zeros((h_out * w_out, d_v));
            for (i, &(r0, r1, fr_)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                    for k in 0..d_v {
                        let top = lerp(at(r0, c0, k), at(r0, c1, k), fc);
                        let bot = lerp(at(r1, c0, k), at(r1, c1, k), fc);
                        out[[i * w_out + j, k]] = lerp(top, bot, fr_);
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeatureGrid {
        h: h_out,
        w: w_out,
        frames,
        mode: grid.mode,
    })
}
