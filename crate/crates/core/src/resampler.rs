//! Gaze-conditioned latent resampler.
//!
//! One frame of `HW` visual tokens is projected to `d_l`, compressed into
//! `K` learned latents by `B` cross-attention blocks whose spatial keys
//! carry an additive gaze bias, then read back to `HW` rows by a reverse
//! cross-attention and projected to the host width. The output projection
//! starts at zero, so a fresh resampler contributes nothing.
//!
//! All attention is single-head. The bottleneck never forms an `HW x HW`
//! matrix: forward blocks attend `K x (HW + K)`, the read-out `HW x K`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, ParamStore};
use crate::scanpath::{
    cell_center, encode_coord_pe, gaze_heatmap, gaze_vector, heatmap_tau_with_grad, GazeEncodingConfig, GazeScheme,
    Scanpath,
};

const IN_GAIN: f64 = 4.0;
const GAZE_GAIN: f64 = 4.0;
const READ_GAIN: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    pub d_v: usize,
    pub d_l: usize,
    pub d_llm: usize,
    /// Number of latents `K`.
    pub latents: usize,
    /// Number of cross-attention blocks `B`.
    pub blocks: usize,
    pub ffn_mult: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub gaze: GazeEncodingConfig,
}

impl ResamplerConfig {
    pub fn new(d_v: usize, d_l: usize, d_llm: usize, grid_h: usize, grid_w: usize, scheme: GazeScheme) -> Self {
        ResamplerConfig {
            d_v,
            d_l,
            d_llm,
            latents: 8,
            blocks: 2,
            ffn_mult: 4,
            grid_h,
            grid_w,
            gaze: GazeEncodingConfig::new(scheme, d_l),
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_v,
            self.d_l,
            self.d_llm,
            self.latents,
            self.blocks,
            self.ffn_mult,
            self.grid_h,
            self.grid_w,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("resampler dimensions must be positive".into()));
        }
        if self.gaze.d_l != self.d_l {
            return Err(Error::Config(format!(
                "gaze encoding width {} differs from d_l {}",
                self.gaze.d_l, self.d_l
            )));
        }
        self.gaze.validate()
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (dv, dl, dh) = (self.d_v, self.d_l, self.ffn_mult * self.d_l);
        let per_block = 4 * dl * dl + 2 * dl + (dl * dh + dh) + (dh * dl + dl);
        let gaze = match self.gaze.scheme {
            GazeScheme::CoordPe => 0,
            GazeScheme::HeatmapDur => dl,
            GazeScheme::HeatmapTau => dl + 1,
        };
        dv * dl + self.latents * dl + self.blocks * per_block + 3 * dl * dl + dl * self.d_llm + gaze
    }
}

/// Gaze signal for one frame.
#[derive(Clone, Copy, Debug)]
pub enum Gaze<'s> {
    /// Precomputed `d_l` vector, used by the Coord-PE scheme.
    Vector(&'s [f64]),
    /// Precomputed `HW` heatmap; no gradient reaches the decay constant.
    Heatmap(&'s [f64]),
    /// Encode the scanpath at `frame_time` with the configured scheme.
    Scanpath { path: &'s Scanpath, frame_time: f64 },
}

/// Intermediate values of one forward pass.
pub struct ResamplerTrace {
    pub residual: Var,
    /// Unscaled attention scores `Q·Kᵀ` of every block, `K x (HW + K)`.
    pub scores: Vec<Var>,
    /// Row-stochastic attention matrices of every block.
    pub attention: Vec<Var>,
    /// Read-out attention, `HW x K`.
    pub readout: Var,
}

#[derive(Clone, Debug)]
pub struct Resampler {
    pub cfg: ResamplerConfig,
    pub prefix: String,
    cell_pe: Mat,
}

impl Resampler {
    /// Handle for parameters stored under `prefix` (e.g. `resampler.3`).
    pub fn new(cfg: ResamplerConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let mut cell_pe = Mat::zeros((cfg.tokens(), cfg.d_l));
        for p in 0..cfg.tokens() {
            let (x, y) = cell_center(p, cfg.grid_h, cfg.grid_w);
            let pe = encode_coord_pe(x, y, cfg.d_l)?;
            cell_pe.row_mut(p).assign(&ndarray::Array1::from(pe));
        }
        Ok(Resampler {
            cfg,
            prefix: prefix.into(),
            cell_pe,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    /// Writes freshly initialised parameters into `store`.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dl, dh) = (c.d_l, c.ffn_mult * c.d_l);
        let lin = |rng: &mut ChaCha8Rng, r: usize, k: usize| uniform(rng, r, k, 1.0 / (r as f64).sqrt());
        // Wider inputs, gaze keys and read-out values than the default
        // fan-in scale shorten the plateau while `w_out` is still zero.
        let wide = |rng: &mut ChaCha8Rng, r: usize, k: usize, gain: f64| uniform(rng, r, k, gain / (r as f64).sqrt());
        store.insert(self.name("w_in"), wide(&mut rng, c.d_v, dl, IN_GAIN), true);
        store.insert(self.name("latents"), normal(&mut rng, c.latents, dl, 1.0), false);
        for b in 0..c.blocks {
            for m in ["w_q", "w_k", "w_v"] {
                store.insert(self.name(&format!("{b}.{m}")), lin(&mut rng, dl, dl), true);
            }
            store.insert(self.name(&format!("{b}.w_g")), wide(&mut rng, dl, dl, GAZE_GAIN), true);
            store.insert(self.name(&format!("{b}.ln_g")), Mat::ones((1, dl)), false);
            store.insert(self.name(&format!("{b}.ln_b")), Mat::zeros((1, dl)), false);
            store.insert(self.name(&format!("{b}.ff1_w")), lin(&mut rng, dl, dh), true);
            store.insert(
                self.name(&format!("{b}.ff1_b")),
                uniform(&mut rng, 1, dh, 1.0 / (dl as f64).sqrt()),
                false,
            );
            store.insert(self.name(&format!("{b}.ff2_w")), lin(&mut rng, dh, dl), true);
            store.insert(
                self.name(&format!("{b}.ff2_b")),
                uniform(&mut rng, 1, dl, 1.0 / (dh as f64).sqrt()),
                false,
            );
        }
        for m in ["read.w_q", "read.w_k"] {
            store.insert(self.name(m), lin(&mut rng, dl, dl), true);
        }
        store.insert(self.name("read.w_v"), wide(&mut rng, dl, dl, READ_GAIN), true);
        store.insert(self.name("w_out"), Mat::zeros((dl, c.d_llm)), true);
        match c.gaze.scheme {
            GazeScheme::CoordPe => {}
            GazeScheme::HeatmapDur => store.insert(self.name("u"), uniform(&mut rng, 1, dl, 1.0), false),
            GazeScheme::HeatmapTau => {
                store.insert(self.name("u"), uniform(&mut rng, 1, dl, 1.0), false);
                store.insert(
                    self.name("log_tau"),
                    Mat::from_elem((1, 1), c.gaze.tau_init.ln()),
                    false,
                );
            }
        }
    }

    /// Names of every tensor this resampler owns.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.name("w_in"), self.name("latents")];
        for b in 0..self.cfg.blocks {
            for m in [
                "w_q", "w_k", "w_v", "w_g", "ln_g", "ln_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
            ] {
                names.push(self.name(&format!("{b}.{m}")));
            }
        }
        for m in ["read.w_q", "read.w_k", "read.w_v", "w_out"] {
            names.push(self.name(m));
        }
        match self.cfg.gaze.scheme {
            GazeScheme::CoordPe => {}
            GazeScheme::HeatmapDur => names.push(self.name("u")),
            GazeScheme::HeatmapTau => {
                names.push(self.name("u"));
                names.push(self.name("log_tau"));
            }
        }
        names
    }

    /// Number of scalars stored for this resampler.
    pub fn param_count(&self, store: &ParamStore) -> Result<usize> {
        self.param_names().iter().map(|n| store.get(n).map(|m| m.len())).sum()
    }

    /// Gaze key bias `G` (`HW x d_l`) on the tape.
    ///
    /// Coord-PE: `G[p] = g ⊙ PE(centre of cell p)`. Heatmaps: `G[p] = h[p]·u`.
    pub fn gaze_bias<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, gaze: Gaze<'_>) -> Result<Var> {
        let c = &self.cfg;
        let hw = c.tokens();
        if let GazeScheme::CoordPe = c.gaze.scheme {
            let g = match gaze {
                Gaze::Vector(g) => g.to_vec(),
                Gaze::Scanpath { path, frame_time } => gaze_vector(path, frame_time, &c.gaze)?,
                Gaze::Heatmap(_) => {
                    return Err(Error::Shape("coord_pe resampler given a heatmap".into()));
                }
            };
            if g.len() != c.d_l {
                return Err(Error::Shape(format!(
                    "gaze vector has {} entries, expected {}",
                    g.len(),
                    c.d_l
                )));
            }
            let mut bias = self.cell_pe.clone();
            for mut row in bias.rows_mut() {
                for (v, gi) in row.iter_mut().zip(&g) {
                    *v *= gi;
                }
            }
            return Ok(tape.constant(bias));
        }
        let column = |h: Vec<f64>| Mat::from_shape_vec((hw, 1), h).expect("heatmap length checked");
        let heat = match gaze {
            Gaze::Heatmap(h) => {
                if h.len() != hw {
                    return Err(Error::Shape(format!("heatmap has {} cells, expected {hw}", h.len())));
                }
                tape.constant(column(h.to_vec()))
            }
            Gaze::Scanpath { path, frame_time } => match c.gaze.scheme {
                GazeScheme::HeatmapTau => {
                    let log_tau = store.leaf(tape, &self.name("log_tau"))?;
                    let tau = tape.scalar(log_tau).exp();
                    let (h, dh) = heatmap_tau_with_grad(path, frame_time, c.grid_h, c.grid_w, c.gaze.sigma, tau);
                    // d/dlog_tau = tau * d/dtau
                    let dlog = column(dh.into_iter().map(|d| d * tau).collect());
                    tape.scalar_map(log_tau, column(h), dlog)
                }
                _ => {
                    let h = gaze_heatmap(path, frame_time, c.grid_h, c.grid_w, &c.gaze, c.gaze.tau_init)?;
                    tape.constant(column(h))
                }
            },
            Gaze::Vector(_) => {
                return Err(Error::Shape("heatmap resampler given a gaze vector".into()));
            }
        };
        let u = store.leaf(tape, &self.name("u"))?;
        Ok(tape.matmul(heat, u))
    }

    /// Residual `R` (`HW x d_llm`) for one frame.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        features: &Mat,
        gaze: Gaze<'_>,
    ) -> Result<Var> {
        let g = self.gaze_bias(tape, store, gaze)?;
        Ok(self.forward_with_bias(tape, store, features, g)?.residual)
    }

    /// Forward pass with an explicit `HW x d_l` key bias.
    pub fn forward_with_bias<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        features: &Mat,
        bias: Var,
    ) -> Result<ResamplerTrace> {
        let c = &self.cfg;
        let hw = c.tokens();
        if features.dim() != (hw, c.d_v) {
            return Err(Error::Shape(format!(
                "frame features {:?}, expected ({hw}, {})",
                features.dim(),
                c.d_v
            )));
        }
        if tape.shape(bias) != (hw, c.d_l) {
            return Err(Error::Shape(format!(
                "gaze bias {:?}, expected ({hw}, {})",
                tape.shape(bias),
                c.d_l
            )));
        }
        let inv = 1.0 / (c.d_l as f64).sqrt();
        let p = |leaf: &str| self.name(leaf);

        let f = tape.constant(features.clone());
        let w_in = store.leaf(tape, &p("w_in"))?;
        let x = tape.matmul(f, w_in);
        let mut l = store.leaf(tape, &p("latents"))?;
        let zeros = tape.constant(Mat::zeros((c.latents, c.d_l)));
        let g0 = tape.concat_rows(&[bias, zeros]);

        let mut scores = Vec::with_capacity(c.blocks);
        let mut attention = Vec::with_capacity(c.blocks);
        for b in 0..c.blocks {
            let bp = |m: &str| p(&format!("{b}.{m}"));
            let (wq, wk, wv, wg) = (
                store.leaf(tape, &bp("w_q"))?,
                store.leaf(tape, &bp("w_k"))?,
                store.leaf(tape, &bp("w_v"))?,
                store.leaf(tape, &bp("w_g"))?,
            );
            let xl = tape.concat_rows(&[x, l]);
            let q = tape.matmul(l, wq);
            let k_plain = tape.matmul(xl, wk);
            let k_gaze = tape.matmul(g0, wg);
            let k = tape.add(k_plain, k_gaze);
            let v = tape.matmul(xl, wv);
            let s = tape.matmul_t(q, k);
            scores.push(s);
            let s = tape.scale(s, inv);
            let a = tape.softmax_rows(s, false);
            attention.push(a);
            let upd = tape.matmul(a, v);
            l = tape.add(l, upd);
            let (gain, shift) = (store.leaf(tape, &bp("ln_g"))?, store.leaf(tape, &bp("ln_b"))?);
            l = tape.layer_norm(l, gain, shift);
            let (w1, b1, w2, b2) = (
                store.leaf(tape, &bp("ff1_w"))?,
                store.leaf(tape, &bp("ff1_b"))?,
                store.leaf(tape, &bp("ff2_w"))?,
                store.leaf(tape, &bp("ff2_b"))?,
            );
            let h = tape.matmul(l, w1);
            let h = tape.add_row(h, b1);
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2);
            let h = tape.add_row(h, b2);
            l = tape.add(l, h);
        }

        let (rq, rk, rv) = (
            store.leaf(tape, &p("read.w_q"))?,
            store.leaf(tape, &p("read.w_k"))?,
            store.leaf(tape, &p("read.w_v"))?,
        );
        let q = tape.matmul(x, rq);
        let k = tape.matmul(l, rk);
        let v = tape.matmul(l, rv);
        let s = tape.matmul_t(q, k);
        let s = tape.scale(s, inv);
        let readout = tape.softmax_rows(s, false);
        let y = tape.matmul(readout, v);
        let w_out = store.leaf(tape, &p("w_out"))?;
        let residual = tape.matmul(y, w_out);
        Ok(ResamplerTrace {
            residual,
            scores,
            attention,
            readout,
        })
    }

    /// First-block attention scores split into the gaze-free part and the
    /// additive gaze term: `(Q·K₀ᵀ, Q·([G; 0]·W_G)ᵀ)`, both `K x (HW + K)`.
    pub fn attention_decomposition(&self, store: &ParamStore, features: &Mat, gaze: Gaze<'_>) -> Result<(Mat, Mat)> {
        let mut tape = Tape::new();
        let g = self.gaze_bias(&mut tape, store, gaze)?;
        let c = &self.cfg;
        let x = features.dot(store.get(&self.name("w_in"))?);
        let l = store.get(&self.name("latents"))?;
        let xl =
            ndarray::concatenate(ndarray::Axis(0), &[x.view(), l.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let mut g0 = Mat::zeros((c.tokens() + c.latents, c.d_l));
        g0.slice_mut(ndarray::s![..c.tokens(), ..]).assign(tape.value(g));
        let q = l.dot(store.get(&self.name("0.w_q"))?);
        let k = xl.dot(store.get(&self.name("0.w_k"))?);
        let kg = g0.dot(store.get(&self.name("0.w_g"))?);
        Ok((q.dot(&k.t()), q.dot(&kg.t())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanpath::Fixation;
    use ndarray::Axis;
    use rand::Rng;

    fn setup(scheme: GazeScheme) -> (Resampler, ParamStore) {
        let cfg = ResamplerConfig::new(32, 32, 64, 4, 4, scheme);
        let r = Resampler::new(cfg, "resampler.1").unwrap();
        let mut s = ParamStore::new();
        r.init(&mut s, 7);
        (r, s)
    }

    fn randomize_out(r: &Resampler, s: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dl, dm) = (r.cfg.d_l, r.cfg.d_llm);
        *s.get_mut(&format!("{}.w_out", r.prefix)).unwrap() = uniform(&mut rng, dl, dm, 0.3);
    }

    fn features(seed: u64, hw: usize, dv: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal(&mut rng, hw, dv, 1.0)
    }

    fn gaze(seed: u64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: f64 = rng.random();
        let y: f64 = rng.random();
        encode_coord_pe(x, y, d).unwrap()
    }

    #[test]
    fn fresh_output_is_zero_and_params_are_deterministic() {
        let (r, s) = setup(GazeScheme::CoordPe);
        assert!(s.get("resampler.1.w_out").unwrap().iter().all(|&v| v == 0.0));
        let (_, s2) = setup(GazeScheme::CoordPe);
        assert_eq!(s, s2);
        for seed in 0..5 {
            let mut t = Tape::new();
            let g = gaze(seed, 32);
            let out = r
                .forward(&mut t, &s, &features(seed, 16, 32), Gaze::Vector(&g))
                .unwrap();
            assert!(t.value(out).iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (r, s) = setup(GazeScheme::CoordPe);
        // 1024 + 256 + 2 * (4096 + 64 + 8352) + 3072 + 2048
        assert_eq!(r.cfg.param_count(), 31424);
        assert_eq!(r.param_count(&s).unwrap(), 31424);
        let (r, s) = setup(GazeScheme::HeatmapTau);
        assert_eq!(r.param_count(&s).unwrap(), 31424 + 33);
        assert_eq!(r.cfg.param_count(), 31424 + 33);
    }

    #[test]
    fn attention_rows_are_stochastic_and_shapes_bottlenecked() {
        let (r, mut s) = setup(GazeScheme::CoordPe);
        randomize_out(&r, &mut s, 1);
        let mut t = Tape::new();
        let g = gaze(3, 32);
        let bias = r.gaze_bias(&mut t, &s, Gaze::Vector(&g)).unwrap();
        let tr = r.forward_with_bias(&mut t, &s, &features(3, 16, 32), bias).unwrap();
        for &a in tr.attention.iter().chain([&tr.readout]) {
            for row in t.value(a).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        for &a in &tr.attention {
            assert_eq!(t.shape(a), (8, 16 + 8));
        }
        assert_eq!(t.shape(tr.readout), (16, 8));
        assert_eq!(t.shape(tr.residual), (16, 64));
    }

    #[test]
    fn gaze_delta_is_exact_and_linear() {
        let (r, s) = setup(GazeScheme::CoordPe);
        let f = features(5, 16, 32);
        let g = gaze(5, 32);
        let (base, delta) = r.attention_decomposition(&s, &f, Gaze::Vector(&g)).unwrap();
        let zero = vec![0.0; 32];
        let (base0, delta0) = r.attention_decomposition(&s, &f, Gaze::Vector(&zero)).unwrap();
        assert_eq!(base, base0);
        assert!(delta0.iter().all(|&v| v == 0.0));
        assert!(delta.slice(ndarray::s![.., 16..]).iter().all(|&v| v == 0.0));
        for k in [2.0, -0.5, 3.0] {
            let gk: Vec<f64> = g.iter().map(|v| v * k).collect();
            let (_, dk) = r.attention_decomposition(&s, &f, Gaze::Vector(&gk)).unwrap();
            let err = (&dk - &(&delta * k)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-9, "scale {k}: {err}");
        }
        // measured forward scores agree with the decomposition
        let mut t = Tape::new();
        let bias = r.gaze_bias(&mut t, &s, Gaze::Vector(&g)).unwrap();
        let tr = r.forward_with_bias(&mut t, &s, &f, bias).unwrap();
        let err = (t.value(tr.scores[0]) - &(&base + &delta))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn readout_is_permutation_equivariant() {
        let (r, mut s) = setup(GazeScheme::CoordPe);
        randomize_out(&r, &mut s, 2);
        let f = features(9, 16, 32);
        let g = gaze(9, 32);
        let mut t = Tape::new();
        let bias = r.gaze_bias(&mut t, &s, Gaze::Vector(&g)).unwrap();
        let bias_m = t.value(bias).clone();
        let res = r.forward_with_bias(&mut t, &s, &f, bias).unwrap().residual;
        let out = t.value(res).clone();
        let perm: Vec<usize> = (0..16).rev().collect();
        let mut t2 = Tape::new();
        let pb = t2.constant(bias_m.select(Axis(0), &perm));
        let res2 = r
            .forward_with_bias(&mut t2, &s, &f.select(Axis(0), &perm), pb)
            .unwrap()
            .residual;
        let out2 = t2.value(res2).clone();
        let err = (&out.select(Axis(0), &perm) - &out2)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "{err}");
    }

    fn fd_check(scheme: GazeScheme) {
        let mut cfg = ResamplerConfig::new(6, 8, 5, 2, 2, scheme);
        cfg.latents = 4;
        let r = Resampler::new(cfg, "r").unwrap();
        let mut s = ParamStore::new();
        r.init(&mut s, 3);
        randomize_out(&r, &mut s, 4);
        s.set_trainable(|_| true);
        let f = features(1, 4, 6);
        let path = Scanpath::new(vec![
            Fixation::new(0.2, 0.3, 0.5, 1.0).unwrap(),
            Fixation::new(0.7, 0.6, 1.2, 0.6).unwrap(),
        ])
        .unwrap();
        let gz = Gaze::Scanpath {
            path: &path,
            frame_time: 1.4,
        };
        let loss_of = |s: &ParamStore| {
            let mut t = Tape::new();
            let out = r.forward(&mut t, s, &f, gz).unwrap();
            let l = t.sum_squares(out);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let out = r.forward(&mut t, &s, &f, gz).unwrap();
        let l = t.sum_squares(out);
        let grads = t.param_grads(&t.backward(l));
        assert_eq!(grads.len(), r.param_names().len());
        let h = 1e-5;
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let (i, j) = (idx / g.ncols(), idx % g.ncols());
                let mut sp = s.clone();
                sp.get_mut(name).unwrap()[[i, j]] += h;
                let mut sm = s.clone();
                sm.get_mut(name).unwrap()[[i, j]] -= h;
                let num = (loss_of(&sp) - loss_of(&sm)) / (2.0 * h);
                let a = g[[i, j]];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i},{j}] analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_coord() {
        fd_check(GazeScheme::CoordPe);
    }

    #[test]
    fn gradients_match_finite_differences_heatmap_tau() {
        fd_check(GazeScheme::HeatmapTau);
    }

    #[test]
    fn shape_errors_are_reported() {
        let (r, s) = setup(GazeScheme::CoordPe);
        let mut t = Tape::new();
        let g = vec![0.0; 32];
        assert!(matches!(
            r.forward(&mut t, &s, &features(0, 15, 32), Gaze::Vector(&g)),
            Err(Error::Shape(_))
        ));
        let short = vec![0.0; 31];
        assert!(r
            .forward(&mut t, &s, &features(0, 16, 32), Gaze::Vector(&short))
            .is_err());
        assert!(r
            .forward(&mut t, &s, &features(0, 16, 32), Gaze::Heatmap(&[0.0; 16]))
            .is_err());
    }
}
