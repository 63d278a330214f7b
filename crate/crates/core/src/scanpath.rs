//! Gaze scanpaths and their fixed-size encodings.
//!
//! A fixation is active at frame time `t` when `|t - t_i| <= dur_i / 2`.
//! The active set is mapped to a `d_l` vector by averaging a sinusoidal
//! coordinate encoding, or the causal fixation history is rasterised into
//! a Gaussian heatmap over the feature grid.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    /// Midpoint timestamp in seconds.
    pub t: f64,
    /// Duration in seconds.
    pub dur: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64, t: f64, dur: f64) -> Result<Self> {
        let f = Fixation { x, y, t, dur };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(Error::InputDomain(format!(
                "fixation coordinate ({}, {}) outside [0,1]",
                self.x, self.y
            )));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::InputDomain(format!("fixation time {} < 0", self.t)));
        }
        if !(self.dur > 0.0 && self.dur.is_finite()) {
            return Err(Error::InputDomain(format!(
                "fixation duration {} must be positive",
                self.dur
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, frame_time: f64) -> bool {
        (frame_time - self.t).abs() <= self.dur / 2.0
    }
}

/// Fixations ordered by midpoint time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    fixations: Vec<Fixation>,
}

impl Scanpath {
    /// Validates every fixation and sorts by `t` (stable for equal times).
    pub fn new(mut fixations: Vec<Fixation>) -> Result<Self> {
        for f in &fixations {
            f.validate()?;
        }
        fixations.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Scanpath { fixations })
    }

    pub fn empty() -> Self {
        Scanpath::default()
    }

    pub fn fixations(&self) -> &[Fixation] {
        &self.fixations
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeScheme {
    CoordPe,
    HeatmapTau,
    HeatmapDur,
}

impl GazeScheme {
    pub const ALL: [GazeScheme; 3] = [GazeScheme::CoordPe, GazeScheme::HeatmapTau, GazeScheme::HeatmapDur];

    pub fn name(self) -> &'static str {
        match self {
            GazeScheme::CoordPe => "coord_pe",
            GazeScheme::HeatmapTau => "heatmap_tau",
            GazeScheme::HeatmapDur => "heatmap_dur",
        }
    }

    pub fn is_heatmap(self) -> bool {
        !matches!(self, GazeScheme::CoordPe)
    }
}

impl fmt::Display for GazeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GazeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GazeScheme::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gaze scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeEncodingConfig {
    pub scheme: GazeScheme,
    pub d_l: usize,
    pub sigma: f64,
    pub tau_init: f64,
}

impl GazeEncodingConfig {
    pub fn new(scheme: GazeScheme, d_l: usize) -> Self {
        GazeEncodingConfig {
            scheme,
            d_l,
            sigma: 0.05,
            tau_init: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_l == 0 || self.d_l % 4 != 0 {
            return Err(Error::Config(format!(
                "gaze d_l = {} must be a positive multiple of 4",
                self.d_l
            )));
        }
        if !(self.sigma > 0.0) || !(self.tau_init > 0.0) {
            return Err(Error::Config("sigma and tau_init must be positive".into()));
        }
        Ok(())
    }
}

/// Fixations active at `frame_time`, in path order.
pub fn active_set(path: &Scanpath, frame_time: f64) -> Vec<Fixation> {
    path.fixations
        .iter()
        .filter(|f| f.is_active(frame_time))
        .copied()
        .collect()
}

/// Sinusoidal encoding of a normalised point: `x` fills the first half,
/// `y` the second, each as `d_l / 4` (sin, cos) pairs.
pub fn encode_coord_pe(x: f64, y: f64, d_l: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::InputDomain(format!("coordinate ({x}, {y}) outside [0,1]")));
    }
    if d_l == 0 || d_l % 4 != 0 {
        return Err(Error::Config(format!("d_l = {d_l} not divisible by 4")));
    }
    let half = d_l / 2;
    let mut out = Vec::with_capacity(d_l);
    for c in [x, y] {
        for k in 0..half / 2 {
            let f = 2.0 * PI * c / 10000f64.powf(2.0 * k as f64 / half as f64);
            out.push(f.sin());
            out.push(f.cos());
        }
    }
    Ok(out)
}

/// Centre of cell `p` (row-major) of an `h x w` grid, as `(x, y)`.
pub fn cell_center(p: usize, h: usize, w: usize) -> (f64, f64) {
    let (row, col) = (p / w, p % w);
    ((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64)
}

/// Mean Coord-PE of the active fixations, zero when none is active.
pub fn gaze_vector(path: &Scanpath, frame_time: f64, cfg: &GazeEncodingConfig) -> Result<Vec<f64>> {
    let active = active_set(path, frame_time);
    let mut g = vec![0.0; cfg.d_l];
    if active.is_empty() {
        return Ok(g);
    }
    for f in &active {
        for (acc, v) in g.iter_mut().zip(encode_coord_pe(f.x, f.y, cfg.d_l)?) {
            *acc += v;
        }
    }
    let n = active.len() as f64;
    for v in &mut g {
        *v /= n;
    }
    Ok(g)
}

fn gaussian_bumps(path: &Scanpath, frame_time: f64, h: usize, w: usize, sigma: f64) -> Vec<(Fixation, Vec<f64>)> {
    let denom = 2.0 * sigma * sigma;
    path.fixations
        .iter()
        .filter(|f| f.t <= frame_time)
        .map(|f| {
            let bump = (0..h * w)
                .map(|p| {
                    let (cx, cy) = cell_center(p, h, w);
                    (-((cx - f.x).powi(2) + (cy - f.y).powi(2)) / denom).exp()
                })
                .collect();
            (*f, bump)
        })
        .collect()
}

/// Causal Gaussian heatmap over an `h x w` grid, max-normalised to peak 1.
///
/// `tau` is only read by [`GazeScheme::HeatmapTau`]. For the Coord-PE
/// scheme this returns an input-domain error.
pub fn gaze_heatmap(
    path: &Scanpath,
    frame_time: f64,
    h: usize,
    w: usize,
    cfg: &GazeEncodingConfig,
    tau: f64,
) -> Result<Vec<f64>> {
    match cfg.scheme {
        GazeScheme::CoordPe => Err(Error::InputDomain(
            "gaze_heatmap called with the coord_pe scheme".into(),
        )),
        GazeScheme::HeatmapTau => Ok(heatmap_tau_with_grad(path, frame_time, h, w, cfg.sigma, tau).0),
        GazeScheme::HeatmapDur => {
            if h == 0 || w == 0 {
                return Err(Error::InputDomain("heatmap grid must be non-empty".into()));
            }
            let mut out = vec![0.0; h * w];
            for (f, bump) in gaussian_bumps(path, frame_time, h, w, cfg.sigma) {
                for (o, b) in out.iter_mut().zip(bump) {
                    *o += f.dur * b;
                }
            }
            normalize_peak(&mut out);
            Ok(out)
        }
    }
}

fn normalize_peak(v: &mut [f64]) {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for x in v {
            *x /= m;
        }
    }
}

/// Decayed heatmap together with its elementwise derivative in `tau`.
pub fn heatmap_tau_with_grad(
    path: &Scanpath,
    frame_time: f64,
    h: usize,
    w: usize,
    sigma: f64,
    tau: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut raw = vec![0.0; n];
    let mut draw = vec![0.0; n];
    for (f, bump) in gaussian_bumps(path, frame_time, h, w, sigma) {
        let age = frame_time - f.t;
        let wgt = (-age / tau).exp();
        let dw = wgt * age / (tau * tau);
        for p in 0..n {
            raw[p] += wgt * bump[p];
            draw[p] += dw * bump[p];
        }
    }
    let Some((imax, &m)) = raw
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .filter(|(_, &m)| m > 0.0)
    else {
        return (raw, vec![0.0; n]);
    };
    let dm = draw[imax];
    let out = raw.iter().map(|r| r / m).collect();
    let dout = raw
        .iter()
        .zip(&draw)
        .map(|(r, dr)| (dr * m - r * dm) / (m * m))
        .collect();
    (out, dout)
}

/// Reads the line format `video_id<TAB>x y t dur;x y t dur;...`.
///
/// Lines sharing a video id are merged; a fixation repeated verbatim
/// within one video is rejected.
pub fn load_scanpaths<R: BufRead>(source: R) -> Result<BTreeMap<String, Scanpath>> {
    let mut raw: BTreeMap<String, Vec<Fixation>> = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let body = line.split('#').next().unwrap_or("");
        if body.trim().is_empty() {
            continue;
        }
        let (vid, rest) = body.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing TAB after video id".into(),
        })?;
        let vid = vid.trim();
        if vid.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty video id".into(),
            });
        }
        let entry = raw.entry(vid.to_string()).or_default();
        for rec in rest.split(';').map(str::trim).filter(|r| !r.is_empty()) {
            let fields: Vec<&str> = rec.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 4 fields, found {} in `{rec}`", fields.len()),
                });
            }
            let mut vals = [0.0; 4];
            for (v, s) in vals.iter_mut().zip(&fields) {
                *v = s.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("`{s}` is not a number"),
                })?;
            }
            let fix = Fixation::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            if entry.contains(&fix) {
                return Err(Error::DuplicateFixation(vid.to_string()));
            }
            entry.push(fix);
        }
    }
    raw.into_iter().map(|(k, v)| Ok((k, Scanpath::new(v)?))).collect()
}

/// Writes scanpaths in the format read by [`load_scanpaths`]. Numbers use
/// the shortest representation that parses back to the same `f64`.
pub fn write_scanpaths<W: Write>(mut out: W, paths: &BTreeMap<String, Scanpath>) -> std::io::Result<()> {
    for (vid, path) in paths {
        let recs: Vec<String> = path
            .fixations
            .iter()
            .map(|f| format!("{} {} {} {}", f.x, f.y, f.t, f.dur))
            .collect();
        writeln!(out, "{vid}\t{}", recs.join(";"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fx(x: f64, y: f64, t: f64, dur: f64) -> Fixation {
        Fixation::new(x, y, t, dur).unwrap()
    }

    #[test]
    fn active_boundary_is_inclusive() {
        let p = Scanpath::new(vec![fx(0.5, 0.5, 2.0, 1.0)]).unwrap();
        assert_eq!(active_set(&p, 2.5).len(), 1);
        assert!(active_set(&p, 2.6).is_empty());
        assert!(active_set(&Scanpath::empty(), 3.0).is_empty());
    }

    #[test]
    fn pe_at_origin() {
        let v = encode_coord_pe(0.0, 0.0, 16).unwrap();
        for pair in v.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn pe_golden_vector() {
        let golden = [
            1.2246467991473532e-16,
            -1.0,
            0.03141075907812829,
            0.9995065603657316,
            1.0,
            6.123233995736766e-17,
            0.015707317311820675,
            0.9998766324816606,
        ];
        let v = encode_coord_pe(0.5, 0.25, 8).unwrap();
        for (a, b) in v.iter().zip(golden) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn pe_rejects_out_of_range() {
        assert!(matches!(encode_coord_pe(1.5, 0.0, 8), Err(Error::InputDomain(_))));
        assert!(encode_coord_pe(0.5, 0.5, 6).is_err());
    }

    #[test]
    fn pe_norm_on_grid() {
        for i in 0..5 {
            for j in 0..5 {
                let v = encode_coord_pe(i as f64 / 4.0, j as f64 / 4.0, 32).unwrap();
                let n2: f64 = v.iter().map(|x| x * x).sum();
                assert!((n2 - 16.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaze_vector_cases() {
        let cfg = GazeEncodingConfig::new(GazeScheme::CoordPe, 8);
        assert_eq!(gaze_vector(&Scanpath::empty(), 1.0, &cfg).unwrap(), vec![0.0; 8]);

        let twin = Scanpath::new(vec![fx(0.3, 0.7, 1.0, 1.0), fx(0.3, 0.7, 1.1, 1.0)]).unwrap();
        assert_eq!(
            gaze_vector(&twin, 1.0, &cfg).unwrap(),
            encode_coord_pe(0.3, 0.7, 8).unwrap()
        );

        let corners = Scanpath::new(vec![fx(0.0, 0.0, 1.0, 1.0), fx(1.0, 1.0, 1.0, 1.0)]).unwrap();
        let golden = [
            -1.2246467991473532e-16,
            1.0,
            0.03139525976465669,
            0.9990133642141358,
            -1.2246467991473532e-16,
            1.0,
            0.03139525976465669,
            0.9990133642141358,
        ];
        let g = gaze_vector(&corners, 1.0, &cfg).unwrap();
        for (a, b) in g.iter().zip(golden) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn heatmap_cases() {
        let dur = GazeEncodingConfig::new(GazeScheme::HeatmapDur, 8);
        let p = Scanpath::new(vec![fx(0.375, 0.125, 1.0, 1.0)]).unwrap();
        assert_eq!(gaze_heatmap(&p, 0.5, 4, 4, &dur, 2.0).unwrap(), vec![0.0; 16]);
        let h = gaze_heatmap(&p, 1.0, 4, 4, &dur, 2.0).unwrap();
        assert_eq!(h[1], 1.0);
        assert!(h.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // tau -> infinity recovers the unweighted sum
        let tau = GazeEncodingConfig::new(GazeScheme::HeatmapTau, 8);
        let two = Scanpath::new(vec![fx(0.1, 0.2, 0.5, 0.3), fx(0.8, 0.6, 1.5, 0.3)]).unwrap();
        let got = gaze_heatmap(&two, 3.0, 4, 4, &tau, 1e12).unwrap();
        let mut want: Vec<f64> = (0..16)
            .map(|p| {
                let (cx, cy) = cell_center(p, 4, 4);
                two.fixations()
                    .iter()
                    .map(|f| (-((cx - f.x).powi(2) + (cy - f.y).powi(2)) / (2.0 * 0.05 * 0.05)).exp())
                    .sum()
            })
            .collect();
        normalize_peak(&mut want);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(gaze_heatmap(&two, 3.0, 4, 4, &GazeEncodingConfig::new(GazeScheme::CoordPe, 8), 1.0).is_err());
    }

    #[test]
    fn heatmap_tau_derivative_matches_differences() {
        let p = Scanpath::new(vec![
            fx(0.1, 0.2, 0.5, 0.3),
            fx(0.8, 0.6, 1.5, 0.3),
            fx(0.4, 0.4, 2.0, 0.3),
        ])
        .unwrap();
        let tau = 1.7;
        let (_, d) = heatmap_tau_with_grad(&p, 2.5, 4, 4, 0.2, tau);
        let e = 1e-6;
        let (hp, _) = heatmap_tau_with_grad(&p, 2.5, 4, 4, 0.2, tau + e);
        let (hm, _) = heatmap_tau_with_grad(&p, 2.5, 4, 4, 0.2, tau - e);
        for i in 0..16 {
            let num = (hp[i] - hm[i]) / (2.0 * e);
            assert!((num - d[i]).abs() < 1e-7, "cell {i}: {num} vs {}", d[i]);
        }
    }

    #[test]
    fn loader_merges_sorts_and_reports_lines() {
        let src = "# header\nv1\t0.1 0.1 3.0 0.5;0.2 0.2 1.0 0.5\nv1\t0.3 0.3 2.0 0.5\n";
        let m = load_scanpaths(src.as_bytes()).unwrap();
        assert_eq!(m.len(), 1);
        let ts: Vec<f64> = m["v1"].fixations().iter().map(|f| f.t).collect();
        assert_eq!(ts, vec![1.0, 2.0, 3.0]);

        let bad = "a\t0.1 0.1 1 1\nb\t0.1 0.1 1 1\nc\t1.5 0.1 1 1\n";
        match load_scanpaths(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_scanpaths("a\t0.1 0.1 1 1\na\t0.1 0.1 1 1\n".as_bytes()),
            Err(Error::DuplicateFixation(_))
        ));
        assert!(load_scanpaths("a\t0.1 0.1 1\n".as_bytes()).is_err());
        assert!(load_scanpaths("a\t0.1 zz 1 1\n".as_bytes()).is_err());
    }

    #[test]
    fn writer_round_trips() {
        let mut m = BTreeMap::new();
        m.insert(
            "v".to_string(),
            Scanpath::new(vec![fx(0.1 + 0.2, 1.0 / 3.0, 0.75, 0.3)]).unwrap(),
        );
        m.insert("empty".to_string(), Scanpath::empty());
        let mut buf = Vec::new();
        write_scanpaths(&mut buf, &m).unwrap();
        assert_eq!(load_scanpaths(buf.as_slice()).unwrap(), m);
    }

    fn arb_fixation() -> impl Strategy<Value = Fixation> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..10.0f64, 0.01..3.0f64)
            .prop_map(|(x, y, t, d)| Fixation::new(x, y, t, d).unwrap())
    }

    proptest! {
        #[test]
        fn active_set_matches_predicate(fs in prop::collection::vec(arb_fixation(), 0..12), ft in 0.0..10.0f64) {
            let p = Scanpath::new(fs).unwrap();
            let a = active_set(&p, ft);
            let want: Vec<Fixation> = p.fixations().iter().filter(|f| (ft - f.t).abs() <= f.dur / 2.0).copied().collect();
            prop_assert_eq!(a, want);
        }

        #[test]
        fn gaze_vector_is_permutation_invariant(fs in prop::collection::vec(arb_fixation(), 1..8), ft in 0.0..10.0f64) {
            let cfg = GazeEncodingConfig::new(GazeScheme::CoordPe, 16);
            let fwd = gaze_vector(&Scanpath::new(fs.clone()).unwrap(), ft, &cfg).unwrap();
            let mut rev = fs;
            rev.reverse();
            let bwd = gaze_vector(&Scanpath::new(rev).unwrap(), ft, &cfg).unwrap();
            for (a, b) in fwd.iter().zip(&bwd) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn single_fixation_gaze_equals_pe(f in arb_fixation(), n in 1usize..4) {
            let cfg = GazeEncodingConfig::new(GazeScheme::CoordPe, 16);
            let p = Scanpath::new(vec![f; n]).unwrap();
            let g = gaze_vector(&p, f.t, &cfg).unwrap();
            let pe = encode_coord_pe(f.x, f.y, 16).unwrap();
            for (a, b) in g.iter().zip(&pe) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn heatmaps_nonnegative_and_zero_iff_empty(fs in prop::collection::vec(arb_fixation(), 0..6), ft in 0.0..10.0f64, dur in any::<bool>()) {
            let scheme = if dur { GazeScheme::HeatmapDur } else { GazeScheme::HeatmapTau };
            let cfg = GazeEncodingConfig::new(scheme, 8);
            let p = Scanpath::new(fs).unwrap();
            let h = gaze_heatmap(&p, ft, 4, 4, &cfg, 2.0).unwrap();
            prop_assert!(h.iter().all(|&v| v >= 0.0));
            let any_past = p.fixations().iter().any(|f| f.t <= ft);
            prop_assert_eq!(h.iter().any(|&v| v > 0.0), any_past);
        }

        #[test]
        fn pe_is_continuous(x in 0.0..0.99f64, y in 0.0..=1.0f64) {
            let base = encode_coord_pe(x, y, 16).unwrap();
            let mut prev = f64::INFINITY;
            for eps in [1e-2, 1e-3, 1e-4] {
                let v = encode_coord_pe(x + eps, y, 16).unwrap();
                let d: f64 = base.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(d <= 2.0 * std::f64::consts::PI * eps * 4.0);
                prop_assert!(d <= prev);
                prev = d;
            }
        }
    }
}
