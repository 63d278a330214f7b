//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the recipe for propagating gradients back to its inputs.
//! Leaves are either named parameters (borrowed from a
//! [`ParamStore`](crate::params::ParamStore), no copy) or constants.
//! Nodes whose inputs all have `requires_grad == false` are skipped during
//! the backward sweep, so a frozen host only pays for input gradients on
//! the path between the loss and the trainable tensors.
//!
//! All values are row-major `f64` matrices; vectors are `1 x n` rows.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` with `b` a `1 x n` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// `a * s` with `s` a `1 x 1` node.
    ScaleBy(Var, Var),
    /// Row softmax; the stored node value is the output.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    AddRowsAt {
        base: Var,
        delta: Var,
        start: usize,
    },
    /// Value computed outside the tape from a `1 x 1` input, with its
    /// elementwise derivative supplied alongside.
    ScalarMap {
        input: Var,
        deriv: Mat,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: usize,
    },
    SumSquares(Var),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named parameter leaf. Registering the same name twice returns the
    /// first node, so shared parameters accumulate a single gradient.
    pub fn param(&mut self, name: &str, value: &'a Mat, requires_grad: bool) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Leaf, requires_grad);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Unnamed leaf that can still receive a gradient (used by tests and
    /// by callers that differentiate with respect to an input).
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be 1 x n");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(v), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Scale(a, c), rg)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by: scalar must be 1 x 1");
        let v = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(Cow::Owned(v), Op::ScaleBy(a, s), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for
    /// `j > i + offset`, where `offset = cols - rows` (queries are the
    /// trailing rows of the key sequence).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let offset = m.saturating_sub(n);
        let mut y = Mat::zeros((n, m));
        for i in 0..n {
            let lim = if causal { (i + offset + 1).min(m) } else { m };
            let row = x.row(i);
            let mx = row.iter().take(lim).fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut sum = 0.0;
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                y[[i, j]] = e;
                sum += e;
            }
            for j in 0..lim {
                y[[i, j]] /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(y), Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        let mut y = Mat::zeros((n, d));
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[[i, j]] = h;
                y[[i, j]] = h * g[[0, j]] + b[[0, j]];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Cow::Owned(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Gelu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::SliceCols(a, start), rg)
    }

    /// `base` with `delta` added to rows `start..start + delta.rows`.
    /// Rows outside that range are copied bit-for-bit.
    pub fn add_rows_at(&mut self, base: Var, delta: Var, start: usize) -> Var {
        let (dr, dc) = self.shape(delta);
        assert_eq!(dc, self.shape(base).1, "add_rows_at: width mismatch");
        let mut v = self.value(base).clone();
        {
            let mut window = v.slice_mut(s![start..start + dr, ..]);
            window += self.value(delta);
        }
        let rg = self.rg(base) || self.rg(delta);
        self.push(Cow::Owned(v), Op::AddRowsAt { base, delta, start }, rg)
    }

    /// Node whose value `f(s)` was computed by the caller from the `1 x 1`
    /// input `s`; `deriv` holds `df/ds` elementwise.
    pub fn scalar_map(&mut self, input: Var, value: Mat, deriv: Mat) -> Var {
        assert_eq!(self.shape(input), (1, 1));
        assert_eq!(value.dim(), deriv.dim());
        let rg = self.rg(input);
        self.push(Cow::Owned(value), Op::ScalarMap { input, deriv }, rg)
    }

    /// `-log softmax(logits)[target]` for a `1 x k` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), 1, "cross_entropy expects a single row");
        let mx = l.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let loss = sum.ln() + mx - l[[0, target]];
        let rg = self.rg(logits);
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), loss)),
            Op::CrossEntropy { logits, probs, target },
            rg,
        )
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(a);
        self.push(Cow::Owned(Mat::from_elem((1, 1), v)), Op::SumSquares(a), rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.value(root).raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let da = g.dot(self.value(*b));
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = g.t().dot(self.value(*a));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::ScaleBy(a, sc) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*sc));
                }
                if self.rg(*sc) {
                    let ds = (g * self.value(*a)).sum();
                    self.accumulate(grads, *sc, Mat::from_elem((1, 1), ds));
                }
            }
            Op::Softmax(a) => {
                let mut dx = g * out;
                for (mut row, yrow) in dx.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&yrow, |d, &y| *d -= y * dot);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*gain) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let (n, d) = g.dim();
                    let mut dx = Mat::zeros((n, d));
                    for i in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[[i, j]] * gv[[0, j]];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[[i, j]];
                        }
                        let k = inv_std[i] / d as f64;
                        for j in 0..d {
                            let dh = g[[i, j]] * gv[[0, j]];
                            dx[[i, j]] = k * (d as f64 * dh - sum_dh - xhat[[i, j]] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let mut dx = self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                });
                dx *= g;
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![r..r + n, ..]).to_owned());
                    }
                    r += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., c..c + n]).to_owned());
                    }
                    c += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut da = Mat::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let mut da = Mat::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::AddRowsAt { base, delta, start } => {
                self.accumulate(grads, *base, g.clone());
                if self.rg(*delta) {
                    let n = self.shape(*delta).0;
                    self.accumulate(grads, *delta, g.slice(s![*start..*start + n, ..]).to_owned());
                }
            }
            Op::ScalarMap { input, deriv } => {
                let ds = (g * deriv).sum();
                self.accumulate(grads, *input, Mat::from_elem((1, 1), ds));
            }
            Op::CrossEntropy { logits, probs, target } => {
                let up = g[[0, 0]];
                let mut dl = Mat::zeros((1, probs.len()));
                for (j, p) in probs.iter().enumerate() {
                    dl[[0, j]] = up * (p - if j == *target { 1.0 } else { 0.0 });
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SumSquares(a) => {
                let up = g[[0, 0]];
                self.accumulate(grads, *a, self.value(*a) * (2.0 * up));
            }
        }
    }

    /// Gradients of every named parameter that required one.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter(|(_, v)| self.rg(*v))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(*v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Names of the parameters registered on this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }
}
