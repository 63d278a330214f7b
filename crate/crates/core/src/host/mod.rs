//! Small pre-norm decoder used as the frozen host language model.
//!
//! The sequence layout is `[visual rows][text tokens]`. Visual rows come
//! from a frozen random projection of the frame features; text rows from
//! the token table. A [`LayerHook`] registered in the [`InjectionRegistry`]
//! is called after every layer and may rewrite the hidden state; the layer
//! code itself knows nothing about gaze.

mod inject;
mod lora;

pub use inject::{GazeInjector, ResamplerSharing};
pub use lora::{init_lora, lora_names, merge_lora, LoraConfig};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, ParamStore};
use crate::resampler::Gaze;
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_mult: usize,
    /// Width of the frame features projected into visual rows.
    pub d_v: usize,
    pub injection_layers: Vec<usize>,
    pub share_resampler: bool,
    /// Standard deviation of the output-head logits at initialisation.
    pub head_std: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            max_seq: 80,
            ffn_mult: 4,
            d_v: 32,
            injection_layers: evenly_spaced_layers(8, 4),
            share_resampler: false,
            head_std: 0.3,
        }
    }
}

/// `count` layer indices ending at the last layer with equal gaps.
pub fn evenly_spaced_layers(n_layers: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|i| i * n_layers / count - 1).collect()
}

impl HostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(Error::Config("host dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if (self.vocab_size as u32) < vocab::OBJECT_BASE {
            return Err(Error::Config(format!("vocabulary of {} is too small", self.vocab_size)));
        }
        if self.injection_layers.windows(2).any(|w| w[0] >= w[1])
            || self.injection_layers.iter().any(|&l| l >= self.n_layers)
        {
            return Err(Error::Config(format!(
                "injection layers {:?} must be sorted, distinct and below {}",
                self.injection_layers, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Tensor name of a per-layer host weight.
pub fn layer_param(layer: usize, leaf: &str) -> String {
    format!("host.{layer}.{leaf}")
}

/// Writes the frozen base weights into `store`.
pub fn build_host(cfg: &HostConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let dh = cfg.ffn_mult * d;
    let lin = |rng: &mut ChaCha8Rng, r: usize, k: usize| uniform(rng, r, k, 1.0 / (r as f64).sqrt());
    store.insert("host.tok_emb", normal(&mut rng, cfg.vocab_size, d, 1.0), true);
    store.insert("host.pos_emb", normal(&mut rng, cfg.max_seq, d, 1.0), true);
    store.insert(
        "host.vis_proj",
        normal(&mut rng, cfg.d_v, d, 4.0 / (cfg.d_v as f64).sqrt()),
        true,
    );
    for l in 0..cfg.n_layers {
        let p = |leaf: &str| layer_param(l, leaf);
        store.insert(p("ln1_g"), Mat::ones((1, d)), false);
        store.insert(p("ln1_b"), Mat::zeros((1, d)), false);
        for m in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(p(m), lin(&mut rng, d, d), true);
        }
        store.insert(p("ln2_g"), Mat::ones((1, d)), false);
        store.insert(p("ln2_b"), Mat::zeros((1, d)), false);
        store.insert(p("ff1_w"), lin(&mut rng, d, dh), true);
        store.insert(p("ff1_b"), uniform(&mut rng, 1, dh, 1.0 / (d as f64).sqrt()), false);
        store.insert(p("ff2_w"), lin(&mut rng, dh, d), true);
        store.insert(p("ff2_b"), uniform(&mut rng, 1, d, 1.0 / (dh as f64).sqrt()), false);
    }
    store.insert("host.lnf_g", Mat::ones((1, d)), false);
    store.insert("host.lnf_b", Mat::zeros((1, d)), false);
    store.insert(
        "host.head",
        normal(&mut rng, d, cfg.vocab_size, cfg.head_std / (d as f64).sqrt()),
        true,
    );
    Ok(())
}

/// Half-open range of the leading run of visual placeholders, if any.
pub fn visual_span(tokens: &[u32]) -> Result<Option<(usize, usize)>> {
    let end = tokens.iter().take_while(|&&t| t == vocab::VIS).count();
    if tokens[end..].contains(&vocab::VIS) {
        return Err(Error::Shape("visual placeholders must form one leading block".into()));
    }
    Ok((end > 0).then_some((0, end)))
}

/// Half-open range of the visual block; text tokens follow it.
pub fn locate_visual_span(tokens: &[u32]) -> Result<(usize, usize)> {
    visual_span(tokens)?.ok_or(Error::NoVisualSpan)
}

/// Inputs of one frame of the visual block.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'s> {
    /// `HW x d_v` features.
    pub features: &'s Mat,
    pub gaze: Gaze<'s>,
}

/// One sequence: placeholders plus text in `tokens`, and one
/// [`FrameInput`] per frame of the visual block in temporal order.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'s> {
    pub tokens: &'s [u32],
    pub frames: &'s [FrameInput<'s>],
}

/// Context handed to a hook at a layer boundary.
pub struct HookContext<'s> {
    pub span: (usize, usize),
    pub frames: &'s [FrameInput<'s>],
}

/// Callback invoked by the host after every decoder layer.
pub trait LayerHook: Send + Sync {
    /// Returns the hidden state passed to the next layer.
    fn after_layer<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layer: usize,
        hidden: Var,
        ctx: &HookContext<'_>,
    ) -> Result<Var>;
}

/// Holds at most one attached hook.
#[derive(Clone, Default)]
pub struct InjectionRegistry {
    hook: Option<Arc<dyn LayerHook>>,
}

impl InjectionRegistry {
    pub fn attach(&mut self, hook: Arc<dyn LayerHook>) -> Result<()> {
        if self.hook.is_some() {
            return Err(Error::AlreadyAttached);
        }
        self.hook = Some(hook);
        Ok(())
    }

    pub fn detach(&mut self) -> Result<Arc<dyn LayerHook>> {
        self.hook.take().ok_or(Error::NotAttached)
    }

    pub fn is_attached(&self) -> bool {
        self.hook.is_some()
    }

    pub fn hook(&self) -> Option<&dyn LayerHook> {
        self.hook.as_deref()
    }
}

/// Tape handles of one host forward pass.
pub struct HostTrace {
    /// Hidden state entering each layer's hook.
    pub pre_hook: Vec<Var>,
    /// Hidden state after each layer's hook.
    pub hidden: Vec<Var>,
    /// `1 x vocab` logits at the final position.
    pub last_logits: Var,
    /// `n x vocab` logits, when requested.
    pub all_logits: Option<Var>,
    pub span: Option<(usize, usize)>,
}

#[derive(Clone)]
pub struct Host {
    pub cfg: HostConfig,
    pub registry: InjectionRegistry,
    /// Adapters are applied on the fly when set.
    pub lora: Option<LoraConfig>,
}

impl Host {
    pub fn new(cfg: HostConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Host {
            cfg,
            registry: InjectionRegistry::default(),
            lora: None,
        })
    }

    pub fn attach(&mut self, hook: Arc<dyn LayerHook>) -> Result<()> {
        self.registry.attach(hook)
    }

    pub fn detach(&mut self) -> Result<Arc<dyn LayerHook>> {
        self.registry.detach()
    }

    fn projection<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layer: usize,
        h: Var,
        which: &str,
    ) -> Result<Var> {
        let w = store.leaf(tape, &layer_param(layer, &format!("w_{which}")))?;
        let base = tape.matmul(h, w);
        let Some(lora) = &self.lora else {
            return Ok(base);
        };
        if which != "q" && which != "v" {
            return Ok(base);
        }
        let [a_name, b_name] = lora_names(layer, which);
        let a = store.leaf(tape, &a_name)?;
        let b = store.leaf(tape, &b_name)?;
        let down = tape.matmul(h, a);
        let up = tape.matmul(down, b);
        let delta = tape.scale(up, lora.scaling());
        Ok(tape.add(base, delta))
    }

    fn block<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, layer: usize, x: Var) -> Result<Var> {
        let p = |leaf: &str| layer_param(layer, leaf);
        let (g1, b1) = (store.leaf(tape, &p("ln1_g"))?, store.leaf(tape, &p("ln1_b"))?);
        let h = tape.layer_norm(x, g1, b1);
        let q = self.projection(tape, store, layer, h, "q")?;
        let k = self.projection(tape, store, layer, h, "k")?;
        let v = self.projection(tape, store, layer, h, "v")?;
        let hd = self.cfg.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for i in 0..self.cfg.n_heads {
            let (lo, hi) = (i * hd, (i + 1) * hd);
            let qs = tape.slice_cols(q, lo, hi);
            let ks = tape.slice_cols(k, lo, hi);
            let vs = tape.slice_cols(v, lo, hi);
            let s = tape.matmul_t(qs, ks);
            let s = tape.scale(s, inv);
            let a = tape.softmax_rows(s, true);
            heads.push(tape.matmul(a, vs));
        }
        let cat = tape.concat_cols(&heads);
        let wo = store.leaf(tape, &p("w_o"))?;
        let attn = tape.matmul(cat, wo);
        let x = tape.add(x, attn);

        let (g2, b2) = (store.leaf(tape, &p("ln2_g"))?, store.leaf(tape, &p("ln2_b"))?);
        let h = tape.layer_norm(x, g2, b2);
        let (w1, c1, w2, c2) = (
            store.leaf(tape, &p("ff1_w"))?,
            store.leaf(tape, &p("ff1_b"))?,
            store.leaf(tape, &p("ff2_w"))?,
            store.leaf(tape, &p("ff2_b"))?,
        );
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, c1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, c2);
        Ok(tape.add(x, f))
    }

    fn embed<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        seq: &SeqInput<'_>,
        span: Option<(usize, usize)>,
    ) -> Result<Var> {
        let n = seq.tokens.len();
        let d = self.cfg.d_model;
        let tok = store.get("host.tok_emb")?;
        let text_start = span.map_or(0, |s| s.1);
        let mut rows = Mat::zeros((n, d));
        for (i, &t) in seq.tokens.iter().enumerate().skip(text_start) {
            rows.row_mut(i).assign(&tok.row(t as usize));
        }
        if let Some((s0, s1)) = span {
            let mut feats = Vec::with_capacity(seq.frames.len());
            for f in seq.frames {
                feats.push(f.features.view());
            }
            let stacked = ndarray::concatenate(ndarray::Axis(0), &feats).map_err(|e| Error::Shape(e.to_string()))?;
            if stacked.nrows() != s1 - s0 || stacked.ncols() != self.cfg.d_v {
                return Err(Error::Shape(format!(
                    "visual span of {} tokens but frames supply {:?}",
                    s1 - s0,
                    stacked.dim()
                )));
            }
            let vis = stacked.dot(store.get("host.vis_proj")?);
            rows.slice_mut(ndarray::s![s0..s1, ..]).assign(&vis);
        }
        rows += &store.get("host.pos_emb")?.slice(ndarray::s![..n, ..]);
        Ok(tape.constant(rows))
    }

    /// Runs the decoder over one sequence, calling the attached hook after
    /// every layer.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        seq: &SeqInput<'_>,
        all_logits: bool,
    ) -> Result<HostTrace> {
        let n = seq.tokens.len();
        if n == 0 || n > self.cfg.max_seq {
            return Err(Error::Shape(format!(
                "sequence length {n} outside 1..={}",
                self.cfg.max_seq
            )));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token {t} outside the vocabulary")));
        }
        let span = visual_span(seq.tokens)?;
        if span.is_none() && !seq.frames.is_empty() {
            return Err(Error::NoVisualSpan);
        }
        let hook = self.registry.hook();
        if hook.is_some() && span.is_none() {
            return Err(Error::NoVisualSpan);
        }
        let mut x = self.embed(tape, store, seq, span)?;
        let mut pre_hook = Vec::with_capacity(self.cfg.n_layers);
        let mut hidden = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            x = self.block(tape, store, l, x)?;
            pre_hook.push(x);
            if let (Some(h), Some(span)) = (hook, span) {
                let ctx = HookContext {
                    span,
                    frames: seq.frames,
                };
                x = h.after_layer(tape, store, l, x, &ctx)?;
            }
            hidden.push(x);
        }
        let (gf, bf) = (store.leaf(tape, "host.lnf_g")?, store.leaf(tape, "host.lnf_b")?);
        let head = store.leaf(tape, "host.head")?;
        let last = tape.slice_rows(x, n - 1, n);
        let last = tape.layer_norm(last, gf, bf);
        let last_logits = tape.matmul(last, head);
        let all_logits = if all_logits {
            let h = tape.layer_norm(x, gf, bf);
            Some(tape.matmul(h, head))
        } else {
            None
        };
        Ok(HostTrace {
            pre_hook,
            hidden,
            last_logits,
            all_logits,
            span,
        })
    }

    /// Logits at the final position, evaluated without gradients.
    pub fn last_logits(&self, store: &ParamStore, seq: &SeqInput<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let tr = self.forward(&mut tape, store, seq, false)?;
        Ok(tape.value(tr.last_logits).iter().copied().collect())
    }
}
