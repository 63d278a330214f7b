//! Gaze-steered resampler injection into a frozen decoder.
//!
//! `host` runs the decoder and calls an attached [`host::LayerHook`] after
//! every layer; `host::GazeInjector` is the hook that adds resampler output
//! to the visual rows. `taskgen` and `synthvideo` build gaze-dependent
//! questions, `train` fits the injector (stage 1) and LoRA (stage 2).

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod host;
pub mod model;
pub mod params;
pub mod resampler;
pub mod scanpath;
pub mod synthvideo;
pub mod taskgen;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
