//! Gaze residual injection at selected decoder layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{FrameInput, HookContext, LayerHook};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::resampler::{Resampler, ResamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplerSharing {
    /// One independent resampler per injected layer.
    PerLayer,
    /// A single resampler feeds every injected layer.
    Shared,
}

impl ResamplerSharing {
    pub const ALL: [ResamplerSharing; 2] = [ResamplerSharing::PerLayer, ResamplerSharing::Shared];

    pub fn name(self) -> &'static str {
        match self {
            ResamplerSharing::PerLayer => "per_layer",
            ResamplerSharing::Shared => "shared",
        }
    }
}

impl fmt::Display for ResamplerSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResamplerSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ResamplerSharing::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sharing mode `{s}`")))
    }
}

/// Adds `alpha_l · R_t` to the rows of frame `t` at every injected layer `l`.
#[derive(Clone, Debug)]
pub struct GazeInjector {
    layers: Vec<usize>,
    resamplers: Vec<Resampler>,
    sharing: ResamplerSharing,
}

impl GazeInjector {
    pub fn new(layers: &[usize], cfg: ResamplerConfig, sharing: ResamplerSharing) -> Result<Self> {
        let resamplers = layers
            .iter()
            .map(|l| match sharing {
                ResamplerSharing::PerLayer => Resampler::new(cfg, format!("resampler.{l}")),
                ResamplerSharing::Shared => Resampler::new(cfg, "resampler.shared"),
            })
            .collect::<Result<_>>()?;
        Ok(GazeInjector {
            layers: layers.to_vec(),
            resamplers,
            sharing,
        })
    }

    pub fn alpha_name(layer: usize) -> String {
        format!("inject.alpha.{layer}")
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn sharing(&self) -> ResamplerSharing {
        self.sharing
    }

    /// Resampler handles, one per distinct parameter set.
    pub fn resamplers(&self) -> &[Resampler] {
        match self.sharing {
            ResamplerSharing::PerLayer => &self.resamplers,
            ResamplerSharing::Shared => &self.resamplers[..self.resamplers.len().min(1)],
        }
    }

    pub fn resampler_for(&self, layer: usize) -> Option<&Resampler> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.resamplers[i])
    }

    /// Writes fresh resampler weights and unit amplitudes into `store`.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for (i, r) in self.resamplers().iter().enumerate() {
            r.init(store, seed.wrapping_add(i as u64 * 0x9e37_79b9));
        }
        for &l in &self.layers {
            store.insert(Self::alpha_name(l), Mat::ones((1, 1)), false);
        }
    }

    /// Unscaled residual rows of the whole visual block at `layer`.
    pub fn residual<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layer: usize,
        frames: &[FrameInput<'_>],
    ) -> Result<Var> {
        let r = self
            .resampler_for(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} is not injected")))?;
        let parts = frames
            .iter()
            .map(|f| r.forward(tape, store, f.features, f.gaze))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&parts))
    }
}

impl LayerHook for GazeInjector {
    fn after_layer<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layer: usize,
        hidden: Var,
        ctx: &HookContext<'_>,
    ) -> Result<Var> {
        if !self.layers.contains(&layer) {
            return Ok(hidden);
        }
        let (start, end) = ctx.span;
        let residual = self.residual(tape, store, layer, ctx.frames)?;
        if tape.shape(residual).0 != end - start {
            return Err(Error::Shape(format!(
                "{} frames give {} residual rows for a visual span of {}",
                ctx.frames.len(),
                tape.shape(residual).0,
                end - start
            )));
        }
        let alpha = store.leaf(tape, &Self::alpha_name(layer))?;
        let scaled = tape.scale_by(residual, alpha);
        Ok(tape.add_rows_at(hidden, scaled, start))
    }
}
