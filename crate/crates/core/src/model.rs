//! Host, gaze injector and adapters bundled around one parameter store.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::host::{
    build_host, init_lora, GazeInjector, Host, HostConfig, HostTrace, LoraConfig, ResamplerSharing, SeqInput,
};
use crate::params::ParamStore;
use crate::resampler::ResamplerConfig;
use crate::scanpath::GazeScheme;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One = 1,
    Two = 2,
}

impl Stage {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    /// Whether `name` is updated during this stage.
    pub fn trains(self, name: &str) -> bool {
        let gaze = name.starts_with("resampler.") || name.starts_with("inject.alpha.");
        match self {
            Stage::One => gaze,
            Stage::Two => gaze || name.starts_with("lora."),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Preset model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    Desk,
    Compact,
}

impl ModelScale {
    pub const ALL: [ModelScale; 2] = [ModelScale::Desk, ModelScale::Compact];

    pub fn name(self) -> &'static str {
        match self {
            ModelScale::Desk => "desk",
            ModelScale::Compact => "compact",
        }
    }

    pub fn config(self, scheme: GazeScheme, sharing: ResamplerSharing) -> ModelConfig {
        match self {
            ModelScale::Desk => ModelConfig::new(scheme, sharing),
            ModelScale::Compact => ModelConfig::compact(scheme, sharing),
        }
    }
}

impl fmt::Display for ModelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelScale::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model scale `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub host: HostConfig,
    pub resampler: ResamplerConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    /// Desk defaults on a `grid x grid` token grid.
    pub fn new(scheme: GazeScheme, sharing: ResamplerSharing) -> Self {
        let host = HostConfig {
            share_resampler: sharing == ResamplerSharing::Shared,
            ..HostConfig::default()
        };
        let resampler = ResamplerConfig::new(host.d_v, 32, host.d_model, 4, 4, scheme);
        ModelConfig {
            host,
            resampler,
            lora: LoraConfig::default(),
        }
    }

    /// Half-width, half-depth host for sweeps. Injection skips the last
    /// layer, whose visual rows never reach the answer position.
    pub fn compact(scheme: GazeScheme, sharing: ResamplerSharing) -> Self {
        let host = HostConfig {
            n_layers: 4,
            d_model: 32,
            injection_layers: vec![0, 2],
            share_resampler: sharing == ResamplerSharing::Shared,
            ..HostConfig::default()
        };
        let resampler = ResamplerConfig::new(host.d_v, 16, host.d_model, 4, 4, scheme);
        ModelConfig {
            host,
            resampler,
            lora: LoraConfig::default(),
        }
    }

    /// Small configuration for finite-difference checks.
    pub fn tiny(scheme: GazeScheme) -> Self {
        let host = HostConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 40,
            max_seq: 40,
            ffn_mult: 2,
            d_v: 6,
            injection_layers: vec![0, 1],
            share_resampler: false,
            head_std: 0.3,
        };
        let mut resampler = ResamplerConfig::new(6, 8, 16, 2, 2, scheme);
        resampler.latents = 3;
        resampler.ffn_mult = 2;
        ModelConfig {
            host,
            resampler,
            lora: LoraConfig { rank: 2, alpha: 4.0 },
        }
    }

    pub fn sharing(&self) -> ResamplerSharing {
        if self.host.share_resampler {
            ResamplerSharing::Shared
        } else {
            ResamplerSharing::PerLayer
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.resampler.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        self.host.validate()?;
        self.resampler.validate()?;
        self.lora.validate(self.host.d_model)?;
        if self.resampler.d_v != self.host.d_v || self.resampler.d_llm != self.host.d_model {
            return Err(Error::Config(format!(
                "resampler maps {}->{} but the host expects {}->{}",
                self.resampler.d_v, self.resampler.d_llm, self.host.d_v, self.host.d_model
            )));
        }
        if (self.host.vocab_size as u32) < vocab::LETTER_BASE + vocab::OPTIONS as u32 {
            return Err(Error::Config("vocabulary lacks the answer letters".into()));
        }
        Ok(())
    }
}

/// Everything needed to run and train the gaze-steered host.
#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub host: Host,
    injector: Arc<GazeInjector>,
    stage: Stage,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("stage", &self.stage)
            .field("attached", &self.is_attached())
            .field("tensors", &self.store.len())
            .finish()
    }
}

impl Model {
    /// Fresh model in stage 1 with the injector attached.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        build_host(&cfg.host, seed, &mut store)?;
        let injector = GazeInjector::new(&cfg.host.injection_layers, cfg.resampler, cfg.sharing())?;
        injector.init(&mut store, seed.wrapping_add(1));
        init_lora(&mut store, &cfg.host, &cfg.lora, seed.wrapping_add(2))?;
        Self::from_store(cfg, store, Stage::One)
    }

    /// Wraps an existing parameter store, checking that every expected
    /// tensor is present with the right shape.
    pub fn from_store(cfg: ModelConfig, store: ParamStore, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let mut reference = ParamStore::new();
        build_host(&cfg.host, 0, &mut reference)?;
        let injector = GazeInjector::new(&cfg.host.injection_layers, cfg.resampler, cfg.sharing())?;
        injector.init(&mut reference, 0);
        init_lora(&mut reference, &cfg.host, &cfg.lora, 0)?;
        for (name, t) in reference.iter() {
            let got = store
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.value.dim() != t.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    got.value.dim(),
                    t.value.dim()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let mut host = Host::new(cfg.host.clone())?;
        let injector = Arc::new(injector);
        host.attach(injector.clone())?;
        let mut model = Model {
            cfg,
            store,
            host,
            injector,
            stage,
        };
        model.set_stage(stage);
        Ok(model)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Marks the stage's tensors trainable and switches adapters on for
    /// stage 2.
    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.store.set_trainable(|n| stage.trains(n));
        self.host.lora = match stage {
            Stage::One => None,
            Stage::Two => Some(self.cfg.lora),
        };
    }

    pub fn injector(&self) -> &GazeInjector {
        &self.injector
    }

    pub fn is_attached(&self) -> bool {
        self.host.registry.is_attached()
    }

    pub fn attach(&mut self) -> Result<()> {
        self.host.attach(self.injector.clone())
    }

    pub fn detach(&mut self) -> Result<()> {
        self.host.detach().map(|_| ())
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, seq: &SeqInput<'_>) -> Result<HostTrace> {
        self.host.forward(tape, store, seq, false)
    }

    /// `1 x 4` logits of the answer letters at the final position.
    pub fn answer_logits<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, seq: &SeqInput<'_>) -> Result<Var> {
        let tr = self.forward(tape, store, seq)?;
        let lo = vocab::LETTER_BASE as usize;
        Ok(tape.slice_cols(tr.last_logits, lo, lo + vocab::OPTIONS))
    }

    /// Answer logits evaluated without keeping the graph.
    pub fn predict_logits(&self, seq: &SeqInput<'_>) -> Result<[f64; vocab::OPTIONS]> {
        let mut tape = Tape::new();
        let v = self.answer_logits(&mut tape, &self.store, seq)?;
        let row = tape.value(v);
        Ok(std::array::from_fn(|i| row[[0, i]]))
    }

    /// Names of frozen host tensors.
    pub fn is_base(name: &str) -> bool {
        name.starts_with("host.")
    }
}
