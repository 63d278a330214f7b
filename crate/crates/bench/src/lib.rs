//! Shared fixtures for the benchmarks.

use gazesteer::data::{Corpus, FeatureSpec};
use gazesteer::host::ResamplerSharing;
use gazesteer::model::{Model, ModelConfig};
use gazesteer::scanpath::GazeScheme;
use gazesteer::synthvideo::FeatureMode;
use gazesteer::taskgen::{gen_dataset, DatasetConfig, TaskMix};
use gazesteer::train::gradcheck::randomize_zero_init;

/// A desk-size model with nonzero output projections and a small
/// three-task corpus.
pub fn fixture(scheme: GazeScheme) -> (Model, Corpus) {
    let cfg = ModelConfig::new(scheme, ResamplerSharing::PerLayer);
    let mut model = Model::new(cfg.clone(), 1).expect("model");
    randomize_zero_init(&mut model.store, 0.05, 2).expect("randomize");
    let dcfg = DatasetConfig {
        seed: 1,
        n_videos: 7,
        items_per_video: 12,
        mix: TaskMix::uniform(),
        ..DatasetConfig::default()
    };
    let dataset = gen_dataset(&dcfg, cfg.tokens_per_frame(), cfg.host.vocab_size).expect("dataset");
    let corpus = Corpus::build(dataset, FeatureSpec::for_model(&cfg, FeatureMode::Temporal, 1)).expect("corpus");
    (model, corpus)
}
