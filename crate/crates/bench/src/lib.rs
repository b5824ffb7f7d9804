//! Shared inputs for the benchmarks.

use citrack::config::ExperimentConfig;
use citrack::continual::{build_batch, build_world, WorldSplits};
use citrack::losses::TrainBatch;
use citrack::model::TrackingModel;
use citrack::rng::substream;

/// The default world with its detector noise.
pub fn default_world() -> WorldSplits {
    build_world(&ExperimentConfig::default()).expect("default config is valid")
}

/// A freshly initialized model over every class of the default world.
pub fn fresh_model() -> TrackingModel {
    let cfg = ExperimentConfig::default();
    let t = &cfg.training;
    TrackingModel::init(cfg.world.feature_dim, t.hidden_dim, t.embed_dim, (0..cfg.world.n_classes).collect(), &mut substream(0, 0))
}

/// One training batch of `pairs` adjacent frame pairs from the first sequence.
pub fn training_batch(world: &WorldSplits, model: &TrackingModel, pairs: usize) -> TrainBatch {
    let idx: Vec<(usize, usize)> = (0..pairs).map(|t| (0, t)).collect();
    build_batch(model, &world.train, &idx).expect("batch builds")
}

/// Square similarity matrix with a deterministic pseudo-random pattern.
pub fn similarity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0).collect()).collect()
}
