//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. A minimal file:
//!
//! ```toml
//! [world]
//! seed = 3
//!
//! [training]
//! epochs = 6
//!
//! [plan]
//! split = "gs"          # "ml", "gs" or "semantic"
//! method = "cooler"     # "cooler", "finetune", "detpl" or "oracle"
//! ```
//!
//! With `split = "semantic"` the stage groups are given explicitly:
//! `groups = [[0, 3], [1, 2], [4, 5]]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassSet};
use crate::error::{Error, Result};
use crate::labels::{Method, StagePlan};
use crate::losses::{ContrastiveConfig, QueueConfig};
use crate::simworld::{NoiseConfig, WorldConfig};
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Adjacent frame pairs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Confidence a detection must exceed to become a detection pseudo-label.
    pub det_pl_tau: f64,
    /// Gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 6, base_lr: 0.02, batch_size: 8, seed: 0, hidden_dim: 64, embed_dim: 16, det_pl_tau: 0.7, max_grad_norm: 5.0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("epochs, batch_size, hidden_dim and embed_dim must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.det_pl_tau) {
            return Err(Error::Config("det_pl_tau must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// One class per stage, most frequent first.
    Ml,
    /// The more frequent half, then the rest.
    Gs,
    /// Explicit groups.
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub split: Split,
    pub method: Method,
    pub groups: Vec<Vec<ClassId>>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { split: Split::Gs, method: Method::Cooler, groups: Vec::new() }
    }
}

/// Classes ordered by descending frequency; ties keep the lower id first.
fn by_frequency(freqs: &[f64]) -> Vec<ClassId> {
    let mut order: Vec<ClassId> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].total_cmp(&freqs[a]));
    order
}

pub fn most_to_least(freqs: &[f64], method: Method) -> Result<StagePlan> {
    StagePlan::new(by_frequency(freqs).into_iter().map(|c| ClassSet::from([c])).collect(), method)
}

pub fn general_to_specific(freqs: &[f64], method: Method) -> Result<StagePlan> {
    let order = by_frequency(freqs);
    let half = order.len().div_ceil(2);
    StagePlan::new(vec![order[..half].iter().copied().collect(), order[half..].iter().copied().collect()], method)
}

pub fn semantic(groups: &[Vec<ClassId>], method: Method) -> Result<StagePlan> {
    StagePlan::new(groups.iter().map(|g| g.iter().copied().collect()).collect(), method)
}

impl PlanConfig {
    pub fn build(&self, world: &WorldConfig) -> Result<StagePlan> {
        let plan = match self.split {
            Split::Ml => most_to_least(&world.class_frequencies, self.method)?,
            Split::Gs => general_to_specific(&world.class_frequencies, self.method)?,
            Split::Semantic => semantic(&self.groups, self.method)?,
        };
        if let Some(c) = plan.all_classes().iter().find(|&&c| c >= world.n_classes) {
            return Err(Error::Plan(format!("class {c} does not exist in a {}-class world", world.n_classes)));
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub noise: NoiseConfig,
    pub tracker: TrackerConfig,
    pub contrastive: ContrastiveConfig,
    pub queue: QueueConfig,
    pub training: TrainingConfig,
    pub plan: PlanConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.noise.validate()?;
        self.tracker.validate()?;
        self.contrastive.validate()?;
        self.training.validate()?;
        self.contrastive.prior_sigma(self.training.embed_dim)?;
        if self.queue.capacity == 0 || !(0.0..=1.0).contains(&self.queue.eta) {
            return Err(Error::Config("queue capacity must be positive and eta in [0,1]".into()));
        }
        self.plan.build(&self.world)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("config {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn stage_plan(&self) -> Result<StagePlan> {
        self.plan.build(&self.world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_splits() {
        let freqs = WorldConfig::default().class_frequencies;
        let ml = most_to_least(&freqs, Method::Cooler).unwrap();
        assert_eq!(ml.stages, (0..6).map(|c| ClassSet::from([c])).collect::<Vec<_>>());
        let gs = general_to_specific(&freqs, Method::Cooler).unwrap();
        assert_eq!(gs.stages, vec![ClassSet::from([0, 1, 2]), ClassSet::from([3, 4, 5])]);
        assert_eq!(most_to_least(&[1.0, 5.0, 3.0], Method::Oracle).unwrap().stages[0], ClassSet::from([1]));
    }

    #[test]
    fn overlapping_groups_rejected() {
        assert!(matches!(semantic(&[vec![0, 2], vec![2, 1]], Method::Cooler), Err(Error::Plan(_))));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("[world]\nseed = 5\n[plan]\nmethod = \"detpl\"\n").unwrap();
        assert_eq!(partial.world.seed, 5);
        assert_eq!(partial.plan.method, Method::DetPl);
        assert_eq!(partial.training, TrainingConfig::default());
        assert!(matches!(ExperimentConfig::from_toml("[world]\nsed = 5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[bogus]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn semantic_plan_from_config() {
        let text = "[plan]\nsplit = \"semantic\"\ngroups = [[0, 3], [1, 2], [4, 5]]\n";
        let plan = ExperimentConfig::from_toml(text).unwrap().stage_plan().unwrap();
        assert_eq!(plan.stages.len(), 3);
        assert!(ExperimentConfig::from_toml("[plan]\nsplit = \"semantic\"\ngroups = [[0, 9]]\n").is_err());
    }
}
