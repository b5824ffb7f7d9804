use ndarray::Array2;

use super::contrastive::{contrastive_terms, ContrastiveConfig};
use super::detection::detection_loss;
use super::prototype::ClassPrototypes;
use super::track::{track_contrastive_loss, AnchorPairs};
use crate::dataset::{ClassId, ClassSet};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, ModelGrads, ModelParams};

/// Proposal rows of one training step.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub features: Array2<f64>,
    /// Classifier output index per row; the background index for unmatched rows.
    pub class_targets: Vec<usize>,
    /// Anchor/key groups indexing rows of `features`.
    pub anchors: Vec<AnchorPairs>,
    /// Labeled class of each row (`None` for background), used by the class-level terms.
    pub row_classes: Vec<Option<ClassId>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub det: f64,
    pub track: f64,
    pub pull: f64,
    pub push: f64,
}

/// `L_det + L_track + beta1 L_pull + beta2 L_push`; the class-level terms
/// contribute nothing when `contrastive_on` is false.
pub fn total_loss(parts: &LossParts, cfg: &ContrastiveConfig, contrastive_on: bool) -> f64 {
    let base = parts.det + parts.track;
    if contrastive_on {
        base + cfg.beta1 * parts.pull + cfg.beta2 * parts.push
    } else {
        base
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub parts: LossParts,
    pub total: f64,
    pub grads: ModelGrads,
    pub cache: ForwardCache,
    /// Per-class batch deviations seen by the pulling term.
    pub batch_sigmas: std::collections::BTreeMap<ClassId, Vec<f64>>,
}

/// Forward pass, all loss terms and the full parameter gradient for one batch.
///
/// `contrastive_classes` gates the class-level terms: only rows of those
/// classes (that also have a prototype) take part.
pub fn batch_loss(
    params: &ModelParams,
    batch: &TrainBatch,
    protos: &ClassPrototypes,
    cfg: &ContrastiveConfig,
    contrastive_classes: &ClassSet,
) -> Result<BatchLoss> {
    if batch.class_targets.len() != batch.len() || batch.row_classes.len() != batch.len() {
        return Err(Error::Shape("batch targets do not match feature rows".into()));
    }
    let cache = params.forward_batch(&batch.features)?;
    let (det, d_logits) = detection_loss(&cache.logits, &batch.class_targets)?;
    let (track, mut d_embeds) = track_contrastive_loss(&cache.embeds, &batch.anchors)?;

    let gated = cfg.enabled() && !contrastive_classes.is_empty();
    let mut parts = LossParts { det, track, pull: 0.0, push: 0.0 };
    let mut batch_sigmas = Default::default();
    if gated {
        let sigma_p = cfg.prior_sigma(cache.embeds.ncols())?;
        let terms = contrastive_terms(
            &cache.embeds,
            &batch.row_classes,
            contrastive_classes,
            protos,
            &sigma_p,
            cfg.delta_push,
        )?;
        parts.pull = terms.pull;
        parts.push = terms.push;
        d_embeds.scaled_add(cfg.beta1, &terms.d_pull);
        d_embeds.scaled_add(cfg.beta2, &terms.d_push);
        batch_sigmas = terms.batch_sigmas;
    }
    let total = total_loss(&parts, cfg, gated);
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {total}")));
    }
    let grads = params.backward(&cache, &d_logits, &d_embeds)?;
    Ok(BatchLoss { parts, total, grads, cache, batch_sigmas })
}
