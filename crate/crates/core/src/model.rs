//! The learnable head: a tanh trunk feeding a classifier (classes plus a
//! trailing background logit) and a re-identification embedding head, with
//! hand-derived backpropagation and SGD with momentum.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Std of freshly added classifier rows.
pub const NEW_CLASS_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Foreground classes; the classifier has one more output for background.
    pub n_classes: usize,
}

/// Dense layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    fn random(out: usize, inp: usize, std: f64, rng: &mut Rng) -> Self {
        let weight = Array2::from_shape_fn((out, inp), |_| std * rng.sample::<f64, _>(StandardNormal));
        Self { weight, bias: Array1::zeros(out) }
    }

    /// Batch forward: rows of `x` are samples.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Weights of the whole head. The same structure doubles as a gradient or
/// momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trunk1: Linear,
    pub trunk2: Linear,
    pub classifier: Linear,
    pub embed: Linear,
}

pub type ModelGrads = ModelParams;

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub hidden1: Array2<f64>,
    pub hidden2: Array2<f64>,
    pub logits: Array2<f64>,
    pub embeds: Array2<f64>,
}

impl ModelParams {
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Self {
        let h = dims.hidden_dim;
        Self {
            trunk1: Linear::random(h, dims.feature_dim, 1.0 / (dims.feature_dim as f64).sqrt(), rng),
            trunk2: Linear::random(h, h, 1.0 / (h as f64).sqrt(), rng),
            classifier: Linear::random(dims.n_classes + 1, h, NEW_CLASS_INIT_STD, rng),
            embed: Linear::random(dims.embed_dim, h, 1.0 / (h as f64).sqrt(), rng),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        let h = dims.hidden_dim;
        Self {
            trunk1: Linear::zeros(h, dims.feature_dim),
            trunk2: Linear::zeros(h, h),
            classifier: Linear::zeros(dims.n_classes + 1, h),
            embed: Linear::zeros(dims.embed_dim, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.trunk1.in_dim(),
            hidden_dim: self.trunk1.out_dim(),
            embed_dim: self.embed.out_dim(),
            n_classes: self.classifier.out_dim() - 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim() - 1
    }

    pub fn background(&self) -> usize {
        self.n_classes()
    }

    /// Parameter tensors in a fixed order, flattened row-major.
    pub fn tensors(&self) -> [&[f64]; 8] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("standard layout")
        }
        [
            s(self.trunk1.weight.as_slice()),
            s(self.trunk1.bias.as_slice()),
            s(self.trunk2.weight.as_slice()),
            s(self.trunk2.bias.as_slice()),
            s(self.classifier.weight.as_slice()),
            s(self.classifier.bias.as_slice()),
            s(self.embed.weight.as_slice()),
            s(self.embed.bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        let [a, b, c, d] = [&mut self.trunk1, &mut self.trunk2, &mut self.classifier, &mut self.embed];
        fn s(x: Option<&mut [f64]>) -> &mut [f64] {
            x.expect("standard layout")
        }
        [
            s(a.weight.as_slice_mut()),
            s(a.bias.as_slice_mut()),
            s(b.weight.as_slice_mut()),
            s(b.bias.as_slice_mut()),
            s(c.weight.as_slice_mut()),
            s(c.bias.as_slice_mut()),
            s(d.weight.as_slice_mut()),
            s(d.bias.as_slice_mut()),
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 8] = [
        "trunk1.weight",
        "trunk1.bias",
        "trunk2.weight",
        "trunk2.bias",
        "classifier.weight",
        "classifier.bias",
        "embed.weight",
        "embed.bias",
    ];

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.tensors().iter().zip(other.tensors().iter()).all(|(a, b)| a.len() == b.len())
            && self.dims() == other.dims()
    }

    pub fn forward_batch(&self, features: &Array2<f64>) -> Result<ForwardCache> {
        if features.ncols() != self.trunk1.in_dim() {
            return Err(Error::Shape(format!(
                "feature width {} but model expects {}",
                features.ncols(),
                self.trunk1.in_dim()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite input feature".into()));
        }
        let hidden1 = self.trunk1.apply(features).mapv(f64::tanh);
        let hidden2 = self.trunk2.apply(&hidden1).mapv(f64::tanh);
        let logits = self.classifier.apply(&hidden2);
        let embeds = self.embed.apply(&hidden2);
        Ok(ForwardCache { input: features.clone(), hidden1, hidden2, logits, embeds })
    }

    /// Single-sample forward returning `(logits, embedding)`.
    pub fn forward(&self, feature: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = Array2::from_shape_vec((1, feature.len()), feature.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let cache = self.forward_batch(&x)?;
        Ok((cache.logits.row(0).to_vec(), cache.embeds.row(0).to_vec()))
    }

    /// Backpropagates output gradients through both heads and the trunk.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>, d_embeds: &Array2<f64>) -> Result<ModelGrads> {
        if d_logits.dim() != cache.logits.dim() || d_embeds.dim() != cache.embeds.dim() {
            return Err(Error::Shape("output gradient shape differs from forward outputs".into()));
        }
        let classifier = Linear { weight: d_logits.t().dot(&cache.hidden2), bias: d_logits.sum_axis(Axis(0)) };
        let embed = Linear { weight: d_embeds.t().dot(&cache.hidden2), bias: d_embeds.sum_axis(Axis(0)) };
        let d_h2 = d_logits.dot(&self.classifier.weight) + d_embeds.dot(&self.embed.weight);
        let d_z2 = d_h2 * cache.hidden2.mapv(|h| 1.0 - h * h);
        let trunk2 = Linear { weight: d_z2.t().dot(&cache.hidden1), bias: d_z2.sum_axis(Axis(0)) };
        let d_h1 = d_z2.dot(&self.trunk2.weight);
        let d_z1 = d_h1 * cache.hidden1.mapv(|h| 1.0 - h * h);
        let trunk1 = Linear { weight: d_z1.t().dot(&cache.input), bias: d_z1.sum_axis(Axis(0)) };
        Ok(ModelParams { trunk1, trunk2, classifier, embed })
    }

    /// Adds `n_new` class rows in front of the background row. Old rows are
    /// copied verbatim; new rows are drawn from `N(0, 0.01^2)` with zero bias.
    pub fn extend_classifier(&self, n_new: usize, rng: &mut Rng) -> Result<ModelParams> {
        if n_new == 0 {
            return Err(Error::Shape("extend_classifier needs at least one new class".into()));
        }
        let old = &self.classifier;
        let c = self.n_classes();
        let h = old.in_dim();
        let mut weight = Array2::zeros((c + n_new + 1, h));
        let mut bias = Array1::zeros(c + n_new + 1);
        for r in 0..c {
            weight.row_mut(r).assign(&old.weight.row(r));
            bias[r] = old.bias[r];
        }
        for r in c..c + n_new {
            for v in weight.row_mut(r).iter_mut() {
                *v = NEW_CLASS_INIT_STD * rng.sample::<f64, _>(StandardNormal);
            }
        }
        weight.row_mut(c + n_new).assign(&old.weight.row(c));
        bias[c + n_new] = old.bias[c];
        let mut out = self.clone();
        out.classifier = Linear { weight, bias };
        Ok(out)
    }
}

/// Model weights together with the class id behind each classifier row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingModel {
    pub params: ModelParams,
    /// `classes[k]` is the class scored by classifier row `k`; the row after
    /// the last one is background.
    pub classes: Vec<ClassId>,
}

impl TrackingModel {
    pub fn new(params: ModelParams, classes: Vec<ClassId>) -> Result<Self> {
        if params.n_classes() != classes.len() {
            return Err(Error::Shape(format!(
                "classifier has {} rows for {} classes",
                params.n_classes(),
                classes.len()
            )));
        }
        Ok(Self { params, classes })
    }

    pub fn init(feature_dim: usize, hidden_dim: usize, embed_dim: usize, classes: Vec<ClassId>, rng: &mut Rng) -> Self {
        let dims = ModelDims { feature_dim, hidden_dim, embed_dim, n_classes: classes.len() };
        Self { params: ModelParams::init(dims, rng), classes }
    }

    pub fn class_index(&self, c: ClassId) -> Option<usize> {
        self.classes.iter().position(|&k| k == c)
    }

    pub fn background(&self) -> usize {
        self.classes.len()
    }

    /// Copies all weights and appends rows for `new_classes`.
    pub fn with_new_classes(&self, new_classes: &[ClassId], rng: &mut Rng) -> Result<Self> {
        if let Some(c) = new_classes.iter().find(|c| self.classes.contains(c)) {
            return Err(Error::Shape(format!("class {c} already has a classifier row")));
        }
        let params = self.params.extend_classifier(new_classes.len(), rng)?;
        let mut classes = self.classes.clone();
        classes.extend_from_slice(new_classes);
        Ok(Self { params, classes })
    }
}

/// Softmax of one logit row, computed stably.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct OptState {
    pub velocity: ModelParams,
    pub lr: f64,
    pub config: OptimizerConfig,
}

impl OptState {
    pub fn new(params: &ModelParams, lr: f64, config: OptimizerConfig) -> Self {
        Self { velocity: params.zeros_like(), lr, config }
    }

    /// `v <- momentum * v + g + wd * w; w <- w - lr * v`
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.velocity) {
            return Err(Error::Shape("parameter, gradient and momentum shapes differ".into()));
        }
        let OptimizerConfig { momentum, weight_decay } = self.config;
        let lr = self.lr;
        for ((w, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.velocity.tensors_mut()) {
            for ((w, g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Step schedule for six-epoch stages: full rate for epochs 0-3, a tenth for
/// epoch 4, a hundredth from epoch 5 on.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    match epoch {
        0..=3 => base_lr,
        4 => base_lr / 10.0,
        _ => base_lr / 100.0,
    }
}
