//! Class-level pushing and pulling terms on batch embedding statistics.
//!
//! Prototypes are constants here; gradients reach the network only through
//! the batch means and batch deviations.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::prototype::{batch_stats, ClassPrototypes, Prototype};
use crate::dataset::{ClassId, ClassSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Weight of the pulling term.
    pub beta1: f64,
    /// Weight of the pushing term.
    pub beta2: f64,
    pub delta_push: f64,
    /// Prior standard deviation, one entry per embedding dimension. A single
    /// entry is broadcast.
    pub sigma_p: Vec<f64>,
    /// New classes join the contrastive terms only after this many epochs.
    pub defer_new_classes_epochs: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { beta1: 0.01, beta2: 0.01, delta_push: 15.0, sigma_p: vec![0.05], defer_new_classes_epochs: 1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("contrastive weights must be >= 0".into()));
        }
        if !(self.delta_push > 0.0) {
            return Err(Error::Config("delta_push must be > 0".into()));
        }
        if self.sigma_p.is_empty() || self.sigma_p.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("sigma_p must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Prior deviation expanded to `dim` entries.
    pub fn prior_sigma(&self, dim: usize) -> Result<Vec<f64>> {
        match self.sigma_p.len() {
            1 => Ok(vec![self.sigma_p[0]; dim]),
            n if n == dim => Ok(self.sigma_p.clone()),
            n => Err(Error::Shape(format!("sigma_p has {n} entries for embedding dim {dim}"))),
        }
    }

    pub fn enabled(&self) -> bool {
        self.beta1 > 0.0 || self.beta2 > 0.0
    }
}

/// `sqrt((a - b)^T S^-1 (a - b))` with `S = (diag s1^2 + diag s2^2) / 2`.
pub fn push_distance(a: &[f64], b: &[f64], s1: &[f64], s2: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(s1.iter().zip(s2))
        .map(|((x, y), (u, v))| (x - y) * (x - y) / (0.5 * (u * u + v * v)))
        .sum::<f64>()
        .sqrt()
}

/// Smallest push distance between any two prototype means.
pub fn min_prototype_distance(protos: &ClassPrototypes) -> Option<f64> {
    let items: Vec<&Prototype> = protos.classes.values().collect();
    let mut best: Option<f64> = None;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = push_distance(&items[i].mu, &items[j].mu, &items[i].sigma, &items[j].sigma);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

/// Hinge pushing loss over ordered pairs of active classes:
/// `mean_{c1 != c2} [delta - D(mean_c1, proto_c2)]_+^2`, normalized by the
/// number of active ordered pairs. Returns gradients with respect to each
/// active class's batch mean.
pub fn push_loss(
    batch_means: &BTreeMap<ClassId, Vec<f64>>,
    protos: &ClassPrototypes,
    delta_push: f64,
) -> (f64, BTreeMap<ClassId, Vec<f64>>) {
    let active: Vec<ClassId> = batch_means.keys().copied().filter(|c| protos.is_initialized(*c)).collect();
    let mut grads: BTreeMap<ClassId, Vec<f64>> =
        active.iter().map(|&c| (c, vec![0.0; batch_means[&c].len()])).collect();
    if active.len() < 2 {
        return (0.0, grads);
    }
    let pairs = (active.len() * (active.len() - 1)) as f64;
    let mut value = 0.0;
    for &c1 in &active {
        let mean = &batch_means[&c1];
        let p1 = protos.get(c1).expect("active class has prototype");
        for &c2 in active.iter().filter(|&&c| c != c1) {
            let p2 = protos.get(c2).expect("active class has prototype");
            let d = push_distance(mean, &p2.mu, &p1.sigma, &p2.sigma);
            let gap = delta_push - d;
            if gap <= 0.0 {
                continue;
            }
            value += gap * gap / pairs;
            if d == 0.0 {
                continue;
            }
            let g = grads.get_mut(&c1).expect("active");
            for j in 0..mean.len() {
                let var = 0.5 * (p1.sigma[j] * p1.sigma[j] + p2.sigma[j] * p2.sigma[j]);
                g[j] += -2.0 * gap * (mean[j] - p2.mu[j]) / (var * d) / pairs;
            }
        }
    }
    (value, grads)
}

/// `mean_c sum_j (sigma_bar_cj - sigma_p_j)^2` and its gradient per class.
pub fn pull_loss(batch_sigmas: &BTreeMap<ClassId, Vec<f64>>, sigma_p: &[f64]) -> (f64, BTreeMap<ClassId, Vec<f64>>) {
    if batch_sigmas.is_empty() {
        return (0.0, BTreeMap::new());
    }
    let n = batch_sigmas.len() as f64;
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (&c, s) in batch_sigmas {
        let mut g = vec![0.0; s.len()];
        for j in 0..s.len() {
            let d = s[j] - sigma_p[j];
            value += d * d / n;
            g[j] = 2.0 * d / n;
        }
        grads.insert(c, g);
    }
    (value, grads)
}

/// Pushing and pulling terms evaluated on a batch of embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveTerms {
    pub pull: f64,
    pub push: f64,
    /// Unweighted gradients with respect to the embedding rows.
    pub d_pull: Array2<f64>,
    pub d_push: Array2<f64>,
    /// Per-class batch deviations that entered the pulling term.
    pub batch_sigmas: BTreeMap<ClassId, Vec<f64>>,
}

/// Groups rows by class, keeping only classes in `active`.
pub fn rows_by_class(row_classes: &[Option<ClassId>], active: &ClassSet) -> BTreeMap<ClassId, Vec<usize>> {
    let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, c) in row_classes.iter().enumerate() {
        if let Some(c) = c.filter(|c| active.contains(c)) {
            out.entry(c).or_default().push(i);
        }
    }
    out
}

/// Computes both terms for the rows of `embeds` labeled with an active class
/// that has a prototype, and chains their gradients back to the rows.
pub fn contrastive_terms(
    embeds: &Array2<f64>,
    row_classes: &[Option<ClassId>],
    active: &ClassSet,
    protos: &ClassPrototypes,
    sigma_p: &[f64],
    delta_push: f64,
) -> Result<ContrastiveTerms> {
    if row_classes.len() != embeds.nrows() {
        return Err(Error::Shape("one class entry per embedding row required".into()));
    }
    let groups: BTreeMap<ClassId, Vec<usize>> =
        rows_by_class(row_classes, active).into_iter().filter(|(c, _)| protos.is_initialized(*c)).collect();
    let by_class: BTreeMap<ClassId, Vec<Vec<f64>>> = groups
        .iter()
        .map(|(&c, rows)| (c, rows.iter().map(|&r| embeds.row(r).to_vec()).collect()))
        .collect();
    let stats = batch_stats(&by_class, protos);
    let means: BTreeMap<ClassId, Vec<f64>> = stats.iter().map(|(c, (m, _))| (*c, m.clone())).collect();
    let sigmas: BTreeMap<ClassId, Vec<f64>> = stats.iter().map(|(c, (_, s))| (*c, s.clone())).collect();

    let (push, g_mean) = push_loss(&means, protos, delta_push);
    let (pull, g_sigma) = pull_loss(&sigmas, sigma_p);

    let mut d_push = Array2::zeros(embeds.dim());
    let mut d_pull = Array2::zeros(embeds.dim());
    for (c, rows) in &groups {
        let n = rows.len() as f64;
        let mu = &protos.get(*c).expect("filtered").mu;
        if let Some(g) = g_mean.get(c) {
            for &r in rows {
                for (j, gj) in g.iter().enumerate() {
                    d_push[[r, j]] += gj / n;
                }
            }
        }
        if let Some(g) = g_sigma.get(c) {
            let s = &sigmas[c];
            for &r in rows {
                for (j, gj) in g.iter().enumerate() {
                    d_pull[[r, j]] += gj * (embeds[[r, j]] - mu[j]) / (n * s[j]);
                }
            }
        }
    }
    Ok(ContrastiveTerms { pull, push, d_pull, d_push, batch_sigmas: sigmas })
}
