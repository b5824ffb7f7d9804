//! Synthetic multi-class tracking world.
//!
//! Objects move with constant velocity plus Gaussian jitter inside the unit
//! square. Each object has a class and a latent identity `z`; its observed
//! feature in every frame is `B_c z + b_c + noise`, where `b_c` are class base
//! vectors at pairwise distance `class_separation` and `B_c` is a per-class
//! mixing matrix. `corrupt_detections` then plays the part of a frozen
//! detector: it drops, jitters and scores true boxes and adds clutter.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassId, Frame, Sequence, SequenceDataset, SequenceId};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::rng::{substream, Rng};

/// Validation sequence ids start here so they never collide with training ids.
pub const VALIDATION_ID_BASE: SequenceId = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub class_frequencies: Vec<f64>,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub frames_per_sequence: usize,
    pub n_sequences: usize,
    pub n_val_sequences: usize,
    pub objects_per_sequence: usize,
    pub motion_noise_std: f64,
    pub appearance_noise_std: f64,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            class_frequencies: vec![40.0, 25.0, 15.0, 10.0, 6.0, 4.0],
            feature_dim: 32,
            latent_dim: 8,
            frames_per_sequence: 40,
            n_sequences: 48,
            n_val_sequences: 24,
            objects_per_sequence: 8,
            motion_noise_std: 0.003,
            appearance_noise_std: 0.3,
            class_separation: 3.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("world needs at least two classes".into()));
        }
        if self.class_frequencies.len() != self.n_classes {
            return Err(Error::Config(format!(
                "class_frequencies has {} entries for {} classes",
                self.class_frequencies.len(),
                self.n_classes
            )));
        }
        if self.class_frequencies.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config("class frequencies must be positive".into()));
        }
        if self.feature_dim == 0 || self.latent_dim == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config("dimensions and frame count must be positive".into()));
        }
        if self.n_classes > self.feature_dim {
            return Err(Error::Config("need feature_dim >= n_classes for separated class bases".into()));
        }
        for (name, v) in [
            ("motion_noise_std", self.motion_noise_std),
            ("appearance_noise_std", self.appearance_noise_std),
            ("class_separation", self.class_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> BTreeMap<ClassId, String> {
        (0..self.n_classes).map(|c| (c, format!("class{c}"))).collect()
    }
}

/// Confidence assigned by the stand-in detector, as clipped normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfModel {
    pub true_mean: f64,
    pub true_std: f64,
    pub clutter_mean: f64,
    pub clutter_std: f64,
}

impl Default for ConfModel {
    fn default() -> Self {
        Self { true_mean: 0.85, true_std: 0.1, clutter_mean: 0.45, clutter_std: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub fn_prob: f64,
    pub fp_rate: f64,
    pub jitter_std: f64,
    /// How far clutter features sit toward a class base vector (0 = none, 1 = fully).
    pub clutter_mimic: f64,
    pub conf_model: ConfModel,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { fn_prob: 0.1, fp_rate: 2.0, jitter_std: 0.005, clutter_mimic: 0.6, conf_model: ConfModel::default() }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fn_prob) {
            return Err(Error::Config("fn_prob must lie in [0,1]".into()));
        }
        for (name, v) in [("fp_rate", self.fp_rate), ("jitter_std", self.jitter_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-class appearance parameters shared by every sequence of a world.
#[derive(Debug, Clone)]
pub struct ClassAppearance {
    pub base: Vec<f64>,
    /// Row-major `feature_dim x latent_dim`.
    pub mixing: Vec<f64>,
}

impl ClassAppearance {
    pub fn observe(&self, latent: &[f64], noise_std: f64, rng: &mut Rng) -> Vec<f64> {
        let l = latent.len();
        self.base
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mix: f64 = self.mixing[i * l..(i + 1) * l].iter().zip(latent).map(|(m, z)| m * z).sum();
                let eps: f64 = rng.sample(StandardNormal);
                b + mix + noise_std * eps
            })
            .collect()
    }
}

/// Class base vectors and mixing matrices for a configuration. Bases are
/// orthogonal with norm `class_separation / sqrt(2)`, so every pair sits
/// exactly `class_separation` apart.
pub fn class_appearance(cfg: &WorldConfig) -> Vec<ClassAppearance> {
    let mut rng = substream(cfg.seed, 0);
    let f = cfg.feature_dim;
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    while bases.len() < cfg.n_classes {
        let mut v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        for u in &bases {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        bases.push(v);
    }
    let scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let mix_std = 1.0 / (f as f64).sqrt();
    bases
        .into_iter()
        .map(|u| ClassAppearance {
            base: u.iter().map(|a| a * scale).collect(),
            mixing: (0..f * cfg.latent_dim).map(|_| mix_std * rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect()
}

fn sample_class(freqs: &[f64], rng: &mut Rng) -> ClassId {
    let total: f64 = freqs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, f) in freqs.iter().enumerate() {
        if u < *f {
            return c;
        }
        u -= f;
    }
    freqs.len() - 1
}

const BOX_MIN: f64 = 0.05;
const BOX_MAX: f64 = 0.12;
const POS_LO: f64 = 0.05;
const POS_HI: f64 = 0.95;

fn reflect(pos: &mut f64, vel: &mut f64) {
    if *pos < POS_LO {
        *pos = 2.0 * POS_LO - *pos;
        *vel = -*vel;
    }
    if *pos > POS_HI {
        *pos = 2.0 * POS_HI - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(POS_LO, POS_HI);
}

fn generate_sequence(cfg: &WorldConfig, appearance: &[ClassAppearance], id: SequenceId) -> Sequence {
    let mut rng = substream(cfg.seed, id + 1);
    let t = cfg.frames_per_sequence;
    let mut frames: Vec<Frame> = (0..t).map(Frame::empty).collect();
    let motion = Normal::new(0.0, cfg.motion_noise_std.max(0.0)).expect("finite std");
    for k in 0..cfg.objects_per_sequence {
        let class = sample_class(&cfg.class_frequencies, &mut rng);
        let latent: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let start = rng.random_range(0..=t / 2);
        let min_len = (t / 4).max(1);
        let end = rng.random_range((start + min_len).min(t)..=t).max(start + 1);
        let (w, h) = (rng.random_range(BOX_MIN..BOX_MAX), rng.random_range(BOX_MIN..BOX_MAX));
        let (mut x, mut y) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let (mut vx, mut vy) = (0.01 * rng.sample::<f64, _>(StandardNormal), 0.01 * rng.sample::<f64, _>(StandardNormal));
        for frame in &mut frames[start..end] {
            let feature = appearance[class].observe(&latent, cfg.appearance_noise_std, &mut rng);
            frame.annotations.push(Annotation::ground_truth(
                BoundingBox::new(x, y, w, h),
                class,
                k as u64 + 1,
                feature,
            ));
            x += vx + motion.sample(&mut rng);
            y += vy + motion.sample(&mut rng);
            reflect(&mut x, &mut vx);
            reflect(&mut y, &mut vy);
        }
    }
    Sequence { id, frames }
}

/// Generates `count` sequences with ids `first_id..first_id + count`.
pub fn generate_split(cfg: &WorldConfig, first_id: SequenceId, count: usize) -> Result<SequenceDataset> {
    cfg.validate()?;
    let appearance = class_appearance(cfg);
    let sequences = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sequence(cfg, &appearance, first_id + i))
        .collect();
    Ok(SequenceDataset { sequences, class_names: cfg.class_names() })
}

/// Training split: sequence ids `0..n_sequences`.
pub fn generate_world(cfg: &WorldConfig) -> Result<SequenceDataset> {
    generate_split(cfg, 0, cfg.n_sequences)
}

/// Held-out split drawn from the same classes with a disjoint id (and seed) range.
pub fn generate_validation(cfg: &WorldConfig) -> Result<SequenceDataset> {
    generate_split(cfg, VALIDATION_ID_BASE, cfg.n_val_sequences)
}

fn clipped(normal: &Normal<f64>, rng: &mut Rng) -> f64 {
    normal.sample(rng).clamp(0.0, 1.0)
}

/// Fills every frame's proposals from its ground truth plus clutter.
///
/// True proposals keep the source class and instance id for target
/// bookkeeping; clutter proposals use class id `n_classes` and no instance.
pub fn corrupt_detections(
    ds: &SequenceDataset,
    world: &WorldConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<SequenceDataset> {
    noise.validate()?;
    world.validate()?;
    let appearance = class_appearance(world);
    let conf = &noise.conf_model;
    let true_conf = Normal::new(conf.true_mean, conf.true_std).map_err(|e| Error::Config(e.to_string()))?;
    let clutter_conf =
        Normal::new(conf.clutter_mean, conf.clutter_std).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, noise.jitter_std).map_err(|e| Error::Config(e.to_string()))?;
    let clutter_count = (noise.fp_rate > 0.0)
        .then(|| Poisson::new(noise.fp_rate).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;

    let sequences = ds
        .sequences
        .par_iter()
        .map(|seq| {
            let mut rng = substream(seed, seq.id + 1);
            let mut seq = seq.clone();
            for frame in &mut seq.frames {
                let mut proposals = Vec::with_capacity(frame.annotations.len() + 4);
                for gt in &frame.annotations {
                    if rng.random::<f64>() < noise.fn_prob {
                        continue;
                    }
                    let mut b = gt.bbox;
                    if noise.jitter_std > 0.0 {
                        // Center shifts are truncated below half the box size so a
                        // jittered proposal always overlaps its source.
                        let dx = jitter.sample(&mut rng).clamp(-0.45 * b.w, 0.45 * b.w);
                        let dy = jitter.sample(&mut rng).clamp(-0.45 * b.h, 0.45 * b.h);
                        b.cx = (b.cx + dx).clamp(0.0, 1.0);
                        b.cy = (b.cy + dy).clamp(0.0, 1.0);
                        b.w = (b.w + jitter.sample(&mut rng)).max(0.5 * b.w);
                        b.h = (b.h + jitter.sample(&mut rng)).max(0.5 * b.h);
                    }
                    proposals.push(Annotation {
                        bbox: b,
                        class_id: gt.class_id,
                        instance_id: gt.instance_id,
                        confidence: Some(clipped(&true_conf, &mut rng)),
                        feature: gt.feature.clone(),
                    });
                }
                let n_clutter = clutter_count.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
                for _ in 0..n_clutter {
                    let bbox = BoundingBox::new(
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.05..0.95),
                        rng.random_range(BOX_MIN..BOX_MAX),
                        rng.random_range(BOX_MIN..BOX_MAX),
                    );
                    let mimic = rng.random_range(0..world.n_classes);
                    let latent: Vec<f64> = (0..world.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                    let mut feature = appearance[mimic].observe(&latent, world.appearance_noise_std, &mut rng);
                    for (x, b) in feature.iter_mut().zip(&appearance[mimic].base) {
                        *x -= (1.0 - noise.clutter_mimic) * b;
                    }
                    proposals.push(Annotation {
                        bbox,
                        class_id: world.n_classes,
                        instance_id: None,
                        confidence: Some(clipped(&clutter_conf, &mut rng)),
                        feature,
                    });
                }
                frame.proposals = proposals;
            }
            seq
        })
        .collect();
    Ok(SequenceDataset { sequences, class_names: ds.class_names.clone() })
}
