//! Stage orchestration: base training, pseudo-labeling, incremental training
//! for every method, and the full protocol over a stage plan.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{save_dataset, ClassId, ClassSet, SequenceDataset};
use crate::error::{Error, Result};
use crate::labels::{merge_labels, select_sequences, strip_labels, Method, StagePlan};
use crate::losses::{batch_loss, batch_stats, queue_update, sample_pairs, ClassPrototypes, MemoryQueue, TrainBatch};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{lr_schedule, ModelGrads, OptState, OptimizerConfig, TrackingModel};
use crate::rng::{derive_seed, substream, Rng};
use crate::simworld::{corrupt_detections, generate_validation, generate_world};
use crate::targets::{assign_targets, TARGET_IOU};
use crate::tracker::{detections_to_dataset, track_dataset, TrackerConfig};

/// Read access to a stage's training data. Labels can only be obtained for
/// an explicit class set, which lets tests audit what a stage reads.
pub trait StageData: Sync {
    /// Sequences with proposals and the annotations of `classes` only.
    fn labeled(&self, classes: &ClassSet) -> SequenceDataset;

    /// Sequences with proposals and no annotations.
    fn videos(&self) -> SequenceDataset {
        self.labeled(&ClassSet::new())
    }
}

impl StageData for SequenceDataset {
    fn labeled(&self, classes: &ClassSet) -> SequenceDataset {
        strip_labels(self, classes)
    }
}

/// Wraps a dataset and records every class whose annotations were handed out.
#[derive(Debug)]
pub struct AuditedData {
    inner: SequenceDataset,
    read: Mutex<BTreeSet<ClassId>>,
}

impl AuditedData {
    pub fn new(inner: SequenceDataset) -> Self {
        Self { inner, read: Mutex::new(BTreeSet::new()) }
    }

    pub fn classes_read(&self) -> ClassSet {
        self.read.lock().expect("audit lock").clone()
    }
}

impl StageData for AuditedData {
    fn labeled(&self, classes: &ClassSet) -> SequenceDataset {
        let out = strip_labels(&self.inner, classes);
        let mut read = self.read.lock().expect("audit lock");
        read.extend(out.sequences.iter().flat_map(|s| &s.frames).flat_map(|f| &f.annotations).map(|a| a.class_id));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub det: f64,
    pub track: f64,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
    /// Mean over steps, classes and dimensions of the batch deviation from
    /// the class prototype, for classes that have a prototype.
    pub mean_batch_sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub pseudo_labels: Option<SequenceDataset>,
    pub history: Vec<EpochStats>,
}

/// Adjacent frame pairs `(sequence index, key frame index)`.
fn frame_pairs(ds: &SequenceDataset) -> Vec<(usize, usize)> {
    ds.sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.frames.len().saturating_sub(1)).map(move |f| (s, f)))
        .collect()
}

/// Builds one training batch from frame pairs. Proposals take the class and
/// identity of the label they overlap; key-frame rows come first in each pair.
pub fn build_batch(model: &TrackingModel, ds: &SequenceDataset, pairs: &[(usize, usize)]) -> Result<TrainBatch> {
    let f = model.params.dims().feature_dim;
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut class_targets = Vec::new();
    let mut row_classes = Vec::new();
    let mut anchors = Vec::new();
    for &(s, t) in pairs {
        let seq = &ds.sequences[s];
        let (key, reference) = (&seq.frames[t], &seq.frames[t + 1]);
        let kt = assign_targets(&key.proposals, &key.annotations, TARGET_IOU);
        let rt = assign_targets(&reference.proposals, &reference.annotations, TARGET_IOU);
        let base = rows.len();
        for (p, tg) in key.proposals.iter().zip(&kt).chain(reference.proposals.iter().zip(&rt)) {
            if p.feature.len() != f {
                return Err(Error::Shape(format!("proposal feature width {} != {f}", p.feature.len())));
            }
            rows.push(&p.feature);
            let idx = tg.class_id.and_then(|c| model.class_index(c));
            class_targets.push(idx.unwrap_or(model.background()));
            row_classes.push(idx.map(|i| model.classes[i]));
        }
        anchors.extend(
            sample_pairs(&kt, &rt).into_iter().map(|a| a.offset_keys(base + kt.len()).offset_anchor(base)),
        );
    }
    let mut features = Array2::zeros((rows.len(), f));
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    Ok(TrainBatch { features, class_targets, anchors, row_classes })
}

fn embeds_by_class(embeds: &Array2<f64>, row_classes: &[Option<ClassId>]) -> BTreeMap<ClassId, Vec<Vec<f64>>> {
    let mut out: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, c) in row_classes.iter().enumerate() {
        if let Some(c) = c {
            out.entry(*c).or_default().push(embeds.row(i).to_vec());
        }
    }
    out
}

/// Rescales `grads` so its global L2 norm is at most `max_norm` (0 disables).
pub fn clip_grad_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Which classes take part in the class-level terms, per epoch.
#[derive(Debug, Clone, Default)]
pub struct ContrastiveGate {
    pub old: ClassSet,
    pub new: ClassSet,
    pub defer_new_epochs: usize,
}

impl ContrastiveGate {
    pub fn active(&self, epoch: usize) -> ClassSet {
        let mut a = self.old.clone();
        if epoch >= self.defer_new_epochs {
            a.extend(&self.new);
        }
        a
    }
}

/// Trains in place for `cfg.training.epochs` epochs. Each step updates the
/// queue and prototypes from the batch's detached embeddings before the
/// losses are evaluated against them.
pub fn fit(
    model: &mut TrackingModel,
    prototypes: &mut ClassPrototypes,
    queue: &mut MemoryQueue,
    data: &SequenceDataset,
    cfg: &ExperimentConfig,
    gate: Option<&ContrastiveGate>,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    let tc = &cfg.training;
    let mut opt = OptState::new(&model.params, tc.base_lr, OptimizerConfig::default());
    let mut pairs = frame_pairs(data);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        opt.lr = lr_schedule(epoch, tc.base_lr);
        pairs.shuffle(rng);
        let active = gate.map(|g| g.active(epoch)).unwrap_or_default();
        let mut stats = EpochStats {
            epoch,
            lr: opt.lr,
            steps: 0,
            det: 0.0,
            track: 0.0,
            pull: 0.0,
            push: 0.0,
            total: 0.0,
            mean_batch_sigma: None,
        };
        let (mut sigma_sum, mut sigma_n) = (0.0, 0usize);
        for chunk in pairs.chunks(tc.batch_size) {
            let batch = build_batch(model, data, chunk)?;
            if batch.is_empty() {
                continue;
            }
            let detached = model.params.forward_batch(&batch.features)?;
            let by_class = embeds_by_class(&detached.embeds, &batch.row_classes);
            queue_update(queue, prototypes, &by_class, rng);
            for (_, (_, sigma)) in batch_stats(&by_class, prototypes) {
                sigma_sum += sigma.iter().sum::<f64>();
                sigma_n += sigma.len();
            }
            let mut out = batch_loss(&model.params, &batch, prototypes, &cfg.contrastive, &active)?;
            clip_grad_norm(&mut out.grads, tc.max_grad_norm);
            opt.step(&mut model.params, &out.grads)?;
            stats.steps += 1;
            stats.det += out.parts.det;
            stats.track += out.parts.track;
            stats.pull += out.parts.pull;
            stats.push += out.parts.push;
            stats.total += out.total;
        }
        if !model.params.is_finite() {
            return Err(Error::Numerical(format!("weights diverged in epoch {epoch}")));
        }
        let n = stats.steps.max(1) as f64;
        stats.det /= n;
        stats.track /= n;
        stats.pull /= n;
        stats.push /= n;
        stats.total /= n;
        stats.mean_batch_sigma = (sigma_n > 0).then(|| sigma_sum / sigma_n as f64);
        history.push(stats);
    }
    Ok(history)
}

/// Old-class pseudo-labels from tracking the stage videos with the previous
/// model. Tracks below `pl_conf_thresh` mean confidence are dropped.
pub fn generate_tracker_pls(prev: &TrackingModel, videos: &SequenceDataset, cfg: &TrackerConfig) -> Result<SequenceDataset> {
    let mut out = track_dataset(prev, videos, cfg)?;
    let old: ClassSet = prev.classes.iter().copied().collect();
    for s in &mut out.sequences {
        s.tracks.retain(|t| old.contains(&t.class_id) && t.mean_confidence() >= cfg.pl_conf_thresh);
    }
    Ok(out.to_dataset(videos))
}

/// Old-class pseudo-labels from per-frame detections above `tau`, each with a
/// fresh instance id.
pub fn generate_det_pls(
    prev: &TrackingModel,
    videos: &SequenceDataset,
    cfg: &TrackerConfig,
    tau: f64,
) -> Result<SequenceDataset> {
    let old: ClassSet = prev.classes.iter().copied().collect();
    detections_to_dataset(prev, videos, cfg, |d| d.confidence > tau && old.contains(&d.class_id))
}

/// Stage 0 is shared by every staged method, so its stream does not depend on the method.
fn stage_rng(cfg: &ExperimentConfig, b: usize, method: Method) -> Rng {
    let label = match method {
        Method::Oracle => "oracle",
        _ if b == 0 => "base",
        m => m.as_str(),
    };
    substream(derive_seed(cfg.training.seed, label), b as u64)
}

/// Trains stage `b` of `plan`.
///
/// Stage 0 (and the oracle) start from fresh weights and use the detection
/// and tracking losses only. Later stages copy `prev`, add classifier rows
/// for the stage's classes and train on the stage's ground truth merged with
/// the method's old-class pseudo-labels.
pub fn train_stage(
    prev: Option<&Checkpoint>,
    data: &dyn StageData,
    plan: &StagePlan,
    b: usize,
    cfg: &ExperimentConfig,
) -> Result<StageOutcome> {
    plan.validate()?;
    if b >= plan.stages.len() {
        return Err(Error::Plan(format!("stage {b} outside a {}-stage plan", plan.stages.len())));
    }
    let method = plan.method;
    let mut rng = stage_rng(cfg, b, method);
    let tc = &cfg.training;
    let fresh = |classes: ClassSet, rng: &mut Rng| {
        TrackingModel::init(cfg.world.feature_dim, tc.hidden_dim, tc.embed_dim, classes.into_iter().collect(), rng)
    };

    if method == Method::Oracle || b == 0 {
        let classes = if method == Method::Oracle { plan.all_classes() } else { plan.stages[0].clone() };
        let labeled = data.labeled(&classes);
        let mut model = fresh(classes, &mut rng);
        let mut prototypes = ClassPrototypes::default();
        let mut queue = MemoryQueue::new(cfg.queue);
        let history = fit(&mut model, &mut prototypes, &mut queue, &labeled, cfg, None, &mut rng)?;
        let checkpoint = Checkpoint {
            model,
            prototypes,
            queue,
            stage: b,
            method: method.to_string(),
            seed: tc.seed,
            parent_digest: None,
        };
        return Ok(StageOutcome { checkpoint, pseudo_labels: None, history });
    }

    let prev = prev.ok_or_else(|| Error::State(format!("stage {b} needs the stage {} checkpoint", b - 1)))?;
    let new_classes = &plan.stages[b];
    let gt_new = data.labeled(new_classes);
    let videos = data.videos();
    let pseudo_labels = match method {
        Method::Cooler => Some(generate_tracker_pls(&prev.model, &videos, &cfg.tracker)?),
        Method::DetPl => Some(generate_det_pls(&prev.model, &videos, &cfg.tracker, tc.det_pl_tau)?),
        Method::Finetune | Method::Oracle => None,
    };
    let train_data = match &pseudo_labels {
        Some(pl) => merge_labels(&gt_new, pl)?,
        None => gt_new,
    };
    let new_list: Vec<ClassId> = new_classes.iter().copied().collect();
    let mut model = prev.model.with_new_classes(&new_list, &mut rng)?;
    let mut prototypes = prev.prototypes.clone();
    let mut queue = prev.queue.clone();
    let gate = (method == Method::Cooler).then(|| ContrastiveGate {
        old: plan.old_classes(b),
        new: new_classes.clone(),
        defer_new_epochs: cfg.contrastive.defer_new_classes_epochs,
    });
    let history = fit(&mut model, &mut prototypes, &mut queue, &train_data, cfg, gate.as_ref(), &mut rng)?;
    let checkpoint = Checkpoint {
        model,
        prototypes,
        queue,
        stage: b,
        method: method.to_string(),
        seed: tc.seed,
        parent_digest: Some(prev.digest()?),
    };
    Ok(StageOutcome { checkpoint, pseudo_labels, history })
}

/// Record of one executed stage, echoed into `protocol.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: usize,
    pub method: Method,
    pub classes: ClassSet,
    pub input_checkpoint: Option<String>,
    pub checkpoint_digest: String,
    pub pseudo_labels: Option<String>,
    pub train_sequences: usize,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

/// Training and validation splits of a world, with detector noise applied.
#[derive(Debug, Clone)]
pub struct WorldSplits {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<WorldSplits> {
    let noise_seed = derive_seed(cfg.world.seed, "noise");
    let train = corrupt_detections(&generate_world(&cfg.world)?, &cfg.world, &cfg.noise, noise_seed)?;
    let val = corrupt_detections(&generate_validation(&cfg.world)?, &cfg.world, &cfg.noise, noise_seed)?;
    Ok(WorldSplits { train, val })
}

/// Tracks the validation videos and evaluates over the classes seen up to `b`.
pub fn evaluate_stage(
    model: &TrackingModel,
    val: &SequenceDataset,
    plan: &StagePlan,
    b: usize,
    cfg: &TrackerConfig,
) -> Result<MetricReport> {
    let tracks = track_dataset(model, &val.videos(), cfg)?;
    Ok(evaluate(val, &tracks.to_dataset(val), &plan.seen_classes(b), b, plan.method.as_str()))
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub reports: Vec<MetricReport>,
    pub stages: Vec<StageRun>,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug, Serialize)]
struct ProtocolEcho<'a> {
    plan: &'a StagePlan,
    config: &'a ExperimentConfig,
    stages: &'a [StageRun],
}

/// Training sequences of stage `b`: every sequence for the oracle, otherwise
/// those containing an object of the stage's classes.
pub fn stage_training_data(train: &SequenceDataset, plan: &StagePlan, b: usize) -> SequenceDataset {
    match (plan.method, plan.stages.get(b)) {
        (Method::Oracle, _) | (_, None) => train.clone(),
        (_, Some(classes)) => select_sequences(train, classes),
    }
}

pub fn stage_dir(out: &Path, b: usize) -> PathBuf {
    out.join(format!("stage_{b}"))
}

/// Runs every stage of `plan` in order and evaluates each on the validation
/// split over all classes seen so far. With `out`, writes the run directory:
/// `stage_<b>/{checkpoint.bin, pseudo_labels/, metrics.json, metrics.csv}`
/// and `protocol.json`.
pub fn run_protocol(
    splits: &WorldSplits,
    plan: &StagePlan,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ProtocolResult> {
    plan.validate()?;
    let mut result = ProtocolResult { reports: Vec::new(), stages: Vec::new(), checkpoints: Vec::new() };
    let mut oracle: Option<Checkpoint> = None;
    for b in 0..plan.stages.len() {
        let (outcome, n_seq) = if plan.method == Method::Oracle {
            let ck = match &oracle {
                Some(ck) => ck.clone(),
                None => train_stage(None, &splits.train, plan, 0, cfg)?.checkpoint,
            };
            let history = Vec::new();
            oracle = Some(ck.clone());
            (StageOutcome { checkpoint: ck, pseudo_labels: None, history }, splits.train.sequences.len())
        } else {
            let data = stage_training_data(&splits.train, plan, b);
            let n = data.sequences.len();
            (train_stage(result.checkpoints.last(), &data, plan, b, cfg)?, n)
        };
        let report = evaluate_stage(&outcome.checkpoint.model, &splits.val, plan, b, &cfg.tracker)?;
        let digest = outcome.checkpoint.digest()?;
        let mut pl_ref = None;
        if let Some(dir) = out {
            let sd = stage_dir(dir, b);
            outcome.checkpoint.save(&sd.join("checkpoint.bin"))?;
            if let Some(pl) = &outcome.pseudo_labels {
                save_dataset(pl, &sd.join("pseudo_labels"))?;
                pl_ref = Some(format!("stage_{b}/pseudo_labels"));
            }
            report.write(&sd)?;
        } else if outcome.pseudo_labels.is_some() {
            pl_ref = Some(format!("stage_{b}/pseudo_labels"));
        }
        result.stages.push(StageRun {
            stage: b,
            method: plan.method,
            classes: plan.stages[b].clone(),
            input_checkpoint: outcome.checkpoint.parent_digest.clone(),
            checkpoint_digest: digest,
            pseudo_labels: pl_ref,
            train_sequences: n_seq,
            seed: cfg.training.seed,
            history: outcome.history,
        });
        result.reports.push(report);
        result.checkpoints.push(outcome.checkpoint);
    }
    if let Some(dir) = out {
        let echo = ProtocolEcho { plan, config: cfg, stages: &result.stages };
        let text = serde_json::to_string_pretty(&echo).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("protocol.json"), text)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::general_to_specific;
    use crate::simworld::WorldConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world = WorldConfig { n_sequences: 6, n_val_sequences: 3, frames_per_sequence: 8, ..WorldConfig::default() };
        cfg.training.epochs = 2;
        cfg
    }

    #[test]
    fn missing_prev_is_state_error() {
        let cfg = tiny();
        let splits = build_world(&cfg).unwrap();
        let plan = general_to_specific(&cfg.world.class_frequencies, Method::Cooler).unwrap();
        assert!(matches!(train_stage(None, &splits.train, &plan, 1, &cfg), Err(Error::State(_))));
    }

    #[test]
    fn stage_one_reads_only_new_class_labels() {
        let cfg = tiny();
        let splits = build_world(&cfg).unwrap();
        for method in [Method::Cooler, Method::DetPl, Method::Finetune] {
            let plan = general_to_specific(&cfg.world.class_frequencies, method).unwrap();
            let s0 = train_stage(None, &splits.train, &plan, 0, &cfg).unwrap();
            let audited = AuditedData::new(splits.train.clone());
            let s1 = train_stage(Some(&s0.checkpoint), &audited, &plan, 1, &cfg).unwrap();
            assert!(audited.classes_read().is_subset(&plan.stages[1]), "{method}: {:?}", audited.classes_read());
            assert_eq!(s1.checkpoint.parent_digest, Some(s0.checkpoint.digest().unwrap()));
            assert_eq!(s1.checkpoint.model.classes, vec![0, 1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn proposal_identities_are_never_used() {
        let cfg = tiny();
        let splits = build_world(&cfg).unwrap();
        let mut scrubbed = splits.train.clone();
        for f in scrubbed.sequences.iter_mut().flat_map(|s| s.frames.iter_mut()) {
            for p in &mut f.proposals {
                p.instance_id = None;
                p.class_id = 0;
            }
        }
        let plan = general_to_specific(&cfg.world.class_frequencies, Method::Cooler).unwrap();
        let a = train_stage(None, &splits.train, &plan, 0, &cfg).unwrap().checkpoint;
        let b = train_stage(None, &scrubbed, &plan, 0, &cfg).unwrap().checkpoint;
        assert_eq!(a, b);
    }

    #[test]
    fn det_pls_use_fresh_ids() {
        let cfg = tiny();
        let splits = build_world(&cfg).unwrap();
        let plan = general_to_specific(&cfg.world.class_frequencies, Method::DetPl).unwrap();
        let s0 = train_stage(None, &splits.train, &plan, 0, &cfg).unwrap();
        let pl = generate_det_pls(&s0.checkpoint.model, &splits.train.videos(), &cfg.tracker, 0.0).unwrap();
        let mut ids = BTreeSet::new();
        for s in &pl.sequences {
            for a in s.frames.iter().flat_map(|f| &f.annotations) {
                assert!(ids.insert((s.id, a.instance_id)));
                assert!(plan.stages[0].contains(&a.class_id));
            }
        }
        assert!(generate_det_pls(&s0.checkpoint.model, &splits.train.videos(), &cfg.tracker, 1.0)
            .unwrap()
            .sequences
            .iter()
            .all(|s| s.frames.iter().all(|f| f.annotations.is_empty())));
    }

    #[test]
    fn protocol_writes_run_directory() {
        let cfg = tiny();
        let splits = build_world(&cfg).unwrap();
        let plan = general_to_specific(&cfg.world.class_frequencies, Method::Cooler).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run_protocol(&splits, &plan, &cfg, Some(dir.path())).unwrap();
        assert_eq!(res.reports.len(), 2);
        for b in 0..2 {
            for f in ["checkpoint.bin", "metrics.json", "metrics.csv"] {
                assert!(stage_dir(dir.path(), b).join(f).exists());
            }
        }
        assert!(stage_dir(dir.path(), 1).join("pseudo_labels/manifest.json").exists());
        assert!(dir.path().join("protocol.json").exists());
        let again = run_protocol(&splits, &plan, &cfg, None).unwrap();
        assert_eq!(again.reports, res.reports);
    }
}
