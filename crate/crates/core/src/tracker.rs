//! Online tracking-by-detection.
//!
//! Each frame: score the proposals with the model, associate the surviving
//! detections to live tracks by bi-softmax embedding similarity (same class
//! only, optimal one-to-one), then update the track lifecycle. Tracks must
//! collect `min_hits` matches before they are emitted and survive up to
//! `max_age` unmatched frames.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::dataset::{Annotation, ClassId, Frame, InstanceId, Sequence, SequenceDataset, SequenceId};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::{softmax, TrackingModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub det_conf_thresh: f64,
    pub match_sim_thresh: f64,
    pub init_conf_thresh: f64,
    pub max_age: usize,
    pub min_hits: usize,
    pub nms_iou: f64,
    /// Mean confidence a track needs to become a pseudo-label.
    pub pl_conf_thresh: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            det_conf_thresh: 0.5,
            match_sim_thresh: 0.5,
            init_conf_thresh: 0.7,
            max_age: 5,
            min_hits: 2,
            nms_iou: 0.5,
            pl_conf_thresh: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("det_conf_thresh", self.det_conf_thresh),
            ("match_sim_thresh", self.match_sim_thresh),
            ("init_conf_thresh", self.init_conf_thresh),
            ("nms_iou", self.nms_iou),
            ("pl_conf_thresh", self.pl_conf_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

/// Per-proposal class probabilities with the proposal's objectness folded in:
/// foreground entries are `objectness * softmax`, the last entry is the
/// remaining (background) mass.
pub fn scored_probabilities(logits: &[f64], objectness: f64) -> Vec<f64> {
    let p = softmax(ndarray::ArrayView1::from(logits));
    let n = p.len();
    let mut out: Vec<f64> = p.iter().take(n - 1).map(|v| objectness * v).collect();
    let fg: f64 = out.iter().sum();
    out.push(1.0 - fg);
    out
}

/// Class-wise greedy non-maximum suppression; input order breaks ties.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

/// Scores every proposal of a frame and keeps those whose best foreground
/// probability reaches `det_conf_thresh`, after class-wise NMS.
pub fn score_proposals(model: &TrackingModel, frame: &Frame, cfg: &TrackerConfig) -> Result<Vec<Detection>> {
    if frame.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let f = model.params.dims().feature_dim;
    let mut x = Array2::zeros((frame.proposals.len(), f));
    for (i, p) in frame.proposals.iter().enumerate() {
        if p.feature.len() != f {
            return Err(Error::Shape(format!("proposal feature width {} != {f}", p.feature.len())));
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&p.feature));
    }
    let cache = model.params.forward_batch(&x)?;
    let mut dets = Vec::new();
    for (i, p) in frame.proposals.iter().enumerate() {
        let logits = cache.logits.row(i).to_vec();
        let probs = scored_probabilities(&logits, p.confidence.unwrap_or(1.0));
        let (k, &best) = probs[..probs.len() - 1]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one foreground class");
        if best >= cfg.det_conf_thresh {
            dets.push(Detection {
                bbox: p.bbox,
                class_id: model.classes[k],
                confidence: best,
                embedding: cache.embeds.row(i).to_vec(),
            });
        }
    }
    Ok(nms(dets, cfg.nms_iou))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bi-softmax similarity between track and detection embeddings. Softmaxes
/// run over candidates of the same class; cross-class entries are zero.
pub fn bisoftmax_similarity(
    track_embeds: &[&[f64]],
    track_classes: &[ClassId],
    det_embeds: &[&[f64]],
    det_classes: &[ClassId],
) -> Vec<Vec<f64>> {
    let (nt, nd) = (track_embeds.len(), det_embeds.len());
    let mut sim = vec![vec![0.0; nd]; nt];
    let raw: Vec<Vec<f64>> =
        track_embeds.iter().map(|e| det_embeds.iter().map(|d| dot(e, d)).collect()).collect();
    // over tracks, per detection
    for j in 0..nd {
        let rows: Vec<usize> = (0..nt).filter(|&i| track_classes[i] == det_classes[j]).collect();
        let m = rows.iter().map(|&i| raw[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = rows.iter().map(|&i| (raw[i][j] - m).exp()).sum();
        for &i in &rows {
            sim[i][j] += 0.5 * (raw[i][j] - m).exp() / z;
        }
    }
    // over detections, per track
    for i in 0..nt {
        let cols: Vec<usize> = (0..nd).filter(|&j| track_classes[i] == det_classes[j]).collect();
        let m = cols.iter().map(|&j| raw[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cols.iter().map(|&j| (raw[i][j] - m).exp()).sum();
        for &j in &cols {
            sim[i][j] += 0.5 * (raw[i][j] - m).exp() / z;
        }
    }
    sim
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(track index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Optimal one-to-one assignment maximizing total similarity over pairs with
/// equal class and similarity at least `threshold`.
pub fn assign(sim: &[Vec<f64>], track_classes: &[ClassId], det_classes: &[ClassId], threshold: f64) -> Assignment {
    let nd = det_classes.len();
    let matches = max_weight_matching(sim, nd, |i, j| {
        track_classes[i] == det_classes[j] && sim[i][j] >= threshold && sim[i][j] > 0.0
    });
    let mut t_used = vec![false; sim.len()];
    let mut d_used = vec![false; nd];
    for &(i, j) in &matches {
        t_used[i] = true;
        d_used[j] = true;
    }
    Assignment {
        matches,
        unmatched_tracks: (0..sim.len()).filter(|&i| !t_used[i]).collect(),
        unmatched_detections: (0..nd).filter(|&j| !d_used[j]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: ClassId,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: InstanceId,
    pub class_id: ClassId,
    pub boxes: Vec<TrackedBox>,
}

impl Track {
    pub fn mean_confidence(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes.iter().map(|b| b.confidence).sum::<f64>() / self.boxes.len() as f64
    }
}

/// Live state of a track during a pass over a sequence.
#[derive(Debug, Clone)]
pub struct ActiveTrack {
    pub track: Track,
    pub embedding: Vec<f64>,
    pub hits: usize,
    pub age: usize,
}

/// Matches live tracks to detections of one frame.
pub fn associate(tracks: &[ActiveTrack], detections: &[Detection], cfg: &TrackerConfig) -> Assignment {
    let te: Vec<&[f64]> = tracks.iter().map(|t| t.embedding.as_slice()).collect();
    let tc: Vec<ClassId> = tracks.iter().map(|t| t.track.class_id).collect();
    let de: Vec<&[f64]> = detections.iter().map(|d| d.embedding.as_slice()).collect();
    let dc: Vec<ClassId> = detections.iter().map(|d| d.class_id).collect();
    let sim = bisoftmax_similarity(&te, &tc, &de, &dc);
    assign(&sim, &tc, &dc, cfg.match_sim_thresh)
}

fn majority_class(boxes: &[TrackedBox]) -> ClassId {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for b in boxes {
        *counts.entry(b.class_id).or_default() += 1;
    }
    // ties go to the smallest class id
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(c, _)| c).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceTracks {
    pub sequence_id: SequenceId,
    pub tracks: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackOutput {
    pub sequences: Vec<SequenceTracks>,
}

/// Runs detection, association and lifecycle over one sequence and returns
/// the confirmed tracks.
pub fn track_sequence(model: &TrackingModel, seq: &Sequence, cfg: &TrackerConfig) -> Result<SequenceTracks> {
    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut finished: Vec<ActiveTrack> = Vec::new();
    let mut next_id: InstanceId = 1;
    for frame in &seq.frames {
        let dets = score_proposals(model, frame, cfg)?;
        let assignment = associate(&active, &dets, cfg);
        for &(ti, di) in &assignment.matches {
            let d = &dets[di];
            let t = &mut active[ti];
            t.track.boxes.push(TrackedBox {
                frame_index: frame.frame_index,
                bbox: d.bbox,
                confidence: d.confidence,
                class_id: d.class_id,
                embedding: d.embedding.clone(),
            });
            t.embedding = d.embedding.clone();
            t.hits += 1;
            t.age = 0;
        }
        for &ti in &assignment.unmatched_tracks {
            active[ti].age += 1;
        }
        let (keep, expired): (Vec<ActiveTrack>, Vec<ActiveTrack>) =
            active.into_iter().partition(|t| t.age <= cfg.max_age);
        active = keep;
        finished.extend(expired);
        for &di in &assignment.unmatched_detections {
            let d = &dets[di];
            if d.confidence < cfg.init_conf_thresh {
                continue;
            }
            active.push(ActiveTrack {
                track: Track {
                    track_id: next_id,
                    class_id: d.class_id,
                    boxes: vec![TrackedBox {
                        frame_index: frame.frame_index,
                        bbox: d.bbox,
                        confidence: d.confidence,
                        class_id: d.class_id,
                        embedding: d.embedding.clone(),
                    }],
                },
                embedding: d.embedding.clone(),
                hits: 1,
                age: 0,
            });
            next_id += 1;
        }
    }
    finished.extend(active);
    let mut tracks: Vec<Track> = finished
        .into_iter()
        .filter(|t| t.hits >= cfg.min_hits)
        .map(|t| {
            let mut track = t.track;
            track.class_id = majority_class(&track.boxes);
            track
        })
        .collect();
    tracks.sort_by_key(|t| t.track_id);
    Ok(SequenceTracks { sequence_id: seq.id, tracks })
}

/// Tracks every sequence of a dataset, in parallel across sequences.
pub fn track_dataset(model: &TrackingModel, ds: &SequenceDataset, cfg: &TrackerConfig) -> Result<TrackOutput> {
    let sequences = ds
        .sequences
        .par_iter()
        .map(|s| track_sequence(model, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrackOutput { sequences })
}

impl TrackOutput {
    /// Flattens tracks into per-frame annotations (instance id = track id)
    /// laid out on the frames of `template`. Proposals are not copied.
    pub fn to_dataset(&self, template: &SequenceDataset) -> SequenceDataset {
        let by_seq: BTreeMap<SequenceId, &SequenceTracks> = self.sequences.iter().map(|s| (s.sequence_id, s)).collect();
        let sequences = template
            .sequences
            .iter()
            .map(|seq| {
                let mut frames: Vec<Frame> = seq.frames.iter().map(|f| Frame::empty(f.frame_index)).collect();
                let pos: BTreeMap<usize, usize> =
                    seq.frames.iter().enumerate().map(|(i, f)| (f.frame_index, i)).collect();
                if let Some(st) = by_seq.get(&seq.id) {
                    for t in &st.tracks {
                        for b in &t.boxes {
                            if let Some(&i) = pos.get(&b.frame_index) {
                                frames[i].annotations.push(Annotation {
                                    bbox: b.bbox,
                                    class_id: t.class_id,
                                    instance_id: Some(t.track_id),
                                    confidence: Some(b.confidence.clamp(0.0, 1.0)),
                                    feature: b.embedding.clone(),
                                });
                            }
                        }
                    }
                }
                Sequence { id: seq.id, frames }
            })
            .collect();
        SequenceDataset { sequences, class_names: template.class_names.clone() }
    }

    pub fn num_tracks(&self) -> usize {
        self.sequences.iter().map(|s| s.tracks.len()).sum()
    }
}

/// Raw per-frame detections laid out as a dataset, each with a fresh instance
/// id. Used for detection pseudo-labels and for detection-quality baselines.
pub fn detections_to_dataset(
    model: &TrackingModel,
    videos: &SequenceDataset,
    cfg: &TrackerConfig,
    keep: impl Fn(&Detection) -> bool + Sync,
) -> Result<SequenceDataset> {
    let sequences = videos
        .sequences
        .par_iter()
        .map(|seq| {
            let mut next: InstanceId = 1;
            let mut frames = Vec::with_capacity(seq.frames.len());
            for f in &seq.frames {
                let mut out = Frame::empty(f.frame_index);
                for d in score_proposals(model, f, cfg)?.into_iter().filter(|d| keep(d)) {
                    out.annotations.push(Annotation {
                        bbox: d.bbox,
                        class_id: d.class_id,
                        instance_id: Some(next),
                        confidence: Some(d.confidence.clamp(0.0, 1.0)),
                        feature: d.embedding,
                    });
                    next += 1;
                }
                frames.push(out);
            }
            Ok(Sequence { id: seq.id, frames })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceDataset { sequences, class_names: videos.class_names.clone() })
}
