//! CLEAR-MOT MOTA, identity IDF1 and detection AP, per class and pooled.
//!
//! Matching is always class-constrained: a prediction can only match ground
//! truth of its own class. Predictions are ordinary datasets whose
//! annotations carry a track id and a confidence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::dataset::{ClassId, ClassSet, InstanceId, Sequence, SequenceDataset};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const EVAL_IOU: f64 = 0.5;

/// A box with the identity it carries in its source (GT instance or track id).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdBox {
    pub id: InstanceId,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Per-frame correspondence. Pairs from `carry` (ground-truth id to
/// prediction id, previous frame) are kept when their IoU still reaches
/// `iou_thr`; the rest are matched by maximum total IoU over pairs at or
/// above the threshold. Returns `(gt index, pred index)` pairs.
pub fn match_frames(
    gt: &[IdBox],
    pred: &[IdBox],
    carry: &BTreeMap<InstanceId, InstanceId>,
    iou_thr: f64,
) -> Vec<(usize, usize)> {
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        let Some(&pid) = carry.get(&g.id) else { continue };
        if let Some(j) = pred.iter().position(|p| p.id == pid) {
            if !pred_used[j] && g.bbox.iou(&pred[j].bbox) >= iou_thr {
                gt_used[i] = true;
                pred_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    let iou: Vec<Vec<f64>> = gt.iter().map(|g| pred.iter().map(|p| g.bbox.iou(&p.bbox)).collect()).collect();
    let rest = max_weight_matching(&iou, pred.len(), |i, j| !gt_used[i] && !pred_used[j] && iou[i][j] >= iou_thr);
    pairs.extend(rest);
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClearCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
}

impl ClearCounts {
    pub fn add(&mut self, o: &ClearCounts) {
        self.gt += o.gt;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
    }

    /// `1 - (FN + FP + IDSW) / GT`, undefined without ground truth.
    pub fn mota(&self) -> Option<f64> {
        (self.gt > 0).then(|| 1.0 - (self.fn_ + self.fp + self.idsw) as f64 / self.gt as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl IdCounts {
    pub fn add(&mut self, o: &IdCounts) {
        self.idtp += o.idtp;
        self.idfp += o.idfp;
        self.idfn += o.idfn;
    }

    pub fn idf1(&self) -> Option<f64> {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        (self.idtp + self.idfn > 0).then(|| if denom == 0 { 0.0 } else { 2.0 * self.idtp as f64 / denom as f64 })
    }
}

/// Frame-aligned boxes of one class in one sequence: `(gt, pred)` per frame.
pub type ClassTrack = Vec<(Vec<IdBox>, Vec<IdBox>)>;

fn boxes_of(anns: &[crate::dataset::Annotation], class: ClassId, next_anon: &mut InstanceId) -> Vec<IdBox> {
    anns.iter()
        .filter(|a| a.class_id == class)
        .map(|a| {
            let id = a.instance_id.unwrap_or_else(|| {
                *next_anon -= 1;
                *next_anon
            });
            IdBox { id, bbox: a.bbox, confidence: a.confidence.unwrap_or(1.0) }
        })
        .collect()
}

/// Aligns one ground-truth sequence with its prediction by frame index.
/// Prediction frames absent from the ground truth are ignored; a missing
/// prediction sequence counts as empty.
pub fn align_class(gt: &Sequence, pred: Option<&Sequence>, class: ClassId) -> ClassTrack {
    let pred_frames: BTreeMap<usize, &crate::dataset::Frame> =
        pred.map(|s| s.frames.iter().map(|f| (f.frame_index, f)).collect()).unwrap_or_default();
    let mut anon = InstanceId::MAX;
    gt.frames
        .iter()
        .map(|f| {
            let g = boxes_of(&f.annotations, class, &mut anon);
            let p = pred_frames.get(&f.frame_index).map(|pf| boxes_of(&pf.annotations, class, &mut anon)).unwrap_or_default();
            (g, p)
        })
        .collect()
}

/// CLEAR-MOT counts over one aligned sequence. An identity switch is counted
/// when a ground-truth object is matched to a different prediction id than at
/// its previous matched frame.
pub fn clear_counts(seq: &ClassTrack, iou_thr: f64) -> ClearCounts {
    let mut c = ClearCounts::default();
    let mut carry: BTreeMap<InstanceId, InstanceId> = BTreeMap::new();
    let mut last: BTreeMap<InstanceId, InstanceId> = BTreeMap::new();
    for (gt, pred) in seq {
        let pairs = match_frames(gt, pred, &carry, iou_thr);
        c.gt += gt.len();
        c.tp += pairs.len();
        c.fn_ += gt.len() - pairs.len();
        c.fp += pred.len() - pairs.len();
        carry.clear();
        for &(i, j) in &pairs {
            let (gid, pid) = (gt[i].id, pred[j].id);
            if last.get(&gid).is_some_and(|&prev| prev != pid) {
                c.idsw += 1;
            }
            last.insert(gid, pid);
            carry.insert(gid, pid);
        }
    }
    c
}

/// Identity counts over one aligned sequence: optimal one-to-one matching of
/// ground-truth trajectories to predicted tracks maximizing the number of
/// co-occurring frames with IoU at or above the threshold.
pub fn id_counts(seq: &ClassTrack, iou_thr: f64) -> IdCounts {
    let mut gt_ids: BTreeMap<InstanceId, usize> = BTreeMap::new();
    let mut pred_ids: BTreeMap<InstanceId, usize> = BTreeMap::new();
    let (mut n_gt, mut n_pred) = (0, 0);
    for (gt, pred) in seq {
        n_gt += gt.len();
        n_pred += pred.len();
        for g in gt {
            let k = gt_ids.len();
            gt_ids.entry(g.id).or_insert(k);
        }
        for p in pred {
            let k = pred_ids.len();
            pred_ids.entry(p.id).or_insert(k);
        }
    }
    let mut overlap = vec![vec![0.0; pred_ids.len()]; gt_ids.len()];
    for (gt, pred) in seq {
        for g in gt {
            for p in pred {
                if g.bbox.iou(&p.bbox) >= iou_thr {
                    overlap[gt_ids[&g.id]][pred_ids[&p.id]] += 1.0;
                }
            }
        }
    }
    let matched = max_weight_matching(&overlap, pred_ids.len(), |i, j| overlap[i][j] > 0.0);
    let idtp = matched.iter().map(|&(i, j)| overlap[i][j] as usize).sum::<usize>();
    IdCounts { idtp, idfp: n_pred - idtp, idfn: n_gt - idtp }
}

/// Detection counts with class-constrained, maximum-IoU matching per frame.
pub fn detection_counts(seq: &ClassTrack, iou_thr: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (gt, pred) in seq {
        let m = match_frames(gt, pred, &BTreeMap::new(), iou_thr).len();
        tp += m;
        fp += pred.len() - m;
        fn_ += gt.len() - m;
    }
    (tp, fp, fn_)
}

/// All-point interpolated average precision. Detections are processed in
/// descending confidence; each takes the unmatched ground truth of its frame
/// with the highest IoU at or above the threshold. Precision and recall are
/// read only at confidence thresholds, so detections with equal confidence
/// enter the curve together.
pub fn average_precision(seqs: &[ClassTrack], iou_thr: f64) -> Option<f64> {
    let n_gt: usize = seqs.iter().flat_map(|s| s.iter()).map(|(g, _)| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        for (f, (_, pred)) in seq.iter().enumerate() {
            for (k, p) in pred.iter().enumerate() {
                dets.push((p.confidence, s, f, k));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut taken: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut hits = Vec::with_capacity(dets.len());
    for &(_, s, f, k) in &dets {
        let (gt, pred) = &seqs[s][f];
        let best = gt
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken.contains(&(s, f, *g)))
            .map(|(g, b)| (g, b.bbox.iou(&pred[k].bbox)))
            .filter(|&(_, iou)| iou >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((g, _)) => {
                taken.insert((s, f, g));
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        if dets.get(i + 1).is_some_and(|next| next.0 == dets[i].0) {
            continue;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub name: String,
    pub mota: Option<f64>,
    pub idf1: Option<f64>,
    pub ap: Option<f64>,
    pub counts: ClearCounts,
    pub id_counts: IdCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub mota: Option<f64>,
    pub idf1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub mmota: Option<f64>,
    pub midf1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stage: usize,
    pub method: String,
    pub classes: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
    pub means: MeanMetrics,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates every class of `classes` on the ground-truth annotations of `gt`.
pub fn evaluate_classes(gt: &SequenceDataset, pred: &SequenceDataset, classes: &ClassSet) -> Vec<ClassMetrics> {
    use rayon::prelude::*;
    let pred_by_id: BTreeMap<_, _> = pred.sequences.iter().map(|s| (s.id, s)).collect();
    classes
        .par_iter()
        .map(|&c| {
            let aligned: Vec<ClassTrack> =
                gt.sequences.iter().map(|s| align_class(s, pred_by_id.get(&s.id).copied(), c)).collect();
            let mut counts = ClearCounts::default();
            let mut ids = IdCounts::default();
            for a in &aligned {
                counts.add(&clear_counts(a, EVAL_IOU));
                ids.add(&id_counts(a, EVAL_IOU));
            }
            ClassMetrics {
                class_id: c,
                name: gt.class_names.get(&c).cloned().unwrap_or_else(|| format!("class_{c}")),
                mota: counts.mota(),
                idf1: ids.idf1(),
                ap: average_precision(&aligned, EVAL_IOU),
                counts,
                id_counts: ids,
            }
        })
        .collect()
}

/// Assembles per-class results into a report. Classes without ground truth
/// are listed but left out of every mean and pooled figure.
pub fn build_report(classes: Vec<ClassMetrics>, stage: usize, method: &str) -> MetricReport {
    let mut counts = ClearCounts::default();
    let mut ids = IdCounts::default();
    for c in classes.iter().filter(|c| c.counts.gt > 0) {
        counts.add(&c.counts);
        ids.add(&c.id_counts);
    }
    MetricReport {
        stage,
        method: method.to_string(),
        overall: OverallMetrics { mota: counts.mota(), idf1: ids.idf1(), map: mean(classes.iter().map(|c| c.ap)) },
        means: MeanMetrics { mmota: mean(classes.iter().map(|c| c.mota)), midf1: mean(classes.iter().map(|c| c.idf1)) },
        classes,
    }
}

pub fn evaluate(gt: &SequenceDataset, pred: &SequenceDataset, classes: &ClassSet, stage: usize, method: &str) -> MetricReport {
    build_report(evaluate_classes(gt, pred, classes), stage, method)
}

/// Detection precision/recall F1 of `pred` against `gt` over `classes`.
pub fn detection_f1(gt: &SequenceDataset, pred: &SequenceDataset, classes: &ClassSet) -> f64 {
    let pred_by_id: BTreeMap<_, _> = pred.sequences.iter().map(|s| (s.id, s)).collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &c in classes {
        for s in &gt.sequences {
            let (t, f, n) = detection_counts(&align_class(s, pred_by_id.get(&s.id).copied(), c), EVAL_IOU);
            tp += t;
            fp += f;
            fn_ += n;
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    stage: usize,
    method: &'a str,
    class: &'a str,
    #[serde(rename = "MOTA")]
    mota: Option<f64>,
    #[serde(rename = "IDF1")]
    idf1: Option<f64>,
    #[serde(rename = "AP")]
    ap: Option<f64>,
    #[serde(rename = "TP")]
    tp: usize,
    #[serde(rename = "FP")]
    fp: usize,
    #[serde(rename = "FN")]
    fn_: usize,
    #[serde(rename = "IDSW")]
    idsw: usize,
    #[serde(rename = "GT")]
    gt: usize,
}

impl MetricReport {
    pub fn class(&self, c: ClassId) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class_id == c)
    }

    /// Mean of a per-class metric over the given classes, skipping undefined entries.
    pub fn mean_over(&self, classes: &ClassSet, metric: impl Fn(&ClassMetrics) -> Option<f64>) -> Option<f64> {
        mean(self.classes.iter().filter(|m| classes.contains(&m.class_id)).map(metric))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// One row per class plus a pooled `overall` row whose AP column holds the mAP.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut total = ClearCounts::default();
        for c in &self.classes {
            total.add(&c.counts);
            w.serialize(CsvRow {
                stage: self.stage,
                method: &self.method,
                class: &c.name,
                mota: c.mota,
                idf1: c.idf1,
                ap: c.ap,
                tp: c.counts.tp,
                fp: c.counts.fp,
                fn_: c.counts.fn_,
                idsw: c.counts.idsw,
                gt: c.counts.gt,
            })
            .map_err(csv_err)?;
        }
        w.serialize(CsvRow {
            stage: self.stage,
            method: &self.method,
            class: "overall",
            mota: self.overall.mota,
            idf1: self.overall.idf1,
            ap: self.overall.map,
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            idsw: total.idsw,
            gt: total.gt,
        })
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::{gt, names, seq};
    use crate::dataset::Frame;

    fn ib(id: InstanceId, cx: f64) -> IdBox {
        IdBox { id, bbox: BoundingBox::new(cx, 0.5, 0.1, 0.1), confidence: 1.0 }
    }

    #[test]
    fn identical_boxes_all_match() {
        let g = [ib(1, 0.2), ib(2, 0.6)];
        assert_eq!(match_frames(&g, &g, &BTreeMap::new(), 0.5), vec![(0, 0), (1, 1)]);
        assert!(match_frames(&g, &[], &BTreeMap::new(), 0.5).is_empty());
    }

    #[test]
    fn crossed_ious_take_max_sum() {
        // gt0-p0 0.6, gt0-p1 0.55, gt1-p0 0.9, gt1-p1 0.2: best sum pairs gt0-p1, gt1-p0
        let iou = vec![vec![0.6, 0.55], vec![0.9, 0.2]];
        let m = max_weight_matching(&iou, 2, |i, j| iou[i][j] >= 0.5);
        assert_eq!(m, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn carry_over_beats_better_iou() {
        let g = [ib(1, 0.5)];
        let p = [ib(7, 0.52), ib(8, 0.5)];
        let carry = BTreeMap::from([(1, 7)]);
        assert_eq!(match_frames(&g, &p, &carry, 0.5), vec![(0, 0)]);
        assert_eq!(match_frames(&g, &p, &BTreeMap::new(), 0.5), vec![(0, 1)]);
    }

    #[test]
    fn mota_hand_count() {
        // 4 objects over 3 frames (10 GT boxes): 2 misses, 1 clutter, 1 switch
        let frames: ClassTrack = vec![
            (vec![ib(1, 0.1), ib(2, 0.3), ib(3, 0.5), ib(4, 0.7)], vec![ib(11, 0.1), ib(12, 0.3), ib(13, 0.5), ib(14, 0.7)]),
            (vec![ib(1, 0.1), ib(2, 0.3), ib(3, 0.5)], vec![ib(11, 0.1), ib(99, 0.3), ib(50, 0.9)]),
            (vec![ib(1, 0.1), ib(2, 0.3), ib(3, 0.5)], vec![ib(11, 0.1), ib(99, 0.3), ib(13, 0.5)]),
        ];
        let c = clear_counts(&frames, 0.5);
        assert_eq!((c.gt, c.fn_, c.fp, c.idsw), (10, 1, 1, 1));
        let frames2: ClassTrack = frames
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, (g, mut p))| {
                if i == 0 {
                    p.pop();
                }
                (g, p)
            })
            .collect();
        let c = clear_counts(&frames2, 0.5);
        assert_eq!((c.gt, c.fn_, c.fp, c.idsw), (10, 2, 1, 1));
        assert!((c.mota().unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn idf1_split_trajectory() {
        let frames: ClassTrack = (0..10).map(|f| (vec![ib(1, 0.5)], vec![ib(if f < 5 { 7 } else { 8 }, 0.5)])).collect();
        let ids = id_counts(&frames, 0.5);
        assert_eq!(ids, IdCounts { idtp: 5, idfp: 5, idfn: 5 });
        assert_eq!(ids.idf1(), Some(0.5));
        let empty: ClassTrack = (0..3).map(|_| (vec![ib(1, 0.5)], vec![])).collect();
        assert_eq!(id_counts(&empty, 0.5).idf1(), Some(0.0));
    }

    #[test]
    fn ap_hand_cases() {
        let one = vec![vec![(vec![ib(1, 0.5)], vec![IdBox { confidence: 0.9, ..ib(1, 0.5) }, IdBox { confidence: 0.8, ..ib(2, 0.9) }])]];
        assert_eq!(average_precision(&one, 0.5), Some(1.0));
        let none = vec![vec![(vec![ib(1, 0.5)], vec![])]];
        assert_eq!(average_precision(&none, 0.5), Some(0.0));
        // FP ranked first: precision 1/2 at full recall
        let fp_first = vec![vec![(vec![ib(1, 0.5)], vec![IdBox { confidence: 0.7, ..ib(1, 0.5) }, IdBox { confidence: 0.8, ..ib(2, 0.9) }])]];
        assert_eq!(average_precision(&fp_first, 0.5), Some(0.5));
        assert_eq!(average_precision(&[vec![(vec![], vec![ib(1, 0.5)])]], 0.5), None);
    }

    fn two_class_world() -> SequenceDataset {
        let mut ds = SequenceDataset::new(names(3));
        ds.sequences.push(seq(0, 4, &[gt(0, 1, 0.2), gt(1, 2, 0.6)]));
        ds.sequences.push(seq(1, 3, &[gt(0, 3, 0.4)]));
        ds
    }

    fn as_predictions(ds: &SequenceDataset) -> SequenceDataset {
        let mut p = ds.clone();
        for s in &mut p.sequences {
            for f in &mut s.frames {
                for a in &mut f.annotations {
                    a.confidence = Some(1.0);
                    a.instance_id = a.instance_id.map(|i| i + 40);
                }
            }
        }
        p
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ds = two_class_world();
        let r = evaluate(&ds, &as_predictions(&ds), &ClassSet::from([0, 1, 2]), 0, "oracle");
        for c in [0, 1] {
            let m = r.class(c).unwrap();
            assert_eq!((m.mota, m.idf1, m.ap), (Some(1.0), Some(1.0), Some(1.0)));
        }
        let absent = r.class(2).unwrap();
        assert_eq!((absent.mota, absent.idf1, absent.ap), (None, None, None));
        assert_eq!(r.means.mmota, Some(1.0));
        assert_eq!(r.overall.mota, Some(1.0));
        assert_eq!(detection_f1(&ds, &as_predictions(&ds), &ClassSet::from([0, 1])), 1.0);
    }

    #[test]
    fn class_mismatch_counts_as_miss_and_clutter() {
        let ds = two_class_world();
        let mut p = as_predictions(&ds);
        for f in &mut p.sequences[1].frames {
            f.annotations[0].class_id = 1;
        }
        let r = evaluate(&ds, &p, &ClassSet::from([0, 1]), 0, "x");
        assert_eq!(r.class(0).unwrap().counts.fn_, 3);
        assert_eq!(r.class(1).unwrap().counts.fp, 3);
    }

    #[test]
    fn means_exclude_undefined() {
        let mk = |c, mota: Option<f64>, gt| ClassMetrics {
            class_id: c,
            name: format!("c{c}"),
            mota,
            idf1: mota,
            ap: mota,
            counts: ClearCounts { gt, ..Default::default() },
            id_counts: IdCounts::default(),
        };
        let r = build_report(vec![mk(0, Some(0.6), 5), mk(1, Some(0.2), 5), mk(2, None, 0)], 1, "cooler");
        assert!((r.means.mmota.unwrap() - 0.4).abs() < 1e-15);
        let single = build_report(vec![mk(0, Some(0.6), 5)], 0, "cooler");
        assert_eq!(single.means.mmota, Some(0.6));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ds = two_class_world();
        let r = evaluate(&ds, &as_predictions(&ds), &ClassSet::from([0, 1]), 2, "detpl");
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,method,class,MOTA,IDF1,AP,TP,FP,FN,IDSW,GT");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("2,detpl,class0,1.0,1.0,1.0,"));
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_predictions_frames_missing() {
        let ds = two_class_world();
        let mut p = SequenceDataset::new(ds.class_names.clone());
        p.sequences.push(Sequence { id: 0, frames: vec![Frame::empty(0)] });
        let r = evaluate(&ds, &p, &ClassSet::from([0]), 0, "x");
        let m = r.class(0).unwrap();
        assert_eq!(m.idf1, Some(0.0));
        assert_eq!(m.counts.fn_, 7);
        assert_eq!(m.ap, Some(0.0));
    }
}
