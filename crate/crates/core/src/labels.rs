//! Label-set algebra over datasets and stage plans.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassSet, InstanceId, SequenceDataset};
use crate::error::{Error, Result};

/// Pseudo-label instance ids are shifted to at least this value when merged
/// with ground truth.
pub const PSEUDO_ID_BASE: InstanceId = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cooler,
    Finetune,
    DetPl,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cooler, Method::Finetune, Method::DetPl, Method::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cooler => "cooler",
            Method::Finetune => "finetune",
            Method::DetPl => "detpl",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cooler" => Ok(Method::Cooler),
            "finetune" | "finetuning" => Ok(Method::Finetune),
            "detpl" => Ok(Method::DetPl),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Ordered, pairwise disjoint class groups plus the training method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<ClassSet>,
    pub method: Method,
}

impl StagePlan {
    pub fn new(stages: Vec<ClassSet>, method: Method) -> Result<Self> {
        let plan = Self { stages, method };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Plan("plan has no stages".into()));
        }
        let mut seen = BTreeSet::new();
        for (b, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Plan(format!("stage {b} has no classes")));
            }
            for &c in stage {
                if !seen.insert(c) {
                    return Err(Error::Plan(format!("class {c} appears in more than one stage")));
                }
            }
        }
        Ok(())
    }

    /// Classes introduced before stage `b`.
    pub fn old_classes(&self, b: usize) -> ClassSet {
        self.stages[..b].iter().flatten().copied().collect()
    }

    /// Classes introduced up to and including stage `b`.
    pub fn seen_classes(&self, b: usize) -> ClassSet {
        self.stages[..=b].iter().flatten().copied().collect()
    }

    pub fn all_classes(&self) -> ClassSet {
        self.stages.iter().flatten().copied().collect()
    }
}

/// Keeps sequences with at least one ground-truth object of `classes`, with all their frames.
pub fn select_sequences(ds: &SequenceDataset, classes: &ClassSet) -> SequenceDataset {
    let sequences = ds
        .sequences
        .iter()
        .filter(|s| {
            s.frames
                .iter()
                .flat_map(|f| &f.annotations)
                .any(|a| a.is_ground_truth() && classes.contains(&a.class_id))
        })
        .cloned()
        .collect();
    SequenceDataset { sequences, class_names: ds.class_names.clone() }
}

/// Removes every annotation whose class is not in `keep`. Proposals are untouched.
pub fn strip_labels(ds: &SequenceDataset, keep: &ClassSet) -> SequenceDataset {
    let mut out = ds.clone();
    for seq in &mut out.sequences {
        for frame in &mut seq.frames {
            frame.annotations.retain(|a| keep.contains(&a.class_id));
        }
    }
    out
}

/// Per-frame union of new-class ground truth and old-class pseudo-labels.
///
/// Pseudo-label instance ids are moved into `[PSEUDO_ID_BASE, ..)`; proposals
/// come from `gt_new`.
pub fn merge_labels(gt_new: &SequenceDataset, pl_old: &SequenceDataset) -> Result<SequenceDataset> {
    let overlap: Vec<ClassId> =
        gt_new.annotated_classes().intersection(&pl_old.annotated_classes()).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Conflict(format!("classes {overlap:?} labeled in both inputs")));
    }
    if gt_new.sequences.len() != pl_old.sequences.len() {
        return Err(Error::Format(format!(
            "sequence count mismatch: {} vs {}",
            gt_new.sequences.len(),
            pl_old.sequences.len()
        )));
    }
    let mut out = gt_new.clone();
    for (seq, pl_seq) in out.sequences.iter_mut().zip(&pl_old.sequences) {
        if seq.id != pl_seq.id || seq.frames.len() != pl_seq.frames.len() {
            return Err(Error::Format(format!("sequence {} / {} frame range mismatch", seq.id, pl_seq.id)));
        }
        for (frame, pl_frame) in seq.frames.iter_mut().zip(&pl_seq.frames) {
            if frame.frame_index != pl_frame.frame_index {
                return Err(Error::Format(format!(
                    "sequence {} frame {} vs {} mismatch",
                    seq.id, frame.frame_index, pl_frame.frame_index
                )));
            }
            if let Some(a) = frame.annotations.iter().find(|a| a.instance_id.is_some_and(|i| i >= PSEUDO_ID_BASE)) {
                return Err(Error::Conflict(format!(
                    "ground-truth instance {:?} inside the reserved pseudo-label range",
                    a.instance_id
                )));
            }
            frame.annotations.extend(pl_frame.annotations.iter().map(|a| {
                let mut a = a.clone();
                a.instance_id = a.instance_id.map(|i| i + PSEUDO_ID_BASE);
                a
            }));
        }
    }
    Ok(out)
}
