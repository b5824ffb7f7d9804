//! Sequence datasets and their on-disk directory format.
//!
//! A dataset directory holds `manifest.json` plus one `seq_<id>.jsonl` per
//! sequence. Each line of a sequence file is one frame:
//!
//! ```text
//! {"frame": n, "annotations": [{"box": [cx, cy, w, h], "class": c,
//!   "instance": i | null, "conf": p | null, "feat": [...]}], "proposals": [...]}
//! ```
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that every `f64` survives a save/load cycle bit-for-bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub type ClassId = usize;
pub type InstanceId = u64;
pub type SequenceId = u64;
pub type ClassSet = BTreeSet<ClassId>;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One labeled or proposed box with its appearance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub instance_id: Option<InstanceId>,
    /// `None` marks ground truth.
    pub confidence: Option<f64>,
    pub feature: Vec<f64>,
}

impl Annotation {
    pub fn ground_truth(bbox: BoundingBox, class_id: ClassId, instance_id: InstanceId, feature: Vec<f64>) -> Self {
        Self { bbox, class_id, instance_id: Some(instance_id), confidence: None, feature }
    }

    pub fn is_ground_truth(&self) -> bool {
        self.confidence.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_index: usize,
    pub annotations: Vec<Annotation>,
    /// Detector-noise outputs. Their `instance_id` is only used for target bookkeeping.
    pub proposals: Vec<Annotation>,
}

impl Frame {
    pub fn empty(frame_index: usize) -> Self {
        Self { frame_index, annotations: Vec::new(), proposals: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: SequenceId,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
    pub class_names: BTreeMap<ClassId, String>,
}

impl SequenceDataset {
    pub fn new(class_names: BTreeMap<ClassId, String>) -> Self {
        Self { sequences: Vec::new(), class_names }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = (&Sequence, &Frame)> {
        self.sequences.iter().flat_map(|s| s.frames.iter().map(move |f| (s, f)))
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn num_annotations(&self) -> usize {
        self.frames().map(|(_, f)| f.annotations.len()).sum()
    }

    pub fn sequence(&self, id: SequenceId) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// Copy of the dataset with every annotation list cleared.
    pub fn videos(&self) -> SequenceDataset {
        let mut out = self.clone();
        for seq in &mut out.sequences {
            for frame in &mut seq.frames {
                frame.annotations.clear();
            }
        }
        out
    }

    /// Classes that occur among the annotations.
    pub fn annotated_classes(&self) -> ClassSet {
        self.frames().flat_map(|(_, f)| f.annotations.iter().map(|a| a.class_id)).collect()
    }

    /// Checks every structural invariant, naming the first offending sequence/frame.
    pub fn validate(&self) -> Result<()> {
        let mut seen_ids = BTreeSet::new();
        for seq in &self.sequences {
            if !seen_ids.insert(seq.id) {
                return Err(Error::Format(format!("duplicate sequence id {}", seq.id)));
            }
            let mut instance_class: HashMap<InstanceId, ClassId> = HashMap::new();
            let mut prev: Option<usize> = None;
            for frame in &seq.frames {
                let at = || format!("sequence {} frame {}", seq.id, frame.frame_index);
                if let Some(p) = prev {
                    if frame.frame_index <= p {
                        return Err(Error::Format(format!("{}: frame index not increasing", at())));
                    }
                }
                prev = Some(frame.frame_index);
                let mut pairs = BTreeSet::new();
                for ann in &frame.annotations {
                    validate_annotation(ann).map_err(|m| Error::Format(format!("{}: {m}", at())))?;
                    if ann.is_ground_truth() && ann.instance_id.is_none() {
                        return Err(Error::Format(format!("{}: ground truth without instance id", at())));
                    }
                    if !pairs.insert((ann.class_id, ann.instance_id)) {
                        return Err(Error::Format(format!(
                            "{}: duplicate (class {}, instance {:?})",
                            at(),
                            ann.class_id,
                            ann.instance_id
                        )));
                    }
                    if let Some(id) = ann.instance_id {
                        let class = *instance_class.entry(id).or_insert(ann.class_id);
                        if class != ann.class_id {
                            return Err(Error::Format(format!("{}: instance {id} changes class", at())));
                        }
                    }
                }
                for prop in &frame.proposals {
                    validate_annotation(prop).map_err(|m| Error::Format(format!("{}: proposal {m}", at())))?;
                }
            }
        }
        Ok(())
    }
}

fn validate_annotation(ann: &Annotation) -> std::result::Result<(), String> {
    if !ann.bbox.is_valid() {
        return Err(format!("invalid box {:?}", ann.bbox.to_array()));
    }
    if let Some(c) = ann.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(format!("confidence {c} outside [0,1]"));
        }
    }
    if ann.feature.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature".to_string());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    class_names: BTreeMap<ClassId, String>,
    sequences: Vec<SequenceId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame: usize,
    annotations: Vec<AnnotationRecord>,
    proposals: Vec<AnnotationRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: ClassId,
    instance: Option<InstanceId>,
    conf: Option<f64>,
    feat: Vec<f64>,
}

impl From<AnnotationRecord> for Annotation {
    fn from(r: AnnotationRecord) -> Self {
        let [cx, cy, w, h] = r.bbox;
        Annotation {
            bbox: BoundingBox::new(cx, cy, w, h),
            class_id: r.class,
            instance_id: r.instance,
            confidence: r.conf,
            feature: r.feat,
        }
    }
}

fn push_float(out: &mut String, v: f64) {
    // 17 significant digits round-trips any finite f64.
    let _ = write!(out, "{v:.16e}");
}

fn push_floats(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_float(out, *v);
    }
    out.push(']');
}

fn push_annotation(out: &mut String, a: &Annotation) {
    out.push_str("{\"box\":");
    push_floats(out, &a.bbox.to_array());
    let _ = write!(out, ",\"class\":{},\"instance\":", a.class_id);
    match a.instance_id {
        Some(id) => {
            let _ = write!(out, "{id}");
        }
        None => out.push_str("null"),
    }
    out.push_str(",\"conf\":");
    match a.confidence {
        Some(c) => push_float(out, c),
        None => out.push_str("null"),
    }
    out.push_str(",\"feat\":");
    push_floats(out, &a.feature);
    out.push('}');
}

fn push_annotations(out: &mut String, anns: &[Annotation]) {
    out.push('[');
    for (i, a) in anns.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_annotation(out, a);
    }
    out.push(']');
}

/// Serializes one frame as a single JSON line (no trailing newline).
pub fn frame_to_json_line(frame: &Frame) -> String {
    let mut out = String::with_capacity(256 + 64 * frame.annotations.len());
    let _ = write!(out, "{{\"frame\":{},\"annotations\":", frame.frame_index);
    push_annotations(&mut out, &frame.annotations);
    out.push_str(",\"proposals\":");
    push_annotations(&mut out, &frame.proposals);
    out.push('}');
    out
}

pub fn frame_from_json_line(line: &str) -> std::result::Result<Frame, serde_json::Error> {
    let rec: FrameRecord = serde_json::from_str(line)?;
    Ok(Frame {
        frame_index: rec.frame,
        annotations: rec.annotations.into_iter().map(Annotation::from).collect(),
        proposals: rec.proposals.into_iter().map(Annotation::from).collect(),
    })
}

pub fn sequence_file_name(id: SequenceId) -> String {
    format!("seq_{id}.jsonl")
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset(ds: &SequenceDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: 1,
        class_names: ds.class_names.clone(),
        sequences: ds.sequences.iter().map(|s| s.id).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    for seq in &ds.sequences {
        let mut w = BufWriter::new(fs::File::create(dir.join(sequence_file_name(seq.id)))?);
        for frame in &seq.frames {
            w.write_all(frame_to_json_line(frame).as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads and validates a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SequenceDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotFound(format!("{} has no {MANIFEST_FILE}", dir.display())));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let mut ds = SequenceDataset::new(manifest.class_names);
    for id in manifest.sequences {
        let path = dir.join(sequence_file_name(id));
        let file = fs::File::open(&path)
            .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        let mut frames = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let frame = frame_from_json_line(&line).map_err(|e| {
                Error::Format(format!("sequence {id} line {}: {e}", lineno + 1))
            })?;
            frames.push(frame);
        }
        ds.sequences.push(Sequence { id, frames });
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn gt(class: ClassId, inst: InstanceId, cx: f64) -> Annotation {
        Annotation::ground_truth(BoundingBox::new(cx, 0.5, 0.1, 0.1), class, inst, vec![cx, class as f64])
    }

    pub fn names(n: usize) -> BTreeMap<ClassId, String> {
        (0..n).map(|c| (c, format!("class{c}"))).collect()
    }

    /// Sequence of `frames` frames, each holding the given annotations.
    pub fn seq(id: SequenceId, frames: usize, anns: &[Annotation]) -> Sequence {
        Sequence {
            id,
            frames: (0..frames)
                .map(|i| Frame { frame_index: i, annotations: anns.to_vec(), proposals: anns.to_vec() })
                .collect(),
        }
    }
}
