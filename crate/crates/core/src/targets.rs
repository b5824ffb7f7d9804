//! Assignment of training targets to proposals by box overlap.

use crate::dataset::{Annotation, ClassId, InstanceId};

pub const TARGET_IOU: f64 = 0.5;

/// Label a proposal inherits: the class and instance of the best-overlapping
/// annotation at IoU >= threshold, or nothing (background).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProposalTarget {
    pub class_id: Option<ClassId>,
    pub instance_id: Option<InstanceId>,
}

impl ProposalTarget {
    pub fn is_background(&self) -> bool {
        self.class_id.is_none()
    }
}

pub fn assign_targets(proposals: &[Annotation], labels: &[Annotation], iou_thr: f64) -> Vec<ProposalTarget> {
    proposals
        .iter()
        .map(|p| {
            let best = labels
                .iter()
                .map(|l| (p.bbox.iou(&l.bbox), l))
                .filter(|(iou, _)| *iou >= iou_thr)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, l)) => ProposalTarget { class_id: Some(l.class_id), instance_id: l.instance_id },
                None => ProposalTarget::default(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::gt;

    #[test]
    fn best_overlap_wins_and_misses_are_background() {
        let labels = [gt(0, 1, 0.30), gt(1, 2, 0.36)];
        let props = [gt(5, 9, 0.35), gt(5, 9, 0.80)];
        let t = assign_targets(&props, &labels, TARGET_IOU);
        assert_eq!(t[0], ProposalTarget { class_id: Some(1), instance_id: Some(2) });
        assert!(t[1].is_background());
    }
}
