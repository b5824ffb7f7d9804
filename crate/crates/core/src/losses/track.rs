use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::targets::ProposalTarget;

/// One anchor proposal with its positive and negative keys, all given as row
/// indices into an embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl AnchorPairs {
    /// Shifts the key indices, for when reference-frame rows follow the key frame.
    pub fn offset_keys(mut self, offset: usize) -> Self {
        self.positives.iter_mut().for_each(|i| *i += offset);
        self.negatives.iter_mut().for_each(|i| *i += offset);
        self
    }

    pub fn offset_anchor(mut self, offset: usize) -> Self {
        self.anchor += offset;
        self
    }
}

/// Pairs proposals of a key frame with proposals of the next frame.
///
/// Anchors are key-frame proposals assigned to a labeled instance. Positives
/// are reference proposals of the same instance, negatives those of other
/// instances; background proposals take no part. Anchors without a positive
/// are dropped.
pub fn sample_pairs(key: &[ProposalTarget], reference: &[ProposalTarget]) -> Vec<AnchorPairs> {
    key.iter()
        .enumerate()
        .filter_map(|(i, k)| {
            let inst = k.instance_id?;
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (j, r) in reference.iter().enumerate() {
                match r.instance_id {
                    Some(other) if other == inst => positives.push(j),
                    Some(_) => negatives.push(j),
                    None => {}
                }
            }
            (!positives.is_empty()).then_some(AnchorPairs { anchor: i, positives, negatives })
        })
        .collect()
}

/// Multi-positive contrastive loss on raw embeddings,
/// `mean_anchors log(1 + sum_neg sum_pos exp(v.k- - v.k+))`, with its gradient
/// with respect to every embedding row.
pub fn track_contrastive_loss(embeds: &Array2<f64>, anchors: &[AnchorPairs]) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(embeds.dim());
    let used: Vec<&AnchorPairs> = anchors.iter().filter(|a| !a.positives.is_empty()).collect();
    if used.is_empty() {
        return Ok((0.0, grad));
    }
    let n = embeds.nrows();
    let scale = 1.0 / used.len() as f64;
    let mut total = 0.0;
    for a in used {
        if a.anchor >= n || a.positives.iter().chain(&a.negatives).any(|&i| i >= n) {
            return Err(Error::Shape(format!("anchor indices out of range for {n} embeddings")));
        }
        let v = embeds.row(a.anchor);
        let pos_dots: Vec<f64> = a.positives.iter().map(|&p| v.dot(&embeds.row(p))).collect();
        let neg_dots: Vec<f64> = a.negatives.iter().map(|&q| v.dot(&embeds.row(q))).collect();
        // log(1 + sum exp(t)) with t = neg - pos, stabilized by m = max(0, max t)
        let m = neg_dots
            .iter()
            .flat_map(|nd| pos_dots.iter().map(move |pd| nd - pd))
            .fold(0.0f64, f64::max);
        let mut denom = (-m).exp();
        for nd in &neg_dots {
            for pd in &pos_dots {
                denom += (nd - pd - m).exp();
            }
        }
        total += m + denom.ln();

        let mut g_anchor = Array1::<f64>::zeros(embeds.ncols());
        for (ni, nd) in a.negatives.iter().zip(&neg_dots) {
            for (pi, pd) in a.positives.iter().zip(&pos_dots) {
                let w = (nd - pd - m).exp() / denom * scale;
                if w == 0.0 {
                    continue;
                }
                g_anchor.scaled_add(w, &(&embeds.row(*ni) - &embeds.row(*pi)));
                grad.row_mut(*ni).scaled_add(w, &v);
                grad.row_mut(*pi).scaled_add(-w, &v);
            }
        }
        let mut row = grad.row_mut(a.anchor);
        row += &g_anchor;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(inst: Option<u64>) -> ProposalTarget {
        ProposalTarget { class_id: inst.map(|_| 0), instance_id: inst }
    }

    #[test]
    fn single_object_gives_one_positive() {
        let pairs = sample_pairs(&[t(Some(1))], &[t(Some(1))]);
        assert_eq!(pairs, vec![AnchorPairs { anchor: 0, positives: vec![0], negatives: vec![] }]);
    }

    #[test]
    fn two_objects_enumerated() {
        let key = [t(Some(1)), t(Some(2)), t(None)];
        let reference = [t(None), t(Some(2)), t(Some(1))];
        let pairs = sample_pairs(&key, &reference);
        assert_eq!(
            pairs,
            vec![
                AnchorPairs { anchor: 0, positives: vec![2], negatives: vec![1] },
                AnchorPairs { anchor: 1, positives: vec![1], negatives: vec![2] },
            ]
        );
    }

    #[test]
    fn vanished_object_is_skipped() {
        assert!(sample_pairs(&[t(Some(1))], &[t(Some(2))]).is_empty());
    }

    #[test]
    fn equal_dots_give_ln2() {
        // v = (1,0), k+ = (1,0), k- = (1,5): both dots equal 1
        let e = array![[1.0, 0.0], [1.0, 0.0], [1.0, 5.0]];
        let a = AnchorPairs { anchor: 0, positives: vec![1], negatives: vec![2] };
        let (v, _) = track_contrastive_loss(&e, &[a]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_two_negatives() {
        // dots with anchor (1, 0): positive 2.0, negatives 1.0 and 0.5
        let e = array![[1.0, 0.0], [2.0, 3.0], [1.0, -1.0], [0.5, 7.0]];
        let a = AnchorPairs { anchor: 0, positives: vec![1], negatives: vec![2, 3] };
        let (v, _) = track_contrastive_loss(&e, &[a]).unwrap();
        let expect = (1.0 + (-1f64).exp() + (-1.5f64).exp()).ln();
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn large_margin_vanishes() {
        let e = array![[10.0], [10.0], [-10.0]];
        let a = AnchorPairs { anchor: 0, positives: vec![1], negatives: vec![2] };
        let (v, _) = track_contrastive_loss(&e, &[a]).unwrap();
        assert!(v < 1e-80);
    }

    #[test]
    fn anchors_without_positives_are_ignored() {
        let e = array![[1.0], [2.0]];
        let a = AnchorPairs { anchor: 0, positives: vec![], negatives: vec![1] };
        let (v, g) = track_contrastive_loss(&e, &[a]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }
}
