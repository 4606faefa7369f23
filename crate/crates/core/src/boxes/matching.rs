use super::{encode_box, iou, BBox, GroundTruth};
use crate::error::{Error, Result};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;

/// Per-anchor assignment of ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched truth index, `None` for negatives.
    pub matched: Vec<Option<usize>>,
    /// Class target per anchor, 0 for background.
    pub labels: Vec<usize>,
    /// Encoded offsets for positives, zeros for negatives.
    pub loc_targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_positive(&self, anchor: usize) -> bool {
        self.matched[anchor].is_some()
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    values
        .enumerate()
        .fold(None, |best, (i, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
}

/// Two passes: every anchor takes its best truth when the IoU reaches
/// `threshold`; then each truth, in order, claims its best anchor among
/// those not yet claimed by an earlier truth, regardless of IoU. Ties go
/// to the lower index. Every truth ends up with an anchor as long as there
/// are at least as many anchors as truths.
pub fn match_anchors(anchors: &[BBox], truths: &[GroundTruth], threshold: f64) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::contract("cannot match against an empty anchor list"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("match threshold must be in (0,1), got {threshold}")));
    }
    let mut matched = vec![None; anchors.len()];
    if !truths.is_empty() {
        let overlaps: Vec<Vec<f64>> = truths
            .iter()
            .map(|t| anchors.iter().map(|a| iou(&t.bbox, a)).collect())
            .collect();
        for (a, slot) in matched.iter_mut().enumerate() {
            if let Some((t, best)) = argmax(overlaps.iter().map(|row| row[a])) {
                if best >= threshold {
                    *slot = Some(t);
                }
            }
        }
        let mut claimed = vec![false; anchors.len()];
        for (t, row) in overlaps.iter().enumerate() {
            let candidates = row
                .iter()
                .zip(&claimed)
                .map(|(&v, &c)| if c { f64::NEG_INFINITY } else { v });
            if let Some((a, v)) = argmax(candidates) {
                if v.is_finite() {
                    claimed[a] = true;
                    matched[a] = Some(t);
                }
            }
        }
    }

    let mut labels = vec![0; anchors.len()];
    let mut loc_targets = vec![[0.0; 4]; anchors.len()];
    for (a, m) in matched.iter().enumerate() {
        if let Some(t) = *m {
            labels[a] = truths[t].class_id;
            loc_targets[a] = encode_box(&truths[t].bbox, &anchors[a])?;
        }
    }
    Ok(MatchResult {
        matched,
        labels,
        loc_targets,
    })
}

/// The `min(ratio·#pos, #neg)` negatives with the largest confidence loss,
/// hardest first; equal losses prefer the lower anchor index.
pub fn hard_negative_mine(conf_losses: &[f64], matches: &MatchResult, ratio: f64) -> Vec<usize> {
    let positives = matches.num_positives();
    let mut negatives: Vec<usize> = (0..conf_losses.len()).filter(|&a| !matches.is_positive(a)).collect();
    let keep = ((ratio * positives as f64).floor() as usize).min(negatives.len());
    if keep == 0 {
        return Vec::new();
    }
    negatives.sort_by(|&a, &b| conf_losses[b].total_cmp(&conf_losses[a]).then(a.cmp(&b)));
    negatives.truncate(keep);
    negatives
}
