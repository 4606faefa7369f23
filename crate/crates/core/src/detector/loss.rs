use crate::boxes::{hard_negative_mine, MatchResult};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `0.5·x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Multibox loss and its gradient w.r.t. the per-image prediction rows.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Normalized localization part.
    pub loc_loss: f64,
    /// Normalized confidence part.
    pub conf_loss: f64,
    pub num_positives: usize,
    pub grad_loc: Vec<Tensor>,
    pub grad_conf: Vec<Tensor>,
}

/// `(Σ conf loss over positives and mined negatives + Σ smooth-L1 over
/// positives) / N_pos`, with `N_pos` counted over the whole batch. Negatives
/// are mined per image at `neg_pos_ratio` negatives per positive. Zero (with
/// zero gradients) when the batch has no positives.
pub fn multibox_loss(
    loc: &[Tensor],
    conf: &[Tensor],
    matches: &[MatchResult],
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    if loc.len() != conf.len() || loc.len() != matches.len() {
        return Err(Error::contract("loc, conf and matches must cover the same images"));
    }
    let mut grad_loc: Vec<Tensor> = loc.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut grad_conf: Vec<Tensor> = conf.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let num_positives: usize = matches.iter().map(MatchResult::num_positives).sum();
    if num_positives == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            loc_loss: 0.0,
            conf_loss: 0.0,
            num_positives,
            grad_loc,
            grad_conf,
        });
    }
    let norm = 1.0 / num_positives as f64;
    let mut loc_sum = 0.0;
    let mut conf_sum = 0.0;

    for (i, m) in matches.iter().enumerate() {
        let (l, c) = (&loc[i], &conf[i]);
        let anchors = m.labels.len();
        if l.shape() != [anchors, 4] || c.rank() != 2 || c.dim(0) != anchors {
            return Err(Error::shape("multibox_loss", c.shape(), &[anchors, 0]));
        }
        let classes = c.dim(1);

        // Per-anchor softmax probabilities and cross-entropy against the label.
        let mut probs = c.clone().softmax_rows()?;
        let ce: Vec<f64> = (0..anchors)
            .map(|a| {
                let row = c.row(a);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[m.labels[a]]
            })
            .collect();

        let mined = hard_negative_mine(&ce, m, neg_pos_ratio);
        let selected = (0..anchors).filter(|&a| m.is_positive(a)).chain(mined);
        for a in selected {
            conf_sum += ce[a];
            let g = &mut grad_conf[i].data_mut()[a * classes..(a + 1) * classes];
            let p = &mut probs.data_mut()[a * classes..(a + 1) * classes];
            p[m.labels[a]] -= 1.0;
            for (gv, pv) in g.iter_mut().zip(p.iter()) {
                *gv = pv * norm;
            }
        }

        for a in (0..anchors).filter(|&a| m.is_positive(a)) {
            for d in 0..4 {
                let diff = l.row(a)[d] - m.loc_targets[a][d];
                loc_sum += smooth_l1(diff);
                grad_loc[i].data_mut()[a * 4 + d] = smooth_l1_grad(diff) * norm;
            }
        }
    }

    Ok(LossOutput {
        loss: (loc_sum + conf_sum) * norm,
        loc_loss: loc_sum * norm,
        conf_loss: conf_sum * norm,
        num_positives,
        grad_loc,
        grad_conf,
    })
}
