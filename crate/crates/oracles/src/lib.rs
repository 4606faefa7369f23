//! Slow, direct reference implementations that tests compare the library
//! against. Nothing here calls library math; only plain data types are shared.

use assd::boxes::{BBox, Detection, GroundTruth};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x0: f64, y0: f64, x1: f64, y1: f64| (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
    let inter = area(a.xmin.max(b.xmin), a.ymin.max(b.ymin), a.xmax.min(b.xmax), a.ymax.min(b.ymax));
    let union = area(a.xmin, a.ymin, a.xmax, a.ymax) + area(b.xmin, b.ymin, b.xmax, b.ymax) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Residual self-attention on one `C × N` map given as `x[c][n]`, with
/// `wq`, `wk` as `C × C'` and `wv` as `C × C` nested rows.
pub fn dense_attention(x: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = x.len();
    let n = x[0].len();
    let cr = wq[0].len();
    let project = |w: &[Vec<f64>], out_dim: usize| -> Vec<Vec<f64>> {
        (0..out_dim)
            .map(|o| (0..n).map(|j| (0..c).map(|i| w[i][o] * x[i][j]).sum()).collect())
            .collect()
    };
    let q = project(wq, cr);
    let k = project(wk, cr);
    let v = project(wv, c);
    let mut attn = vec![vec![0.0; n]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| (0..cr).map(|d| q[d][i] * k[d][j]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            attn[i][j] = (logits[j] - m).exp() / z;
        }
    }
    (0..c)
        .map(|ch| (0..n).map(|i| x[ch][i] + (0..n).map(|j| v[ch][j] * attn[i][j]).sum::<f64>()).collect())
        .collect()
}

/// Greedy per-class NMS phrased as "take the best, discard its overlaps, repeat".
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, (idx, d)) in remaining.iter().enumerate() {
            let (bidx, b) = &remaining[best];
            if d.score > b.score || (d.score == b.score && idx < bidx) {
                best = pos;
            }
        }
        let (_, winner) = remaining.remove(best);
        remaining.retain(|(_, d)| d.class_id != winner.class_id || iou(&d.bbox, &winner.bbox) <= threshold);
        kept.push(winner);
    }
    kept
}

/// Two-pass anchor assignment: `(matched truth per anchor, label per anchor)`.
pub fn match_anchors(anchors: &[BBox], truths: &[GroundTruth], threshold: f64) -> (Vec<Option<usize>>, Vec<usize>) {
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| truths.iter().map(|t| iou(a, &t.bbox)).collect()).collect();
    let mut matched = vec![None; anchors.len()];
    for (a, row) in overlaps.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (t, &o) in row.iter().enumerate() {
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((t, o));
            }
        }
        if let Some((t, o)) = best {
            if o >= threshold {
                matched[a] = Some(t);
            }
        }
    }
    let mut claimed = vec![false; anchors.len()];
    for t in 0..truths.len() {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..anchors.len() {
            if !claimed[a] && best.is_none_or(|(_, b)| overlaps[a][t] > b) {
                best = Some((a, overlaps[a][t]));
            }
        }
        if let Some((a, _)) = best {
            claimed[a] = true;
            matched[a] = Some(t);
        }
    }
    let labels = matched.iter().map(|m| m.map_or(0, |t| truths[t].class_id)).collect();
    (matched, labels)
}

/// Anchor boxes by direct enumeration, in (scale, row, column, box) order.
pub fn anchors(scales: &[(usize, Vec<f64>, f64, f64, bool)]) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    for (grid, ratios, s_min, s_max, extra) in scales {
        let g = *grid as f64;
        for i in 0..*grid {
            for j in 0..*grid {
                let (cx, cy) = ((j as f64 + 0.5) / g, (i as f64 + 0.5) / g);
                let mut shapes: Vec<(f64, f64)> =
                    ratios.iter().map(|r| (s_min * r.sqrt(), s_min / r.sqrt())).collect();
                if *extra {
                    let s = (s_min * s_max).sqrt();
                    shapes.push((s, s));
                }
                for (w, h) in shapes {
                    let c = |v: f64| v.clamp(0.0, 1.0);
                    out.push([c(cx - w / 2.0), c(cy - h / 2.0), c(cx + w / 2.0), c(cy + h / 2.0)]);
                }
            }
        }
    }
    out
}

/// Average precision as the mean over recall levels `j/G` of the best
/// precision reached at any cutoff with at least that recall.
pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    truths: &[Vec<GroundTruth>],
    num_classes: usize,
    threshold: f64,
) -> f64 {
    let mut aps = Vec::new();
    for class in 1..=num_classes {
        let g = truths.iter().flatten().filter(|t| t.class_id == class).count();
        if g == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (img, ds) in detections.iter().enumerate() {
            for (k, d) in ds.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((img, k));
                }
            }
        }
        // insertion sort: descending score, earlier (image, index) first
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 {
                let (a, b) = (ranked[j - 1], ranked[j]);
                if detections[b.0][b.1].score > detections[a.0][a.1].score {
                    ranked.swap(j - 1, j);
                    j -= 1;
                } else {
                    break;
                }
            }
        }
        let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let mut curve = Vec::new();
        let mut tp = 0usize;
        for (rank, &(img, k)) in ranked.iter().enumerate() {
            let d = &detections[img][k];
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths[img].iter().enumerate() {
                let o = iou(&d.bbox, &t.bbox);
                if t.class_id == class && !used[img][j] && o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
                tp += 1;
            }
            curve.push((tp, rank + 1));
        }
        let ap: f64 = (1..=g)
            .map(|level| {
                curve
                    .iter()
                    .filter(|(tp, _)| *tp >= level)
                    .map(|&(tp, n)| tp as f64 / n as f64)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / g as f64;
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Naive `[rows × inner] · [inner × cols]` over flat row-major slices.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..inner).map(|k| a[i * inner + k] * b[k * cols + j]).sum();
        }
    }
    out
}
