//! Ranking and thresholded metrics: mean average precision, pooled and
//! per-class precision/recall/F1, mask-quality scores, and prediction
//! histograms for unknown negatives.

pub mod plots;

use crate::error::{Result, ScobError};

/// The seven thresholded/ranking metrics plus the threshold they used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub map: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub threshold: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Non-interpolated average precision per class: the mean, over positive
/// samples, of the precision at that sample's rank under descending-score
/// ordering with ties broken by stable sample index.
///
/// Classes without any positive label are skipped (reported as `None`);
/// at least one class must have a positive.
pub fn mean_average_precision(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
) -> Result<(f64, Vec<Option<f64>>)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(ScobError::Metric("scores and labels must align and be nonempty".into()));
    }
    let l = scores[0].len();
    if labels.iter().any(|r| r.len() != l) || scores.iter().any(|r| r.len() != l) {
        return Err(ScobError::Metric("ragged score or label rows".into()));
    }
    let n = scores.len();
    let mut per_class = Vec::with_capacity(l);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..l {
        let positives: Vec<usize> = (0..n).filter(|&i| labels[i][c] == 1).collect();
        if positives.is_empty() {
            per_class.push(None);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]).then(a.cmp(&b)));
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (rank0, &idx) in order.iter().enumerate() {
            if labels[idx][c] == 1 {
                hits += 1.0;
                ap += hits / (rank0 as f64 + 1.0);
            }
        }
        let ap = ap / positives.len() as f64;
        per_class.push(Some(ap));
        sum += ap;
        counted += 1;
    }
    if counted == 0 {
        return Err(ScobError::Metric("no class has any positive label".into()));
    }
    Ok((sum / counted as f64, per_class))
}

/// Binarize at `threshold` and compute overall (pooled) and per-class
/// (averaged) precision/recall/F1. Empty-denominator cases use the zero
/// convention.
pub fn prf_metrics(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<MetricRow> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(ScobError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(ScobError::Metric("scores and labels must align and be nonempty".into()));
    }
    let l = scores[0].len();
    let n = scores.len();
    let mut tp = vec![0.0; l];
    let mut fp = vec![0.0; l];
    let mut fe = vec![0.0; l];
    for i in 0..n {
        for c in 0..l {
            let pred = scores[i][c] >= threshold;
            let truth = labels[i][c] == 1;
            match (pred, truth) {
                (true, true) => tp[c] += 1.0,
                (true, false) => fp[c] += 1.0,
                (false, true) => fe[c] += 1.0,
                _ => {}
            }
        }
    }
    let (tps, fps, fns): (f64, f64, f64) = (tp.iter().sum(), fp.iter().sum(), fe.iter().sum());
    let op = if tps + fps == 0.0 { 0.0 } else { tps / (tps + fps) };
    let or_ = if tps + fns == 0.0 { 0.0 } else { tps / (tps + fns) };
    let of1 = f1(op, or_);
    let mut cp = 0.0;
    let mut cr = 0.0;
    let mut cf = 0.0;
    for c in 0..l {
        let p = if tp[c] + fp[c] == 0.0 { 0.0 } else { tp[c] / (tp[c] + fp[c]) };
        let r = if tp[c] + fe[c] == 0.0 { 0.0 } else { tp[c] / (tp[c] + fe[c]) };
        cp += p;
        cr += r;
        cf += f1(p, r);
    }
    Ok(MetricRow {
        map: f64::NAN, // filled by callers that also rank
        op,
        or_,
        of1,
        cp: cp / l as f64,
        cr: cr / l as f64,
        cf1: cf / l as f64,
        threshold,
    })
}

/// Micro-averaged pixelwise precision/recall/F1 of predicted foreground
/// against ground-truth foreground, pooled over all grid pairs.
pub fn cam_mask_metrics(predicted: &[&[f64]], truth: &[&[f64]]) -> Result<(f64, f64, f64)> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(ScobError::Metric("mask sets must align and be nonempty".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fe = 0.0;
    let mut any_gt = false;
    for (m, g) in predicted.iter().zip(truth.iter()) {
        if m.len() != g.len() {
            return Err(ScobError::Metric("mask grid sizes differ".into()));
        }
        for (&mv, &gv) in m.iter().zip(g.iter()) {
            let (mv, gv) = (mv > 0.5, gv > 0.5);
            if gv {
                any_gt = true;
            }
            match (mv, gv) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fe += 1.0,
                _ => {}
            }
        }
    }
    if !any_gt {
        return Err(ScobError::Metric("ground truth is empty everywhere".into()));
    }
    let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let r = if tp + fe == 0.0 { 0.0 } else { tp / (tp + fe) };
    Ok((p, r, f1(p, r)))
}

/// Histogram of predicted probabilities over unknown negatives (entries
/// with z = 0 and y = 0), normalized to sum to one.
pub fn histogram_unknown_negatives(
    preds: &[Vec<f64>],
    y: &[Vec<u8>],
    z: &[Vec<u8>],
    bins: usize,
) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(ScobError::Config("need at least one bin".into()));
    }
    if preds.len() != y.len() || preds.len() != z.len() {
        return Err(ScobError::Metric("prediction and label sets must align".into()));
    }
    let mut counts = vec![0.0; bins];
    let mut total = 0.0;
    for ((p_row, y_row), z_row) in preds.iter().zip(y.iter()).zip(z.iter()) {
        for c in 0..p_row.len() {
            if z_row[c] == 0 && y_row[c] == 0 {
                let idx = ((p_row[c] * bins as f64) as usize).min(bins - 1);
                counts[idx] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|v| *v /= total);
    }
    Ok(counts)
}

/// Mean predicted probability over unknown negatives.
pub fn mean_unknown_negative_prob(preds: &[Vec<f64>], y: &[Vec<u8>], z: &[Vec<u8>]) -> f64 {
    let mut sum = 0.0;
    let mut total = 0.0;
    for ((p_row, y_row), z_row) in preds.iter().zip(y.iter()).zip(z.iter()) {
        for c in 0..p_row.len() {
            if z_row[c] == 0 && y_row[c] == 0 {
                sum += p_row[c];
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        sum / total
    }
}
