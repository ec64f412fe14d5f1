//! Evaluation metrics: frame-level ROC AUC plus region-based and
//! track-based detection criteria.
//!
//! The detection criteria sweep a score threshold over predicted regions.
//! At each threshold a ground-truth region counts as detected when some
//! active predicted region in the same frame overlaps it with IoU at or
//! above `iou_threshold`; active predictions overlapping no ground truth
//! are false positives. Both criteria plot their detection rate against
//! false-positive regions per frame and take the area over [0, fpr_cap].

use crate::error::{Error, Result};
use crate::spriteworld::Box2D;

#[derive(Debug, Clone)]
pub struct MetricConfig {
    pub iou_threshold: f64,
    /// Fraction of a track's regions that must be detected for the track
    /// to count as detected.
    pub track_fraction: f64,
    /// Upper end of the false-positives-per-frame axis.
    pub fpr_cap: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            iou_threshold: 0.1,
            track_fraction: 0.1,
            fpr_cap: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoredRegion {
    pub bbox: Box2D,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub frame_auc: f64,
    pub rbdc: f64,
    pub tbdc: f64,
    pub auc_curve: Vec<(f64, f64)>,
    pub rbdc_curve: Vec<(f64, f64)>,
    pub tbdc_curve: Vec<(f64, f64)>,
}

impl std::fmt::Display for EvalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>12} {:>8}", "metric", "value")?;
        writeln!(f, "{:>12} {:>8.4}", "frame_auc", self.frame_auc)?;
        writeln!(f, "{:>12} {:>8.4}", "rbdc", self.rbdc)?;
        writeln!(f, "{:>12} {:>8.4}", "tbdc", self.tbdc)?;
        Ok(())
    }
}

/// Exact ROC AUC via the rank statistic; tied scores count one half.
/// Also returns the ROC curve as (false-positive rate, true-positive rate)
/// points at every distinct threshold.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<(f64, f64)>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg(format!(
            "roc_auc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("roc_auc: non-finite score"));
    }

    // rank statistic with midranks for ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);

    // ROC curve, descending threshold
    let mut desc = order;
    desc.reverse();
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < desc.len() {
        let s = scores[desc[k]];
        while k < desc.len() && scores[desc[k]] == s {
            if labels[desc[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok((auc, curve))
}

/// Trapezoidal area under (x, y) points over x ∈ [0, cap], normalized by
/// cap. Points must be sorted by x; the final y extends horizontally to
/// the cap, and segments crossing the cap are clipped by interpolation.
fn area_to_cap(points: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0f64, 0.0f64);
    for &(x, y) in points {
        if x <= prev.0 {
            prev = (prev.0, y);
            continue;
        }
        if prev.0 >= cap {
            break;
        }
        let (x2, y2) = if x > cap {
            let f = (cap - prev.0) / (x - prev.0);
            (cap, prev.1 + f * (y - prev.1))
        } else {
            (x, y)
        };
        area += (x2 - prev.0) * 0.5 * (prev.1 + y2);
        prev = (x2, y2);
    }
    if prev.0 < cap {
        area += (cap - prev.0) * prev.1;
    }
    area / cap
}

/// Per-threshold matching counts shared by both detection criteria:
/// for each distinct score threshold (descending), which ground-truth
/// regions are detected and how many active predictions match nothing.
struct SweepPoint {
    fpr: f64,
    /// detected[frame][gt_index]
    detected: Vec<Vec<bool>>,
}

fn threshold_sweep(
    preds: &[Vec<ScoredRegion>],
    gt: &[Vec<Box2D>],
    config: &MetricConfig,
) -> Result<Vec<SweepPoint>> {
    if preds.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} prediction frames vs {} ground-truth frames",
            preds.len(),
            gt.len()
        )));
    }
    let n_frames = preds.len();
    let mut thresholds: Vec<f64> = preds
        .iter()
        .flatten()
        .map(|r| {
            if r.score.is_finite() {
                Ok(r.score)
            } else {
                Err(Error::arg("non-finite region score"))
            }
        })
        .collect::<Result<_>>()?;
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut out = Vec::with_capacity(thresholds.len());
    for tau in thresholds {
        let mut fp = 0usize;
        let mut detected: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        for (fi, frame_preds) in preds.iter().enumerate() {
            for p in frame_preds.iter().filter(|p| p.score >= tau) {
                let mut hit = false;
                for (gi, g) in gt[fi].iter().enumerate() {
                    if p.bbox.iou(g) >= config.iou_threshold {
                        detected[fi][gi] = true;
                        hit = true;
                    }
                }
                if !hit {
                    fp += 1;
                }
            }
        }
        out.push(SweepPoint {
            fpr: fp as f64 / n_frames as f64,
            detected,
        });
    }
    Ok(out)
}

/// Region-based detection criterion with its curve.
pub fn rbdc(
    preds: &[Vec<ScoredRegion>],
    gt: &[Vec<Box2D>],
    config: &MetricConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let total_gt: usize = gt.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::arg("rbdc: ground truth contains no regions"));
    }
    let sweep = threshold_sweep(preds, gt, config)?;
    let mut curve = vec![(0.0, 0.0)];
    for point in &sweep {
        let tp: usize = point
            .detected
            .iter()
            .map(|f| f.iter().filter(|&&d| d).count())
            .sum();
        curve.push((point.fpr, tp as f64 / total_gt as f64));
    }
    Ok((area_to_cap(&curve[1..], config.fpr_cap), curve))
}

/// Track-based detection criterion with its curve. Each track is a list of
/// (frame, region) pairs; frame indices must lie inside the prediction
/// range.
pub fn tbdc(
    preds: &[Vec<ScoredRegion>],
    tracks: &[Vec<(usize, Box2D)>],
    config: &MetricConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if tracks.is_empty() || tracks.iter().any(|t| t.is_empty()) {
        return Err(Error::arg("tbdc: every track needs at least one region"));
    }
    // flatten tracks into per-frame ground truth, remembering ownership
    let n_frames = preds.len();
    let mut gt: Vec<Vec<Box2D>> = vec![Vec::new(); n_frames];
    let mut owner: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_frames];
    for (ti, track) in tracks.iter().enumerate() {
        for (ri, &(frame, bbox)) in track.iter().enumerate() {
            if frame >= n_frames {
                return Err(Error::arg(format!(
                    "track {ti} has a region at frame {frame}, beyond {n_frames} frames"
                )));
            }
            gt[frame].push(bbox);
            owner[frame].push((ti, ri));
        }
    }
    let sweep = threshold_sweep(preds, &gt, config)?;
    let mut curve = vec![(0.0, 0.0)];
    for point in &sweep {
        let mut hits = vec![0usize; tracks.len()];
        for (fi, frame) in point.detected.iter().enumerate() {
            for (k, &d) in frame.iter().enumerate() {
                if d {
                    hits[owner[fi][k].0] += 1;
                }
            }
        }
        let detected_tracks = tracks
            .iter()
            .zip(&hits)
            .filter(|(t, &h)| h as f64 / t.len() as f64 >= config.track_fraction)
            .count();
        curve.push((point.fpr, detected_tracks as f64 / tracks.len() as f64));
    }
    Ok((area_to_cap(&curve[1..], config.fpr_cap), curve))
}
