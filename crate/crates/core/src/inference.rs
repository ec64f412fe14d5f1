//! Anomaly scoring and map assembly.
//!
//! Each detection is scored by averaging the per-head anomaly signals:
//! predicted probability of reversed playback on the forward sequence,
//! predicted probability of intermittent sampling on the gapless sequence,
//! middle-frame reconstruction error, and the gap between the detector's
//! class probabilities and the model's distilled prediction. Object scores
//! are painted into per-frame maps, smoothed with a 3D mean filter, reduced
//! to per-frame maxima, and smoothed again with a temporal Gaussian.

use crate::detection::{detect_video, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, Task};
use crate::numerics::{softmax_rows, BnMode, Graph, Tensor};
use crate::sequences::{
    extract_sequence, make_task3_sample, middle_crop, BoundaryMode, ProxyTarget,
    CROP_SIDE,
};
use crate::spriteworld::{GroundTruth, VideoClip};

#[derive(Debug, Clone)]
pub struct SmoothingConfig {
    /// (temporal, height, width) extents of the 3D mean filter; odd.
    pub mean_filter_extent: (usize, usize, usize),
    pub gaussian_sigma: f64,
    pub gaussian_radius: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            mean_filter_extent: (3, 9, 9),
            gaussian_sigma: 3.0,
            gaussian_radius: 9,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.mean_filter_extent;
        if t % 2 == 0 || h % 2 == 0 || w % 2 == 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "mean filter extents must be odd and positive, got {:?}",
                self.mean_filter_extent
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::config("gaussian sigma must be positive"));
        }
        Ok(())
    }
}

/// Scores one object sequence: the mean over enabled heads of per-head
/// anomaly signals, each in [0, 1]. `distill_reference` carries the
/// detector slice the distilled prediction is compared against (the last
/// `n_det` outputs); the teacher-feature slice is ignored at inference.
pub fn object_score(
    model: &MultiTaskModel<f32>,
    crops: &Tensor<f32>,
    distill_reference: Option<&[f64]>,
    enabled_tasks: &[Task],
) -> Result<f64> {
    if enabled_tasks.is_empty() {
        return Err(Error::arg("object_score: no enabled heads"));
    }
    let n = crops.shape()[0];
    if n % 2 == 0 || n < 3 {
        return Err(Error::shape(format!(
            "object_score expects an odd sequence length >= 3, got {n}"
        )));
    }
    let t = n / 2;
    let seq = crate::sequences::ObjectSequence {
        crops: crops.clone(),
        video_id: 0,
        center_frame: t,
        bbox: crate::spriteworld::Box2D {
            x1: 0,
            y1: 0,
            x2: CROP_SIDE as u32,
            y2: CROP_SIDE as u32,
        },
        t,
    };
    let mut terms = Vec::with_capacity(enabled_tasks.len());
    let mut g = Graph::new();
    for &task in enabled_tasks {
        let term = match task {
            Task::Forward | Task::Intermittent => {
                // probability assigned to the abnormal class (reversed /
                // intermittent) on a normal consecutive forward sequence
                let batch = crops.clone().reshaped(&[1, n, CROP_SIDE, CROP_SIDE, 3])?;
                let input = g.input(batch);
                let features = model.forward_shared(&mut g, input, BnMode::Eval)?;
                let logits = model.forward_head(&mut g, task, features, BnMode::Eval)?;
                let probs = softmax_rows(g.value(logits));
                probs.data()[1] as f64
            }
            Task::Middle => {
                let sample = make_task3_sample(&seq);
                let ProxyTarget::Image(target) = &sample.target else {
                    unreachable!()
                };
                let shape = sample.input.shape().to_vec();
                let batch = sample.input.clone().reshaped(&[
                    1, shape[0], CROP_SIDE, CROP_SIDE, 3,
                ])?;
                let input = g.input(batch);
                let features = model.forward_shared(&mut g, input, BnMode::Eval)?;
                let recon = model.forward_decoder(&mut g, features, BnMode::Eval)?;
                g.value(recon)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
                    .sum::<f64>()
                    / target.numel() as f64
            }
            Task::Distill => {
                let reference = distill_reference.ok_or_else(|| {
                    Error::arg("object_score: distillation enabled without class probabilities")
                })?;
                let crop = middle_crop(&seq);
                let batch = crop.reshaped(&[1, 1, CROP_SIDE, CROP_SIDE, 3])?;
                let input = g.input(batch);
                let features = model.forward_shared(&mut g, input, BnMode::Eval)?;
                let pred = model.forward_head(&mut g, Task::Distill, features, BnMode::Eval)?;
                let out = g.value(pred).data();
                if reference.len() > out.len() {
                    return Err(Error::shape(format!(
                        "detector slice ({}) exceeds distillation output ({})",
                        reference.len(),
                        out.len()
                    )));
                }
                // compare only the detector-probability slice; predictions
                // clamped into [0,1] so the mean difference stays bounded
                let slice = &out[out.len() - reference.len()..];
                slice
                    .iter()
                    .zip(reference)
                    .map(|(&p, &r)| ((p as f64).clamp(0.0, 1.0) - r).abs())
                    .sum::<f64>()
                    / reference.len() as f64
            }
        };
        terms.push(term.clamp(0.0, 1.0));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Paints each detection's box with its score; overlaps resolve by maximum.
pub fn assemble_map(
    height: usize,
    width: usize,
    detections: &[(&Detection, f64)],
) -> Result<Vec<f64>> {
    let mut map = vec![0.0f64; height * width];
    for (det, score) in detections {
        if !(0.0..=1.0).contains(score) {
            return Err(Error::arg(format!("score {score} outside [0, 1]")));
        }
        let b = &det.bbox;
        if b.x2 as usize > width || b.y2 as usize > height {
            return Err(Error::arg(format!(
                "box {b:?} outside {width}x{height} frame"
            )));
        }
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                let cell = &mut map[y * width + x];
                *cell = cell.max(*score);
            }
        }
    }
    Ok(map)
}

/// Separable sliding-window mean over [T, H, W] with edge replication.
pub fn mean_filter_3d(
    maps: &[f64],
    t: usize,
    h: usize,
    w: usize,
    config: &SmoothingConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if maps.len() != t * h * w {
        return Err(Error::shape(format!(
            "mean_filter_3d: {} values for {t}x{h}x{w}",
            maps.len()
        )));
    }
    let (et, eh, ew) = config.mean_filter_extent;
    if et > t || eh > h || ew > w {
        return Err(Error::arg(format!(
            "filter extent {:?} exceeds volume {t}x{h}x{w}",
            config.mean_filter_extent
        )));
    }
    // one separable pass per axis; edges replicate by clamping the index
    // along the averaged axis
    let pass = |src: &[f64], len: usize, stride: usize, extent: usize| {
        let r = (extent / 2) as i64;
        let mut dst = vec![0.0f64; src.len()];
        for base in 0..src.len() {
            let axis_index = (base / stride) % len;
            let line_start = base - axis_index * stride;
            let mut acc = 0.0;
            for k in -r..=r {
                let j = (axis_index as i64 + k).clamp(0, len as i64 - 1) as usize;
                acc += src[line_start + j * stride];
            }
            dst[base] = acc / extent as f64;
        }
        dst
    };
    let x = pass(maps, w, 1, ew);
    let x = pass(&x, h, w, eh);
    let x = pass(&x, t, h * w, et);
    Ok(x)
}

/// Per-frame maximum of an anomaly-map stack.
pub fn frame_scores(maps: &[f64], t: usize, frame_len: usize) -> Vec<f64> {
    (0..t)
        .map(|fi| {
            maps[fi * frame_len..(fi + 1) * frame_len]
                .iter()
                .fold(0.0f64, |a, &b| a.max(b))
        })
        .collect()
}

/// Normalized Gaussian kernel of the configured radius.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// 1D Gaussian smoothing with edge replication.
pub fn temporal_gaussian(series: &[f64], config: &SmoothingConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if series.is_empty() {
        return Ok(Vec::new());
    }
    let kernel = gaussian_kernel(config.gaussian_sigma, config.gaussian_radius);
    let r = config.gaussian_radius as i64;
    let n = series.len() as i64;
    Ok((0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, &kv)| {
                    let idx = (i + j as i64 - r).clamp(0, n - 1) as usize;
                    kv * series[idx]
                })
                .sum()
        })
        .collect())
}

/// Full object-level pipeline over one video: detect, score each detection
/// on its clamped temporal window, assemble per-frame maps, smooth, take
/// per-frame maxima, and smooth the series temporally. Returns the final
/// score series, the filtered maps, and the raw per-detection scores.
pub struct ObjectLevelOutput {
    pub series: Vec<f64>,
    /// Filtered anomaly maps, frame-major [T * H * W].
    pub maps: Vec<f64>,
    /// (detection, score) per frame, in detection order.
    pub detection_scores: Vec<Vec<(Detection, f64)>>,
}

pub fn run_object_level(
    model: &MultiTaskModel<f32>,
    video: &VideoClip,
    gt: Option<&GroundTruth>,
    detector: &DetectorConfig,
    t: usize,
    enabled_tasks: &[Task],
    smoothing: &SmoothingConfig,
) -> Result<ObjectLevelOutput> {
    smoothing.validate()?;
    let (h, w) = (video.height(), video.width());
    let n = video.n_frames();
    let per_frame = detect_video(video, detector, gt)?;
    let mut detection_scores: Vec<Vec<(Detection, f64)>> = Vec::with_capacity(n);
    for (fi, dets) in per_frame.iter().enumerate() {
        let mut scored = Vec::with_capacity(dets.len());
        for det in dets {
            debug_assert_eq!(det.frame_index, fi);
            let seq = extract_sequence(video, det, t, BoundaryMode::Clamp, 0)?
                .expect("clamp mode always yields a sequence");
            let score = object_score(model, &seq.crops, Some(&det.class_probs), enabled_tasks)?;
            scored.push((det.clone(), score));
        }
        detection_scores.push(scored);
    }
    let mut maps = Vec::with_capacity(n * h * w);
    for scored in &detection_scores {
        let refs: Vec<(&Detection, f64)> = scored.iter().map(|(d, s)| (d, *s)).collect();
        maps.extend(assemble_map(h, w, &refs)?);
    }
    let maps = mean_filter_3d(&maps, n, h, w, smoothing)?;
    let series = frame_scores(&maps, n, h * w);
    let series = temporal_gaussian(&series, smoothing)?;
    Ok(ObjectLevelOutput {
        series,
        maps,
        detection_scores,
    })
}

/// Frame-level stream: every frame is one full-frame "object" resized to
/// the model input. Scores are the same per-head average followed by the
/// temporal Gaussian (no spatial maps: the object is the whole frame).
pub fn run_frame_level(
    model: &MultiTaskModel<f32>,
    video: &VideoClip,
    frame_probs: &[Vec<f64>],
    t: usize,
    enabled_tasks: &[Task],
    smoothing: &SmoothingConfig,
) -> Result<Vec<f64>> {
    smoothing.validate()?;
    let n = video.n_frames();
    if frame_probs.len() != n {
        return Err(Error::shape(format!(
            "frame_probs has {} entries for {} frames",
            frame_probs.len(),
            n
        )));
    }
    let full = crate::spriteworld::Box2D {
        x1: 0,
        y1: 0,
        x2: video.width() as u32,
        y2: video.height() as u32,
    };
    let mut series = Vec::with_capacity(n);
    for fi in 0..n {
        let det = Detection {
            frame_index: fi,
            bbox: full,
            confidence: 1.0,
            class_probs: frame_probs[fi].clone(),
        };
        let seq = extract_sequence(video, &det, t, BoundaryMode::Clamp, 0)?
            .expect("clamp mode always yields a sequence");
        series.push(object_score(
            model,
            &seq.crops,
            Some(&det.class_probs),
            enabled_tasks,
        )?);
    }
    temporal_gaussian(&series, smoothing)
}

/// Per-frame aggregate of detector class probabilities for the frame-level
/// distillation target: elementwise max over the frame's detections,
/// uniform when the frame has none.
pub fn frame_class_probs(detections: &[Vec<Detection>], n_det: usize) -> Vec<Vec<f64>> {
    detections
        .iter()
        .map(|dets| {
            if dets.is_empty() {
                vec![1.0 / n_det as f64; n_det]
            } else {
                let mut out = vec![0.0f64; n_det];
                for d in dets {
                    for (o, &p) in out.iter_mut().zip(&d.class_probs) {
                        *o = o.max(p);
                    }
                }
                out
            }
        })
        .collect()
}

/// Min-max normalizes each stream over the whole test set, then averages
/// per frame. A zero-range stream normalizes to all zeros.
pub fn late_fusion(object_series: &[f64], frame_series: &[f64]) -> Result<Vec<f64>> {
    if object_series.len() != frame_series.len() {
        return Err(Error::shape(format!(
            "late_fusion: {} vs {} frames",
            object_series.len(),
            frame_series.len()
        )));
    }
    let normalize = |s: &[f64]| -> Vec<f64> {
        let lo = s.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if hi - lo <= 0.0 {
            return vec![0.0; s.len()];
        }
        s.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    };
    let a = normalize(object_series);
    let b = normalize(frame_series);
    Ok(a.iter().zip(&b).map(|(&x, &y)| 0.5 * (x + y)).collect())
}

/// Score series as comma-separated `frame_index,score` lines.
pub fn write_series(path: &std::path::Path, series: &[f64]) -> Result<()> {
    let mut out = String::new();
    for (i, s) in series.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_series(path: &std::path::Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let (idx, score) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("{}:{}: expected index,score", path.display(), ln + 1)))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{}:{}: bad frame index", path.display(), ln + 1)))?;
        if idx != out.len() {
            return Err(Error::format(format!(
                "{}:{}: expected frame {}, found {idx}",
                path.display(),
                ln + 1,
                out.len()
            )));
        }
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{}:{}: bad score", path.display(), ln + 1)))?;
        out.push(score);
    }
    Ok(out)
}
