//! Object detection front-end: an oracle detector that replays ground-truth
//! boxes and a background-subtraction blob detector for when no ground truth
//! exists (notably the training split).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spriteworld::{Box2D, GroundTruth, VideoClip};

/// Pixel flagged as foreground when any channel deviates from the median
/// background by more than this.
pub const BLOB_PIXEL_THRESHOLD: f32 = 0.1;
/// Connected components smaller than this are discarded as noise.
pub const BLOB_MIN_AREA: usize = 16;
/// Confidence = min(area / this, 1).
pub const BLOB_AREA_SCALE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: Box2D,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Oracle,
    Blob,
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub confidence_threshold: f64,
    pub n_det: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Blob,
            confidence_threshold: 0.8,
            n_det: 8,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::config(format!(
                "confidence threshold {} outside [0,1]",
                self.confidence_threshold
            )));
        }
        if self.n_det == 0 {
            return Err(Error::config("n_det must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel, per-channel median over all frames of the video.
pub fn median_background(video: &VideoClip) -> Result<Vec<f32>> {
    let t = video.n_frames();
    if t < 2 {
        return Err(Error::arg(
            "background estimation needs at least 2 frames",
        ));
    }
    let stride = video.height() * video.width() * 3;
    let data = video.frames.data();
    let mut background = vec![0.0f32; stride];
    let mut column = vec![0.0f32; t];
    for px in 0..stride {
        for (fi, v) in column.iter_mut().enumerate() {
            *v = data[fi * stride + px];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        background[px] = if t % 2 == 1 {
            column[t / 2]
        } else {
            0.5 * (column[t / 2 - 1] + column[t / 2])
        };
    }
    Ok(background)
}

fn blob_detect_frame(
    video: &VideoClip,
    background: &[f32],
    frame: usize,
    config: &DetectorConfig,
) -> Vec<Detection> {
    let (h, w) = (video.height(), video.width());
    let stride = h * w * 3;
    let pixels = &video.frames.data()[frame * stride..(frame + 1) * stride];

    let mut foreground = vec![false; h * w];
    for px in 0..h * w {
        for c in 0..3 {
            if (pixels[px * 3 + c] - background[px * 3 + c]).abs() > BLOB_PIXEL_THRESHOLD {
                foreground[px] = true;
                break;
            }
        }
    }

    // 8-connected components over the foreground mask
    let mut visited = vec![false; h * w];
    let mut detections = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !foreground[start] || visited[start] {
            continue;
        }
        stack.push(start);
        visited[start] = true;
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0usize, 0usize);
        let mut area = 0usize;
        while let Some(px) = stack.pop() {
            let (y, x) = (px / w, px % w);
            area += 1;
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let npx = ny as usize * w + nx as usize;
                    if foreground[npx] && !visited[npx] {
                        visited[npx] = true;
                        stack.push(npx);
                    }
                }
            }
        }
        if area < BLOB_MIN_AREA {
            continue;
        }
        let confidence = (area as f64 / BLOB_AREA_SCALE).min(1.0);
        detections.push(Detection {
            frame_index: frame,
            bbox: Box2D {
                x1: x1 as u32,
                y1: y1 as u32,
                x2: x2 as u32 + 1,
                y2: y2 as u32 + 1,
            },
            confidence,
            class_probs: vec![1.0 / config.n_det as f64; config.n_det],
        });
    }
    detections
}

fn oracle_detect_frame(
    gt: &GroundTruth,
    frame: usize,
    config: &DetectorConfig,
) -> Result<Vec<Detection>> {
    let regions = crate::spriteworld::ground_truth_boxes(gt, frame)?;
    Ok(regions
        .iter()
        .map(|r| {
            let mut probs = if config.n_det > 1 {
                vec![0.1 / (config.n_det as f64 - 1.0); config.n_det]
            } else {
                vec![0.0; 1]
            };
            let class = (r.class as usize).min(config.n_det - 1);
            probs[class] = if config.n_det > 1 { 0.9 } else { 1.0 };
            Detection {
                frame_index: frame,
                bbox: r.bbox,
                confidence: 1.0,
                class_probs: probs,
            }
        })
        .collect())
}

/// Detects objects in one frame. The oracle kind replays ground truth; the
/// blob kind thresholds against `background` (from [`median_background`]).
pub fn detect_with_background(
    video: &VideoClip,
    frame: usize,
    config: &DetectorConfig,
    gt: Option<&GroundTruth>,
    background: Option<&[f32]>,
) -> Result<Vec<Detection>> {
    config.validate()?;
    if frame >= video.n_frames() {
        return Err(Error::arg(format!(
            "frame {frame} out of range ({} frames)",
            video.n_frames()
        )));
    }
    let mut detections = match config.kind {
        DetectorKind::Oracle => {
            let gt = gt.ok_or_else(|| Error::arg("oracle detector requires ground truth"))?;
            oracle_detect_frame(gt, frame, config)?
        }
        DetectorKind::Blob => {
            let owned;
            let bg = match background {
                Some(b) => b,
                None => {
                    owned = median_background(video)?;
                    &owned
                }
            };
            blob_detect_frame(video, bg, frame, config)
        }
    };
    detections.retain(|d| d.confidence >= config.confidence_threshold);
    Ok(detections)
}

pub fn detect(
    video: &VideoClip,
    frame: usize,
    config: &DetectorConfig,
    gt: Option<&GroundTruth>,
) -> Result<Vec<Detection>> {
    detect_with_background(video, frame, config, gt, None)
}

/// Runs detection over every frame, estimating the blob background once.
pub fn detect_video(
    video: &VideoClip,
    config: &DetectorConfig,
    gt: Option<&GroundTruth>,
) -> Result<Vec<Vec<Detection>>> {
    let background = match config.kind {
        DetectorKind::Blob => Some(median_background(video)?),
        DetectorKind::Oracle => None,
    };
    (0..video.n_frames())
        .map(|f| detect_with_background(video, f, config, gt, background.as_deref()))
        .collect()
}

/// One line per detection: `frame x1 y1 x2 y2 confidence p_0 ... p_{n-1}`.
pub fn write_detections(path: &Path, detections: &[Vec<Detection>]) -> Result<()> {
    let mut out = String::new();
    for per_frame in detections {
        for d in per_frame {
            out.push_str(&format!(
                "{} {} {} {} {} {}",
                d.frame_index, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.confidence
            ));
            for p in &d.class_probs {
                out.push_str(&format!(" {p}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path, n_frames: usize) -> Result<Vec<Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![Vec::new(); n_frames];
    for (ln, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 7 {
            return Err(Error::format(format!(
                "{}:{}: expected at least 7 fields",
                path.display(),
                ln + 1
            )));
        }
        let bad = |f: &str| Error::format(format!("{}:{}: bad field {f:?}", path.display(), ln + 1));
        let frame: usize = fields[0].parse().map_err(|_| bad(fields[0]))?;
        if frame >= n_frames {
            return Err(Error::format(format!(
                "{}:{}: frame {frame} out of range",
                path.display(),
                ln + 1
            )));
        }
        let mut nums = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            nums.push(f.parse::<f64>().map_err(|_| bad(f))?);
        }
        out[frame].push(Detection {
            frame_index: frame,
            bbox: Box2D {
                x1: nums[0] as u32,
                y1: nums[1] as u32,
                x2: nums[2] as u32,
                y2: nums[3] as u32,
            },
            confidence: nums[4],
            class_probs: nums[5..].to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spriteworld::{generate_dataset, SceneConfig};

    fn dataset() -> (Vec<VideoClip>, Vec<(VideoClip, GroundTruth)>) {
        generate_dataset(&SceneConfig::default()).unwrap()
    }

    #[test]
    fn oracle_returns_one_detection_per_region() {
        let (_, test) = dataset();
        let (clip, gt) = &test[0];
        let cfg = DetectorConfig {
            kind: DetectorKind::Oracle,
            ..DetectorConfig::default()
        };
        for frame in 0..clip.n_frames() {
            let dets = detect(clip, frame, &cfg, Some(gt)).unwrap();
            assert_eq!(dets.len(), gt.regions[frame].len());
            for d in &dets {
                assert_eq!(d.confidence, 1.0);
                let sum: f64 = d.class_probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(d.class_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn oracle_without_ground_truth_rejected() {
        let (train, _) = dataset();
        let cfg = DetectorConfig {
            kind: DetectorKind::Oracle,
            ..DetectorConfig::default()
        };
        assert!(detect(&train[0], 0, &cfg, None).is_err());
    }

    #[test]
    fn threshold_one_with_blob_filters_everything() {
        let (train, _) = dataset();
        let cfg = DetectorConfig {
            kind: DetectorKind::Blob,
            confidence_threshold: 1.0,
            n_det: 8,
        };
        // blob confidence reaches 1.0 only for large components; sprites do
        // reach it, so instead verify an out-of-range threshold is rejected
        // and a forced filter drops small-area components
        let dets = detect(&train[0], 10, &cfg, None).unwrap();
        for d in &dets {
            assert!(d.confidence >= 1.0);
        }
        let bad = DetectorConfig {
            confidence_threshold: 1.5,
            ..cfg
        };
        assert!(detect(&train[0], 10, &bad, None).is_err());
    }

    #[test]
    fn blob_rejects_single_frame_video() {
        let (train, _) = dataset();
        let stride = train[0].height() * train[0].width() * 3;
        let one = VideoClip {
            frames: crate::numerics::Tensor::from_vec(
                &[1, train[0].height(), train[0].width(), 3],
                train[0].frames.data()[..stride].to_vec(),
            )
            .unwrap(),
            fps: 10.0,
        };
        assert!(detect(&one, 0, &DetectorConfig::default(), None).is_err());
    }

    #[test]
    fn blob_recall_on_defaults_at_iou_half() {
        let (_, test) = dataset();
        let cfg = DetectorConfig::default();
        let mut total = 0usize;
        let mut matched = 0usize;
        for (clip, gt) in &test {
            let dets = detect_video(clip, &cfg, None).unwrap();
            for (frame, regions) in gt.regions.iter().enumerate() {
                for r in regions {
                    total += 1;
                    if dets[frame].iter().any(|d| d.bbox.iou(&r.bbox) >= 0.5) {
                        matched += 1;
                    }
                }
            }
        }
        let recall = matched as f64 / total as f64;
        assert!(recall >= 0.9, "recall {recall} ({matched}/{total})");
    }

    #[test]
    fn raising_threshold_never_adds_detections() {
        let (train, _) = dataset();
        let background = median_background(&train[0]).unwrap();
        let mut prev = usize::MAX;
        for threshold in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let cfg = DetectorConfig {
                kind: DetectorKind::Blob,
                confidence_threshold: threshold,
                n_det: 8,
            };
            let count: usize = (0..train[0].n_frames())
                .map(|f| {
                    detect_with_background(&train[0], f, &cfg, None, Some(&background))
                        .unwrap()
                        .len()
                })
                .sum();
            assert!(count <= prev, "threshold {threshold}: {count} > {prev}");
            prev = count;
        }
    }

    #[test]
    fn boxes_satisfy_invariants() {
        let (train, _) = dataset();
        let dets = detect_video(&train[0], &DetectorConfig::default(), None).unwrap();
        let (h, w) = (train[0].height() as u32, train[0].width() as u32);
        let mut any = false;
        for per_frame in &dets {
            for d in per_frame {
                any = true;
                assert!(d.bbox.x1 < d.bbox.x2 && d.bbox.x2 <= w);
                assert!(d.bbox.y1 < d.bbox.y2 && d.bbox.y2 <= h);
                assert!((0.0..=1.0).contains(&d.confidence));
            }
        }
        assert!(any, "expected at least one detection");
    }

    #[test]
    fn detections_file_round_trip() {
        let (train, _) = dataset();
        let dets = detect_video(&train[0], &DetectorConfig::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.txt");
        write_detections(&path, &dets).unwrap();
        let back = read_detections(&path, train[0].n_frames()).unwrap();
        assert_eq!(dets.len(), back.len());
        for (a, b) in dets.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }
}
