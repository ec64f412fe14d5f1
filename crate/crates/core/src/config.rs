//! Plain-text run configuration: `section.key = value` lines.
//!
//! One file drives every command. Blank lines and `#` comments are
//! ignored; unknown or duplicate keys are errors. Writing a config and
//! reading it back yields an identical value (floats use Rust's shortest
//! round-trip formatting). The per-module seeds (scene, training) are not
//! stored: they are always the global `seed`, fanned out through fixed
//! derivation labels.

use crate::detection::{DetectorConfig, DetectorKind};
use crate::error::{Error, Result};
use crate::inference::SmoothingConfig;
use crate::metrics::MetricConfig;
use crate::model::{ArchitectureConfig, Depth, Task, Width};
use crate::spriteworld::{AnomalyType, SceneConfig, ShapeClass};
use crate::training::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub smoothing: SmoothingConfig,
    pub metrics: MetricConfig,
    pub teacher_n_cls: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let detector = DetectorConfig::default();
        let teacher_n_cls = crate::teachers::DEFAULT_N_CLS;
        let arch = ArchitectureConfig::new(
            Depth::Shallow,
            Width::Narrow,
            teacher_n_cls + detector.n_det,
        );
        let mut train = TrainConfig::new(&arch, seed);
        train.seed = seed;
        // Per-architecture batch defaults target corpus-scale datasets. A
        // generated dataset yields a few hundred objects, so large batches
        // both exhaust memory (activations for hundreds of clips) and starve
        // the optimizer of update steps per epoch.
        train.batch_size = 8;
        let mut scene = SceneConfig::default();
        scene.seed = seed;
        RunConfig {
            seed,
            scene,
            detector,
            arch,
            train,
            smoothing: SmoothingConfig::default(),
            metrics: MetricConfig::default(),
            teacher_n_cls,
        }
    }

    /// Applies the global seed to the per-module seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.smoothing.validate()?;
        if self.arch.n_distill != self.teacher_n_cls + self.detector.n_det {
            return Err(Error::config(format!(
                "arch.n_distill = {} must equal teacher.n_cls + detector.n_det = {}",
                self.arch.n_distill,
                self.teacher_n_cls + self.detector.n_det
            )));
        }
        Ok(())
    }
}

fn shape_name(s: ShapeClass) -> &'static str {
    match s {
        ShapeClass::Circle => "circle",
        ShapeClass::Square => "square",
        ShapeClass::Triangle => "triangle",
    }
}

fn shape_of(s: &str) -> Result<ShapeClass> {
    match s {
        "circle" => Ok(ShapeClass::Circle),
        "square" => Ok(ShapeClass::Square),
        "triangle" => Ok(ShapeClass::Triangle),
        _ => Err(Error::config(format!("unknown shape '{s}'"))),
    }
}

fn anomaly_name(a: AnomalyType) -> &'static str {
    match a {
        AnomalyType::FastMotion => "fast_motion",
        AnomalyType::UnseenShape => "unseen_shape",
        AnomalyType::ErraticMotion => "erratic_motion",
    }
}

fn anomaly_of(s: &str) -> Result<AnomalyType> {
    match s {
        "fast_motion" => Ok(AnomalyType::FastMotion),
        "unseen_shape" => Ok(AnomalyType::UnseenShape),
        "erratic_motion" => Ok(AnomalyType::ErraticMotion),
        _ => Err(Error::config(format!("unknown anomaly type '{s}'"))),
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Forward => "forward",
        Task::Intermittent => "intermittent",
        Task::Middle => "middle",
        Task::Distill => "distill",
    }
}

fn task_of(s: &str) -> Result<Task> {
    match s {
        "forward" => Ok(Task::Forward),
        "intermittent" => Ok(Task::Intermittent),
        "middle" => Ok(Task::Middle),
        "distill" => Ok(Task::Distill),
        _ => Err(Error::config(format!("unknown task '{s}'"))),
    }
}

/// Renders the config as `section.key = value` lines.
pub fn to_text(c: &RunConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    kv("seed", c.seed.to_string());
    kv("scene.frame_height", c.scene.frame_height.to_string());
    kv("scene.frame_width", c.scene.frame_width.to_string());
    kv("scene.n_train_videos", c.scene.n_train_videos.to_string());
    kv("scene.n_test_videos", c.scene.n_test_videos.to_string());
    kv("scene.frames_per_video", c.scene.frames_per_video.to_string());
    kv(
        "scene.normal_shapes",
        c.scene
            .normal_shapes
            .iter()
            .map(|&s| shape_name(s))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "scene.anomaly_types",
        c.scene
            .anomaly_types
            .iter()
            .map(|&a| anomaly_name(a))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "scene.speed_normal",
        format!("{},{}", c.scene.speed_normal.0, c.scene.speed_normal.1),
    );
    kv("scene.speed_anomalous", c.scene.speed_anomalous.to_string());
    kv(
        "detector.kind",
        match c.detector.kind {
            DetectorKind::Blob => "blob".into(),
            DetectorKind::Oracle => "oracle".into(),
        },
    );
    kv(
        "detector.confidence_threshold",
        c.detector.confidence_threshold.to_string(),
    );
    kv("detector.n_det", c.detector.n_det.to_string());
    kv(
        "arch.depth",
        match c.arch.depth {
            Depth::Shallow => "shallow".into(),
            Depth::Deep => "deep".into(),
        },
    );
    kv(
        "arch.width",
        match c.arch.width {
            Width::Narrow => "narrow".into(),
            Width::Wide => "wide".into(),
        },
    );
    kv("arch.input_side", c.arch.input_side.to_string());
    kv("arch.n_distill", c.arch.n_distill.to_string());
    kv("train.lambda", c.train.lambda.to_string());
    kv("train.epochs", c.train.epochs.to_string());
    kv("train.batch_size", c.train.batch_size.to_string());
    kv("train.t", c.train.t.to_string());
    kv("train.learning_rate", c.train.learning_rate.to_string());
    kv(
        "train.enabled_tasks",
        c.train
            .enabled_tasks
            .iter()
            .map(|&t| task_name(t))
            .collect::<Vec<_>>()
            .join(","),
    );
    let (et, eh, ew) = c.smoothing.mean_filter_extent;
    kv("smoothing.mean_filter_extent", format!("{et},{eh},{ew}"));
    kv("smoothing.gaussian_sigma", c.smoothing.gaussian_sigma.to_string());
    kv(
        "smoothing.gaussian_radius",
        c.smoothing.gaussian_radius.to_string(),
    );
    kv("metrics.iou_threshold", c.metrics.iou_threshold.to_string());
    kv("metrics.track_fraction", c.metrics.track_fraction.to_string());
    kv("metrics.fpr_cap", c.metrics.fpr_cap.to_string());
    kv("teacher.n_cls", c.teacher_n_cls.to_string());
    out
}

pub fn from_text(text: &str) -> Result<RunConfig> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", ln + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if map.insert(key, value).is_some() {
            return Err(Error::config(format!("line {}: duplicate key '{key}'", ln + 1)));
        }
    }

    let mut c = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    {
        let mut get = |k: &'static str| -> Option<&str> {
            seen.push(k);
            map.get(k).copied()
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{k}: cannot parse '{v}'")))
        }
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = get($key) {
                    $field = parse($key, v)?;
                }
            };
        }
        set!(c.seed, "seed");
        set!(c.scene.frame_height, "scene.frame_height");
        set!(c.scene.frame_width, "scene.frame_width");
        set!(c.scene.n_train_videos, "scene.n_train_videos");
        set!(c.scene.n_test_videos, "scene.n_test_videos");
        set!(c.scene.frames_per_video, "scene.frames_per_video");
        if let Some(v) = get("scene.normal_shapes") {
            c.scene.normal_shapes = v.split(',').map(|s| shape_of(s.trim())).collect::<Result<_>>()?;
        }
        if let Some(v) = get("scene.anomaly_types") {
            c.scene.anomaly_types =
                v.split(',').map(|s| anomaly_of(s.trim())).collect::<Result<_>>()?;
        }
        if let Some(v) = get("scene.speed_normal") {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::config("scene.speed_normal: expected lo,hi"))?;
            c.scene.speed_normal = (
                parse("scene.speed_normal", a.trim())?,
                parse("scene.speed_normal", b.trim())?,
            );
        }
        set!(c.scene.speed_anomalous, "scene.speed_anomalous");
        if let Some(v) = get("detector.kind") {
            c.detector.kind = match v {
                "blob" => DetectorKind::Blob,
                "oracle" => DetectorKind::Oracle,
                _ => return Err(Error::config(format!("unknown detector kind '{v}'"))),
            };
        }
        set!(c.detector.confidence_threshold, "detector.confidence_threshold");
        set!(c.detector.n_det, "detector.n_det");
        if let Some(v) = get("arch.depth") {
            c.arch.depth = match v {
                "shallow" => Depth::Shallow,
                "deep" => Depth::Deep,
                _ => return Err(Error::config(format!("unknown depth '{v}'"))),
            };
        }
        if let Some(v) = get("arch.width") {
            c.arch.width = match v {
                "narrow" => Width::Narrow,
                "wide" => Width::Wide,
                _ => return Err(Error::config(format!("unknown width '{v}'"))),
            };
        }
        set!(c.arch.input_side, "arch.input_side");
        set!(c.arch.n_distill, "arch.n_distill");
        set!(c.train.lambda, "train.lambda");
        set!(c.train.epochs, "train.epochs");
        set!(c.train.batch_size, "train.batch_size");
        set!(c.train.t, "train.t");
        set!(c.train.learning_rate, "train.learning_rate");
        if let Some(v) = get("train.enabled_tasks") {
            c.train.enabled_tasks = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|s| task_of(s.trim())).collect::<Result<_>>()?
            };
        }
        if let Some(v) = get("smoothing.mean_filter_extent") {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::config("smoothing.mean_filter_extent: expected t,h,w"));
            }
            c.smoothing.mean_filter_extent = (
                parse("smoothing.mean_filter_extent", parts[0])?,
                parse("smoothing.mean_filter_extent", parts[1])?,
                parse("smoothing.mean_filter_extent", parts[2])?,
            );
        }
        set!(c.smoothing.gaussian_sigma, "smoothing.gaussian_sigma");
        set!(c.smoothing.gaussian_radius, "smoothing.gaussian_radius");
        set!(c.metrics.iou_threshold, "metrics.iou_threshold");
        set!(c.metrics.track_fraction, "metrics.track_fraction");
        set!(c.metrics.fpr_cap, "metrics.fpr_cap");
        set!(c.teacher_n_cls, "teacher.n_cls");
    }
    for key in map.keys() {
        if !seen.contains(key) {
            return Err(Error::config(format!("unknown config key '{key}'")));
        }
    }
    c.set_seed(c.seed);
    Ok(c)
}

pub fn write_config(path: &Path, config: &RunConfig) -> Result<()> {
    std::fs::write(path, to_text(config)).map_err(|e| Error::io(path, e))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
