//! Command-line entry point: dataset generation, training, inference,
//! evaluation, and the task-subset ablation, all driven by one plain-text
//! config and one global seed. Every command writes its artifacts plus a
//! manifest of content hashes into the output directory.

use clap::{Parser, Subcommand, ValueEnum};
use mtvad::checkpoint;
use mtvad::config::{read_config, write_config, RunConfig};
use mtvad::error::{Error, Result};
use mtvad::inference::{
    frame_class_probs, late_fusion, run_frame_level, run_object_level, write_series,
};
use mtvad::metrics::{rbdc, roc_auc, tbdc, EvalResult, ScoredRegion};
use mtvad::model::Task;
use mtvad::spriteworld::{
    generate_dataset, read_test_split, read_train_split, write_dataset, Box2D, GroundTruth,
    VideoClip,
};
use mtvad::teachers::TeacherBundle;
use mtvad::training::{collect_frame_samples, fit, fit_with_samples, TrainConfig};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mtvad", about = "Object-centric video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Object,
    Frame,
    Fusion,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sprite dataset on disk.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a per-epoch report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "object")]
        mode: Mode,
    },
    /// Score the test split with a trained checkpoint.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "object")]
        mode: Mode,
    },
    /// Score the test split and evaluate against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame-level checkpoint; required for --mode fusion.
        #[arg(long)]
        frame_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "object")]
        mode: Mode,
    },
    /// Train and evaluate models over task subsets.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_run_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.set_seed(s);
    }
    config.validate()?;
    Ok(config)
}

struct Manifest {
    root: PathBuf,
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Manifest {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn add(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let hash = format!("{:x}", Sha256::digest(&bytes));
        let rel = path
            .strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string();
        self.entries.push((rel, hash));
        Ok(())
    }

    fn add_tree(&mut self, dir: &Path) -> Result<()> {
        let mut paths: Vec<PathBuf> = Vec::new();
        collect_files(dir, &mut paths)?;
        paths.sort();
        for p in paths {
            self.add(&p)?;
        }
        Ok(())
    }

    fn write(self) -> Result<()> {
        let path = self.root.join("manifest.txt");
        let mut out = String::new();
        for (rel, hash) in &self.entries {
            out.push_str(&format!("{hash}  {rel}\n"));
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Echoes the effective config into the run directory and registers it.
fn echo_config(manifest: &mut Manifest, config: &RunConfig) -> Result<()> {
    let path = manifest.root.join("config.cfg");
    write_config(&path, config)?;
    manifest.add(&path)
}

fn teacher_for(config: &RunConfig) -> Result<TeacherBundle> {
    TeacherBundle::new(config.teacher_n_cls, config.detector.n_det, config.seed)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out } => cmd_gen_data(&load_run_config(&config, seed)?, &out),
        Command::Train {
            config,
            seed,
            data,
            out,
            mode,
        } => cmd_train(&load_run_config(&config, seed)?, &data, &out, mode),
        Command::Infer {
            config,
            seed,
            checkpoint,
            data,
            out,
            mode,
        } => cmd_infer(&load_run_config(&config, seed)?, &checkpoint, &data, &out, mode),
        Command::Eval {
            config,
            seed,
            checkpoint,
            frame_checkpoint,
            data,
            out,
            mode,
        } => cmd_eval(
            &load_run_config(&config, seed)?,
            &checkpoint,
            frame_checkpoint.as_deref(),
            &data,
            &out,
            mode,
        ),
        Command::Ablate { config, seed, data, out } => {
            cmd_ablate(&load_run_config(&config, seed)?, &data, &out)
        }
    }
}

fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let mut manifest = Manifest::new(out)?;
    let (train, test) = generate_dataset(&config.scene)?;
    write_dataset(out, &train, &test)?;
    echo_config(&mut manifest, config)?;
    manifest.add_tree(&out.join("train"))?;
    manifest.add_tree(&out.join("test"))?;
    manifest.write()?;
    println!(
        "wrote {} train and {} test videos to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, data: &Path, out: &Path, mode: Mode) -> Result<()> {
    let mut manifest = Manifest::new(out)?;
    let videos = read_train_split(data)?;
    let teacher = teacher_for(config)?;
    let (model, report) = match mode {
        Mode::Object => fit(&videos, &config.detector, &teacher, config.arch.clone(), &config.train)?,
        Mode::Frame => {
            let (train, val) =
                collect_frame_samples(&videos, &config.detector, &teacher, &config.train)?;
            fit_with_samples(&train, &val, &teacher, config.arch.clone(), &config.train)?
        }
        Mode::Fusion => return Err(Error::arg("train takes --mode object or frame")),
    };
    let ckpt_path = out.join("model.ckpt");
    checkpoint::save(&ckpt_path, &model, &teacher)?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, report.to_string()).map_err(|e| Error::io(&report_path, e))?;
    echo_config(&mut manifest, config)?;
    manifest.add(&ckpt_path)?;
    manifest.add(&report_path)?;
    manifest.write()?;
    println!(
        "trained {} epochs on {} objects; selected epoch {} (val loss {:.6})",
        config.train.epochs,
        report.n_train_objects,
        report.selected_epoch,
        report.rows[report.selected_epoch].val.total
    );
    Ok(())
}

/// Scored detections per frame for one test video, plus the final series.
struct VideoScores {
    series: Vec<f64>,
    regions: Vec<Vec<ScoredRegion>>,
}

fn score_video_object_level(
    config: &RunConfig,
    model: &mtvad::model::MultiTaskModel<f32>,
    video: &VideoClip,
    gt: Option<&GroundTruth>,
) -> Result<VideoScores> {
    let out = run_object_level(
        model,
        video,
        gt,
        &config.detector,
        config.train.t,
        &config.train.enabled_tasks,
        &config.smoothing,
    )?;
    let regions = out
        .detection_scores
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|(d, s)| ScoredRegion {
                    bbox: d.bbox,
                    score: *s,
                })
                .collect()
        })
        .collect();
    Ok(VideoScores {
        series: out.series,
        regions,
    })
}

fn score_video_frame_level(
    config: &RunConfig,
    model: &mtvad::model::MultiTaskModel<f32>,
    video: &VideoClip,
) -> Result<Vec<f64>> {
    let detections = mtvad::detection::detect_video(video, &config.detector, None)?;
    let probs = frame_class_probs(&detections, config.detector.n_det);
    run_frame_level(
        model,
        video,
        &probs,
        config.train.t,
        &config.train.enabled_tasks,
        &config.smoothing,
    )
}

fn cmd_infer(
    config: &RunConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    mode: Mode,
) -> Result<()> {
    let mut manifest = Manifest::new(out)?;
    let loaded = checkpoint::load(ckpt)?;
    let test = read_test_split(data)?;
    for (vi, (video, _)) in test.iter().enumerate() {
        let series = match mode {
            Mode::Object => score_video_object_level(config, &loaded.model, video, None)?.series,
            Mode::Frame => score_video_frame_level(config, &loaded.model, video)?,
            Mode::Fusion => return Err(Error::arg("infer takes --mode object or frame")),
        };
        let path = out.join(format!("series_{vi:03}.csv"));
        write_series(&path, &series)?;
        manifest.add(&path)?;
    }
    echo_config(&mut manifest, config)?;
    manifest.write()?;
    println!("scored {} test videos into {}", test.len(), out.display());
    Ok(())
}

/// Object-level evaluation over a test split: per-video scoring, then AUC /
/// RBDC / TBDC over the concatenated frames. Library-style so the ablation
/// can reuse it.
fn evaluate_object_level(
    config: &RunConfig,
    model: &mtvad::model::MultiTaskModel<f32>,
    test: &[(VideoClip, GroundTruth)],
) -> Result<(EvalResult, Vec<Vec<f64>>)> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut all_regions: Vec<Vec<ScoredRegion>> = Vec::new();
    let mut all_gt_regions: Vec<Vec<Box2D>> = Vec::new();
    let mut all_tracks: Vec<Vec<(usize, Box2D)>> = Vec::new();
    let mut per_video_series = Vec::new();
    let mut frame_offset = 0usize;
    for (video, gt) in test {
        let scored = score_video_object_level(config, model, video, Some(gt))?;
        all_scores.extend_from_slice(&scored.series);
        per_video_series.push(scored.series);
        all_labels.extend(gt.frame_labels.iter().copied());
        all_regions.extend(scored.regions);
        for frame_regions in &gt.regions {
            all_gt_regions.push(
                frame_regions
                    .iter()
                    .filter(|r| r.anomalous)
                    .map(|r| r.bbox)
                    .collect(),
            );
        }
        for tid in gt.anomalous_track_ids() {
            let track = gt.tracks[&tid]
                .iter()
                .map(|&(f, b)| (f + frame_offset, b))
                .collect();
            all_tracks.push(track);
        }
        frame_offset += video.n_frames();
    }
    let (frame_auc, auc_curve) = roc_auc(&all_scores, &all_labels)?;
    let (rbdc_v, rbdc_curve) = rbdc(&all_regions, &all_gt_regions, &config.metrics)?;
    let (tbdc_v, tbdc_curve) = tbdc(&all_regions, &all_tracks, &config.metrics)?;
    Ok((
        EvalResult {
            frame_auc,
            rbdc: rbdc_v,
            tbdc: tbdc_v,
            auc_curve,
            rbdc_curve,
            tbdc_curve,
        },
        per_video_series,
    ))
}

fn cmd_eval(
    config: &RunConfig,
    ckpt: &Path,
    frame_ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    mode: Mode,
) -> Result<()> {
    let mut manifest = Manifest::new(out)?;
    let test = read_test_split(data)?;
    let labels: Vec<bool> = test
        .iter()
        .flat_map(|(_, gt)| gt.frame_labels.iter().copied())
        .collect();

    let (summary, per_video) = match mode {
        Mode::Object => {
            let loaded = checkpoint::load(ckpt)?;
            let (result, per_video) = evaluate_object_level(config, &loaded.model, &test)?;
            (result.to_string(), per_video)
        }
        Mode::Frame => {
            let loaded = checkpoint::load(ckpt)?;
            let mut per_video = Vec::new();
            let mut scores = Vec::new();
            for (video, _) in &test {
                let series = score_video_frame_level(config, &loaded.model, video)?;
                scores.extend_from_slice(&series);
                per_video.push(series);
            }
            let (auc, _) = roc_auc(&scores, &labels)?;
            (format!("frame_auc {auc:.4}\n"), per_video)
        }
        Mode::Fusion => {
            let frame_ckpt = frame_ckpt.ok_or_else(|| {
                Error::arg("--mode fusion requires --frame-checkpoint alongside --checkpoint")
            })?;
            let object = checkpoint::load(ckpt)?;
            let frame = checkpoint::load(frame_ckpt)?;
            let mut object_scores = Vec::new();
            let mut frame_scores = Vec::new();
            let mut lengths = Vec::new();
            for (video, _) in &test {
                let s = score_video_object_level(config, &object.model, video, None)?.series;
                lengths.push(s.len());
                object_scores.extend(s);
                frame_scores.extend(score_video_frame_level(config, &frame.model, video)?);
            }
            let fused = late_fusion(&object_scores, &frame_scores)?;
            let (auc, _) = roc_auc(&fused, &labels)?;
            let mut per_video = Vec::new();
            let mut off = 0;
            for len in lengths {
                per_video.push(fused[off..off + len].to_vec());
                off += len;
            }
            (format!("fusion_auc {auc:.4}\n"), per_video)
        }
    };

    for (vi, series) in per_video.iter().enumerate() {
        let path = out.join(format!("series_{vi:03}.csv"));
        write_series(&path, series)?;
        manifest.add(&path)?;
    }
    let eval_path = out.join("eval.txt");
    std::fs::write(&eval_path, &summary).map_err(|e| Error::io(&eval_path, e))?;
    echo_config(&mut manifest, config)?;
    manifest.add(&eval_path)?;
    manifest.write()?;
    print!("{summary}");
    Ok(())
}

const ABLATION_SUBSETS: &[&[Task]] = &[
    &[Task::Forward],
    &[Task::Intermittent],
    &[Task::Middle],
    &[Task::Distill],
    &[Task::Forward, Task::Middle],
    &[Task::Forward, Task::Intermittent, Task::Middle],
    &[Task::Forward, Task::Intermittent, Task::Middle, Task::Distill],
];

fn subset_label(tasks: &[Task]) -> String {
    tasks
        .iter()
        .map(|t| match t {
            Task::Forward => "T1",
            Task::Intermittent => "T2",
            Task::Middle => "T3",
            Task::Distill => "T4",
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn cmd_ablate(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let mut manifest = Manifest::new(out)?;
    let train_videos = read_train_split(data)?;
    let test = read_test_split(data)?;
    let teacher = teacher_for(config)?;

    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>8.4}"),
        None => format!("{:>8}", "-"),
    };
    let mut table = format!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "tasks", "t1_acc", "t2_acc", "t3_mae", "t4_mae", "auc"
    );
    for subset in ABLATION_SUBSETS {
        let mut train_config: TrainConfig = config.train.clone();
        train_config.enabled_tasks = subset.to_vec();
        let (model, report) = fit(
            &train_videos,
            &config.detector,
            &teacher,
            config.arch.clone(),
            &train_config,
        )?;
        let sub_config = RunConfig {
            train: train_config,
            ..config.clone()
        };
        let (result, _) = evaluate_object_level(&sub_config, &model, &test)?;
        let val = &report.rows[report.selected_epoch].val;
        let has = |t: Task| subset.contains(&t);
        table.push_str(&format!(
            "{:<14} {} {} {} {} {:>8.4}\n",
            subset_label(subset),
            fmt_opt(has(Task::Forward).then(|| val.t1_accuracy())),
            fmt_opt(has(Task::Intermittent).then(|| val.t2_accuracy())),
            fmt_opt(has(Task::Middle).then(|| val.losses[2])),
            fmt_opt(has(Task::Distill).then(|| val.losses[3])),
            result.frame_auc
        ));
    }
    let table_path = out.join("ablation.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    echo_config(&mut manifest, config)?;
    manifest.add(&table_path)?;
    manifest.write()?;
    print!("{table}");
    Ok(())
}
