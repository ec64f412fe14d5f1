//! Joint multi-task optimization with validation-based checkpoint selection.
//!
//! The batch unit is an object together with all of its task samples; the
//! joint loss is L1 + L2 + L3 + λ·L4 with per-task means over the batch.

use crate::detection::{detect_video, DetectorConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, ArchitectureConfig, Depth, MultiTaskModel, Task, Width};
use crate::numerics::{AdamState, BnMode, Elem, Graph, Tensor, Var};
use crate::rng::derive_rng;
use crate::sequences::{
    extract_sequence, make_task1_samples, make_task2_samples, make_task3_sample,
    make_task4_sample, middle_crop, split_train_val, BoundaryMode, ProxySample, ProxyTarget,
};
use crate::spriteworld::VideoClip;
use crate::teachers::TeacherBundle;
use rand::seq::SliceRandom;

pub const ALL_TASKS: [Task; 4] = [Task::Forward, Task::Intermittent, Task::Middle, Task::Distill];

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Weight of the distillation loss; must lie in (0, 1].
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Temporal radius: sequences span 2t+1 frames.
    pub t: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub enabled_tasks: Vec<Task>,
}

impl TrainConfig {
    pub fn new(arch: &ArchitectureConfig, seed: u64) -> Self {
        let batch_size = match (arch.depth, arch.width) {
            (Depth::Shallow, Width::Narrow) => 256,
            (Depth::Shallow, Width::Wide) => 128,
            (Depth::Deep, Width::Narrow) => 128,
            (Depth::Deep, Width::Wide) => 64,
        };
        TrainConfig {
            lambda: 0.2,
            epochs: 30,
            batch_size,
            t: 3,
            seed,
            learning_rate: 1e-3,
            enabled_tasks: ALL_TASKS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.enabled_tasks.is_empty() {
            return Err(Error::config("enabled_tasks must be nonempty"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.t == 0 {
            return Err(Error::config("epochs, batch_size and t must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn enabled(&self, task: Task) -> bool {
        self.enabled_tasks.contains(&task)
    }
}

/// One object's materialized samples for every enabled task.
#[derive(Debug, Clone)]
pub struct ObjectSamples {
    pub task1: Option<[ProxySample; 2]>,
    pub task2: Option<[ProxySample; 2]>,
    pub task3: Option<ProxySample>,
    pub task4: Option<ProxySample>,
}

/// Builds all enabled task samples for one detection, or `None` when any
/// enabled task's temporal window cannot fit inside `frame_range`.
pub fn build_object_samples(
    video: &VideoClip,
    video_id: u64,
    detection: &crate::detection::Detection,
    teacher: &TeacherBundle,
    config: &TrainConfig,
    frame_range: &std::ops::Range<usize>,
    det_index: u64,
) -> Result<Option<ObjectSamples>> {
    let i = detection.frame_index;
    let t = config.t;
    if i < frame_range.start + t || i + t >= frame_range.end.min(video.n_frames()) {
        return Ok(None);
    }
    let Some(seq) = extract_sequence(video, detection, t, BoundaryMode::Skip, video_id)? else {
        return Ok(None);
    };
    let task1 = config.enabled(Task::Forward).then(|| make_task1_samples(&seq));
    let task2 = if config.enabled(Task::Intermittent) {
        let mut rng = derive_rng(
            config.seed,
            "task2-gaps",
            &[video_id, i as u64, det_index],
        );
        match make_task2_samples(video, detection, t, frame_range, &mut rng, video_id)? {
            Some(pair) => Some(pair),
            None => return Ok(None),
        }
    } else {
        None
    };
    let task3 = config.enabled(Task::Middle).then(|| make_task3_sample(&seq));
    let task4 = if config.enabled(Task::Distill) {
        Some(make_task4_sample(&middle_crop(&seq), detection, teacher)?)
    } else {
        None
    };
    Ok(Some(ObjectSamples {
        task1,
        task2,
        task3,
        task4,
    }))
}

/// Per-task batch statistics from one joint forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    /// Unweighted per-task mean losses (Forward, Intermittent, Middle, Distill).
    pub losses: [f64; 4],
    /// λ-weighted total.
    pub total: f64,
    pub t1_correct: usize,
    pub t1_count: usize,
    pub t2_correct: usize,
    pub t2_count: usize,
}

impl BatchStats {
    fn merge(&mut self, other: &BatchStats, weight: f64, total_weight: f64) {
        let w = weight / total_weight;
        for k in 0..4 {
            self.losses[k] += other.losses[k] * w;
        }
        self.total += other.total * w;
        self.t1_correct += other.t1_correct;
        self.t1_count += other.t1_count;
        self.t2_correct += other.t2_correct;
        self.t2_count += other.t2_count;
    }

    pub fn t1_accuracy(&self) -> f64 {
        if self.t1_count == 0 {
            f64::NAN
        } else {
            self.t1_correct as f64 / self.t1_count as f64
        }
    }

    pub fn t2_accuracy(&self) -> f64 {
        if self.t2_count == 0 {
            f64::NAN
        } else {
            self.t2_correct as f64 / self.t2_count as f64
        }
    }
}

fn stack_clips<E: Elem>(clips: &[&Tensor<f32>]) -> Result<Tensor<E>> {
    let first = clips[0].shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * clips[0].numel());
    for c in clips {
        if c.shape() != first.as_slice() {
            return Err(Error::shape(format!(
                "inconsistent sample shapes in batch: {:?} vs {:?}",
                first,
                c.shape()
            )));
        }
        data.extend(c.data().iter().map(|&v| E::from_f64(v as f64)));
    }
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(&first);
    Tensor::from_vec(&shape, data)
}

fn one_hot<E: Elem>(classes: &[usize], k: usize) -> Tensor<E> {
    let mut data = vec![E::zero(); classes.len() * k];
    for (row, &c) in classes.iter().enumerate() {
        data[row * k + c] = E::one();
    }
    Tensor::from_vec(&[classes.len(), k], data).expect("shape")
}

fn argmax_rows<E: Elem>(t: &Tensor<E>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if (*v).to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One binary-classification task: stack the per-object sample pairs,
/// run backbone + head, and return (mean cross-entropy, #correct).
fn classification_term<E: Elem>(
    model: &MultiTaskModel<E>,
    g: &mut Graph<E>,
    task: Task,
    pairs: Vec<[&ProxySample; 2]>,
    mode: BnMode,
) -> Result<(Var, usize, usize)> {
    let mut clips = Vec::with_capacity(pairs.len() * 2);
    let mut classes = Vec::with_capacity(pairs.len() * 2);
    for pair in &pairs {
        for s in pair {
            clips.push(&s.input);
            let ProxyTarget::Class(c) = s.target else {
                return Err(Error::arg("classification sample with non-class target"));
            };
            classes.push(c);
        }
    }
    let input = g.input(stack_clips(&clips)?);
    let features = model.forward_shared(g, input, mode)?;
    let logits = model.forward_head(g, task, features, mode)?;
    let target = one_hot(&classes, 2);
    let loss = g.cross_entropy_loss(logits, &target)?;
    let predicted = argmax_rows(g.value(logits));
    let correct = predicted.iter().zip(&classes).filter(|(p, c)| p == c).count();
    Ok((loss, correct, classes.len()))
}

/// Joint loss over one object batch: returns the differentiable total and
/// the per-task statistics. Disabled tasks contribute nothing.
pub fn joint_loss<E: Elem>(
    model: &MultiTaskModel<E>,
    g: &mut Graph<E>,
    batch: &[ObjectSamples],
    config: &TrainConfig,
    mode: BnMode,
) -> Result<(Var, BatchStats)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::arg("joint_loss: empty object batch"));
    }
    let mut terms: Vec<(Var, E)> = Vec::new();
    let mut stats = BatchStats::default();

    if config.enabled(Task::Forward) {
        let pairs: Vec<[&ProxySample; 2]> = batch
            .iter()
            .map(|o| {
                o.task1
                    .as_ref()
                    .map(|[a, b]| [a, b])
                    .ok_or_else(|| Error::arg("object missing its playback-direction samples"))
            })
            .collect::<Result<_>>()?;
        let (loss, correct, count) = classification_term(model, g, Task::Forward, pairs, mode)?;
        stats.losses[0] = g.scalar_value(loss).to_f64();
        stats.t1_correct = correct;
        stats.t1_count = count;
        terms.push((loss, E::one()));
    }
    if config.enabled(Task::Intermittent) {
        let pairs: Vec<[&ProxySample; 2]> = batch
            .iter()
            .map(|o| {
                o.task2
                    .as_ref()
                    .map(|[a, b]| [a, b])
                    .ok_or_else(|| Error::arg("object missing its sampling-pattern samples"))
            })
            .collect::<Result<_>>()?;
        let (loss, correct, count) =
            classification_term(model, g, Task::Intermittent, pairs, mode)?;
        stats.losses[1] = g.scalar_value(loss).to_f64();
        stats.t2_correct = correct;
        stats.t2_count = count;
        terms.push((loss, E::one()));
    }
    if config.enabled(Task::Middle) {
        let mut clips = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for o in batch {
            let s = o
                .task3
                .as_ref()
                .ok_or_else(|| Error::arg("object missing its reconstruction sample"))?;
            let ProxyTarget::Image(img) = &s.target else {
                return Err(Error::arg("reconstruction sample with non-image target"));
            };
            clips.push(&s.input);
            targets.push(img);
        }
        let input = g.input(stack_clips(&clips)?);
        let features = model.forward_shared(g, input, mode)?;
        let recon = model.forward_decoder(g, features, mode)?;
        let target = stack_clips::<E>(&targets)?;
        let loss = g.l1_loss(recon, &target)?;
        stats.losses[2] = g.scalar_value(loss).to_f64();
        terms.push((loss, E::one()));
    }
    if config.enabled(Task::Distill) {
        let mut clips = Vec::with_capacity(batch.len());
        let mut target = Vec::new();
        for o in batch {
            let s = o
                .task4
                .as_ref()
                .ok_or_else(|| Error::arg("object missing its distillation sample"))?;
            let ProxyTarget::Vector(v) = &s.target else {
                return Err(Error::arg("distillation sample with non-vector target"));
            };
            clips.push(&s.input);
            target.extend(v.iter().map(|&x| E::from_f64(x as f64)));
        }
        let n_distill = target.len() / batch.len();
        if n_distill != model.config.n_distill {
            return Err(Error::shape(format!(
                "distillation target length {} does not match model n_distill {}",
                n_distill, model.config.n_distill
            )));
        }
        let input = g.input(stack_clips(&clips)?);
        let features = model.forward_shared(g, input, mode)?;
        let pred = model.forward_head(g, Task::Distill, features, mode)?;
        let target = Tensor::from_vec(&[batch.len(), n_distill], target)?;
        let loss = g.l1_loss(pred, &target)?;
        stats.losses[3] = g.scalar_value(loss).to_f64();
        terms.push((loss, E::from_f64(config.lambda)));
    }
    let total = g.weighted_sum(&terms)?;
    stats.total = g.scalar_value(total).to_f64();
    Ok((total, stats))
}

/// One seeded-shuffle pass over the sample set: one Adam step per object
/// batch. Aborts on a non-finite loss.
pub fn train_epoch(
    model: &mut MultiTaskModel<f32>,
    samples: &[ObjectSamples],
    optimizer: &mut AdamState<f32>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<BatchStats> {
    if samples.is_empty() {
        return Err(Error::arg("train_epoch: no samples"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = derive_rng(config.seed, "epoch-shuffle", &[epoch as u64]);
    order.shuffle(&mut rng);

    let mut epoch_stats = BatchStats::default();
    let total = samples.len() as f64;
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<ObjectSamples> = chunk.iter().map(|&i| samples[i].clone()).collect();
        let mut g = Graph::new();
        let (loss, stats) = joint_loss(model, &mut g, &batch, config, BnMode::Train)?;
        if !stats.total.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss at epoch {epoch} (per-task: {:?})",
                stats.losses
            )));
        }
        g.backward(loss, &mut model.store)?;
        optimizer.step(&mut model.store)?;
        model.store.zero_grads();
        model.apply_bn_updates(g.take_bn_updates());
        epoch_stats.merge(&stats, chunk.len() as f64, total);
    }
    Ok(epoch_stats)
}

/// Joint loss over a sample set in eval mode (running batch-norm stats, no
/// parameter updates).
pub fn evaluate(
    model: &MultiTaskModel<f32>,
    samples: &[ObjectSamples],
    config: &TrainConfig,
) -> Result<BatchStats> {
    if samples.is_empty() {
        return Err(Error::arg("evaluate: no samples"));
    }
    let mut stats = BatchStats::default();
    let total = samples.len() as f64;
    for chunk in samples.chunks(config.batch_size) {
        let mut g = Graph::new();
        let (_, s) = joint_loss(model, &mut g, chunk, config, BnMode::Eval)?;
        stats.merge(&s, chunk.len() as f64, total);
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: BatchStats,
    pub val: BatchStats,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Epoch (0-based) whose parameters the returned model carries; argmin
    /// of total validation loss.
    pub selected_epoch: usize,
    pub n_train_objects: usize,
    pub n_val_objects: usize,
}

impl std::fmt::Display for TrainReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:>5} {:>11} {:>11} {:>8} {:>8} {:>9} {:>9} {:>9}",
            "epoch", "train_loss", "val_loss", "t1_acc", "t2_acc", "t3_mae", "t4_mae", "selected"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:>5} {:>11.6} {:>11.6} {:>8.4} {:>8.4} {:>9.6} {:>9.6} {:>9}",
                row.epoch,
                row.train.total,
                row.val.total,
                row.val.t1_accuracy(),
                row.val.t2_accuracy(),
                row.val.losses[2],
                row.val.losses[3],
                if row.epoch == self.selected_epoch { "*" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Builds train/validation object samples from raw videos: runs the
/// detector, splits each video 85/15 along time, and materializes samples
/// whose full temporal window lies inside their partition.
pub fn collect_samples(
    videos: &[VideoClip],
    detector: &DetectorConfig,
    teacher: &TeacherBundle,
    config: &TrainConfig,
) -> Result<(Vec<ObjectSamples>, Vec<ObjectSamples>)> {
    let splits = split_train_val(videos);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut n_detections = 0usize;
    for (vi, video) in videos.iter().enumerate() {
        let detections = detect_video(video, detector, None)?;
        let (train_range, val_range) = &splits[vi];
        for (di, det) in detections.iter().flatten().enumerate() {
            n_detections += 1;
            for (range, out) in [(train_range, &mut train), (val_range, &mut val)] {
                if let Some(s) =
                    build_object_samples(video, vi as u64, det, teacher, config, range, di as u64)?
                {
                    out.push(s);
                }
            }
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg(format!(
            "insufficient samples: {} detections over {} videos yielded {} train / {} val objects",
            n_detections,
            videos.len(),
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

/// The frame-level stream's sample set: every frame is one full-frame
/// object whose distillation target aggregates the frame's detections (a
/// per-class max, uniform when the frame has none).
pub fn collect_frame_samples(
    videos: &[VideoClip],
    detector: &DetectorConfig,
    teacher: &TeacherBundle,
    config: &TrainConfig,
) -> Result<(Vec<ObjectSamples>, Vec<ObjectSamples>)> {
    let splits = split_train_val(videos);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        let detections = detect_video(video, detector, None)?;
        let probs = crate::inference::frame_class_probs(&detections, detector.n_det);
        let full = crate::spriteworld::Box2D {
            x1: 0,
            y1: 0,
            x2: video.width() as u32,
            y2: video.height() as u32,
        };
        let (train_range, val_range) = &splits[vi];
        for fi in 0..video.n_frames() {
            let det = crate::detection::Detection {
                frame_index: fi,
                bbox: full,
                confidence: 1.0,
                class_probs: probs[fi].clone(),
            };
            for (range, out) in [(train_range, &mut train), (val_range, &mut val)] {
                if let Some(s) =
                    build_object_samples(video, vi as u64, &det, teacher, config, range, fi as u64)?
                {
                    out.push(s);
                }
            }
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg(format!(
            "insufficient frame-level samples: {} train / {} val",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

/// Full training run: builds samples, trains `config.epochs` epochs, and
/// returns the model restored to the epoch with minimum total validation
/// loss.
pub fn fit(
    videos: &[VideoClip],
    detector: &DetectorConfig,
    teacher: &TeacherBundle,
    arch: ArchitectureConfig,
    config: &TrainConfig,
) -> Result<(MultiTaskModel<f32>, TrainReport)> {
    config.validate()?;
    if videos.is_empty() {
        return Err(Error::arg("fit: no training videos"));
    }
    let (train_samples, val_samples) = collect_samples(videos, detector, teacher, config)?;
    fit_with_samples(&train_samples, &val_samples, teacher, arch, config)
}

/// Training loop over pre-built sample sets: used by both the object-level
/// and frame-level streams.
pub fn fit_with_samples(
    train_samples: &[ObjectSamples],
    val_samples: &[ObjectSamples],
    teacher: &TeacherBundle,
    arch: ArchitectureConfig,
    config: &TrainConfig,
) -> Result<(MultiTaskModel<f32>, TrainReport)> {
    config.validate()?;
    if config.enabled(Task::Distill) && arch.n_distill != teacher.target_len() {
        return Err(Error::shape(format!(
            "architecture n_distill {} does not match teacher target length {}",
            arch.n_distill,
            teacher.target_len()
        )));
    }
    let mut model = build_model::<f32>(arch, config.seed)?;
    let mut optimizer =
        AdamState::with_learning_rate(&model.store, config.learning_rate as f32);

    let mut rows = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>, Vec<crate::numerics::BnStats<f32>>)> =
        None;
    for epoch in 0..config.epochs {
        let train_stats = train_epoch(&mut model, train_samples, &mut optimizer, config, epoch)?;
        let val_stats = evaluate(&model, val_samples, config)?;
        if best.as_ref().map_or(true, |(b, ..)| val_stats.total < *b) {
            let params = model.store.ids().map(|id| model.store.value(id).clone()).collect();
            best = Some((val_stats.total, epoch, params, model.bn_stats().to_vec()));
        }
        rows.push(EpochRow {
            epoch,
            train: train_stats,
            val: val_stats,
        });
    }
    let (_, selected_epoch, params, bn) = best.expect("epochs >= 1");
    for (id, value) in model.store.ids().zip(params) {
        *model.store.value_mut(id) = value;
    }
    *model.bn_stats_mut() = bn;
    Ok((
        model,
        TrainReport {
            rows,
            selected_epoch,
            n_train_objects: train_samples.len(),
            n_val_objects: val_samples.len(),
        },
    ))
}
