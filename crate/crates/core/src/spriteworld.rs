//! Deterministic synthetic video benchmark: colored sprites gliding over a
//! textured background, with anomalous test-split behaviors (fast motion,
//! an unseen shape class, erratic motion) and exact frame/region/track
//! ground truth.
//!
//! Sprites drag a short fading trail behind them, which gives sequences a
//! visible arrow of time. Pixels are quantized to the u8 grid so the file
//! round-trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const VIDEO_MAGIC: &[u8; 4] = b"SWV1";

/// Axis-aligned pixel box, inclusive-exclusive on the max edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Box2D {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl Box2D {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }
    pub fn intersection_area(&self, other: &Box2D) -> u64 {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x2 > x1 && y2 > y1 {
            (x2 - x1) as u64 * (y2 - y1) as u64
        } else {
            0
        }
    }
    pub fn iou(&self, other: &Box2D) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn id(&self) -> u8 {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(ShapeClass::Circle),
            1 => Ok(ShapeClass::Square),
            2 => Ok(ShapeClass::Triangle),
            _ => Err(Error::arg(format!("unknown shape class id {id}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnomalyType {
    FastMotion,
    UnseenShape,
    ErraticMotion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub bbox: Box2D,
    pub class: u8,
    pub anomalous: bool,
    pub track_id: u32,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub frame_labels: Vec<bool>,
    /// Per frame, the regions present in it.
    pub regions: Vec<Vec<Region>>,
    pub tracks: BTreeMap<u32, Vec<(usize, Box2D)>>,
}

impl GroundTruth {
    /// A track is anomalous if any of its regions is.
    pub fn anomalous_track_ids(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (&id, _) in &self.tracks {
            let any = self
                .regions
                .iter()
                .flatten()
                .any(|r| r.track_id == id && r.anomalous);
            if any {
                out.push(id);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// [T, H, W, 3] values in [0, 1], quantized to the u8 grid.
    pub frames: Tensor<f32>,
    pub fps: f32,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub n_train_videos: usize,
    pub n_test_videos: usize,
    pub frames_per_video: usize,
    pub normal_shapes: Vec<ShapeClass>,
    pub anomaly_types: Vec<AnomalyType>,
    /// Normal speed range in px/frame.
    pub speed_normal: (f64, f64),
    /// Minimum anomalous speed in px/frame.
    pub speed_anomalous: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frame_height: 120,
            frame_width: 160,
            n_train_videos: 2,
            n_test_videos: 4,
            frames_per_video: 80,
            normal_shapes: vec![ShapeClass::Circle, ShapeClass::Square],
            anomaly_types: vec![
                AnomalyType::FastMotion,
                AnomalyType::UnseenShape,
                AnomalyType::ErraticMotion,
            ],
            speed_normal: (1.0, 2.0),
            speed_anomalous: 5.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.normal_shapes.is_empty() {
            return Err(Error::arg("normal_shapes must not be empty"));
        }
        if self.speed_anomalous <= self.speed_normal.1 {
            return Err(Error::arg(format!(
                "anomalous speed {} must exceed max normal speed {}",
                self.speed_anomalous, self.speed_normal.1
            )));
        }
        if self.speed_normal.0 <= 0.0 || self.speed_normal.1 < self.speed_normal.0 {
            return Err(Error::arg("normal speed range must be positive and ordered"));
        }
        if self.frame_height < 40 || self.frame_width < 40 {
            return Err(Error::arg("frames must be at least 40x40"));
        }
        if self.frames_per_video < 8 {
            return Err(Error::arg("need at least 8 frames per video"));
        }
        if !self.anomaly_types.is_empty() && self.n_test_videos < self.anomaly_types.len() {
            return Err(Error::arg(format!(
                "{} test videos cannot cover {} anomaly types",
                self.n_test_videos,
                self.anomaly_types.len()
            )));
        }
        if self.normal_shapes.contains(&ShapeClass::Triangle) {
            return Err(Error::arg(
                "triangle is reserved as the unseen anomalous shape",
            ));
        }
        Ok(())
    }
}

// Trail contrast stays below the blob detector's pixel threshold even
// where the two ghosts overlap (combined alpha 1-0.90*0.94 = 0.154, times
// max channel difference ~0.65 gives < 0.1): the trail is a temporal cue
// for the network, not a detectable object. Lags are several frames so the
// ghosts peek out from behind slow sprites (1-2 px/frame, radius >= 8)
// instead of hiding underneath them — otherwise playback direction is
// unobservable for normal-speed objects.
const TRAIL_GHOSTS: [(usize, f32); 2] = [(3, 0.10), (8, 0.06)];
const BACKGROUND_BASE: f32 = 0.35;
const BACKGROUND_NOISE: f32 = 0.04;
const SPRITE_COLORS: [[f32; 3]; 4] = [
    [0.95, 0.25, 0.15],
    [0.15, 0.85, 0.95],
    [0.95, 0.85, 0.10],
    [0.25, 0.95, 0.30],
];
const UNSEEN_COLOR: [f32; 3] = [0.95, 0.15, 0.90];

struct Sprite {
    shape: ShapeClass,
    color: [f32; 3],
    radius: f64,
    pos: (f64, f64), // (x, y) center
    vel: (f64, f64),
    anomaly: Option<AnomalyType>,
    /// Frames [start, end) during which the sprite exists.
    active: (usize, usize),
    track_id: u32,
    /// Recent positions, newest last; used for the trail.
    history: Vec<(f64, f64)>,
}

fn random_velocity(rng: &mut ChaCha8Rng, speed_range: (f64, f64)) -> (f64, f64) {
    let speed = rng.gen_range(speed_range.0..=speed_range.1);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin())
}

fn bounce(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = lo + (lo - *pos);
        *vel = -*vel;
    }
    if *pos > hi {
        *pos = hi - (*pos - hi);
        *vel = -*vel;
    }
    *pos = pos.clamp(lo, hi);
}

/// Paints the shape body; returns the inclusive-exclusive bounding box of
/// the painted pixels, if any.
fn paint(
    frame: &mut [f32],
    h: usize,
    w: usize,
    sprite: &Sprite,
    center: (f64, f64),
    alpha: f32,
) -> Option<Box2D> {
    let (cx, cy) = center;
    let r = sprite.radius;
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match sprite.shape {
                ShapeClass::Circle => dx * dx + dy * dy <= r * r,
                ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
                // upward-pointing isoceles triangle
                ShapeClass::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            };
            if !inside {
                continue;
            }
            let base = (y * w + x) * 3;
            for c in 0..3 {
                frame[base + c] = alpha * sprite.color[c] + (1.0 - alpha) * frame[base + c];
            }
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
            });
        }
    }
    bbox.map(|(x1, y1, x2, y2)| Box2D {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32 + 1,
        y2: y2 as u32 + 1,
    })
}

/// Sprites repel each other so their pixel bodies never merge into one
/// connected component; overlapping blobs would otherwise be indistinguishable
/// to the background-subtraction detector.
fn separate_sprites(sprites: &mut [Sprite], next_frame: usize, w: f64, h: f64) {
    let margin = 4.0;
    for _ in 0..8 {
        let mut moved = false;
        for i in 0..sprites.len() {
            for j in i + 1..sprites.len() {
                let active = |s: &Sprite| next_frame + 1 >= s.active.0 && next_frame < s.active.1;
                if !active(&sprites[i]) || !active(&sprites[j]) {
                    continue;
                }
                let min_dist = sprites[i].radius + sprites[j].radius + margin;
                let dx = sprites[j].pos.0 - sprites[i].pos.0;
                let dy = sprites[j].pos.1 - sprites[i].pos.1;
                let dist = (dx * dx + dy * dy).sqrt();
                if dist >= min_dist {
                    continue;
                }
                moved = true;
                let (nx, ny) = if dist > 1e-9 {
                    (dx / dist, dy / dist)
                } else {
                    (1.0, 0.0)
                };
                let push = (min_dist - dist) / 2.0 + 0.5;
                sprites[i].pos.0 -= nx * push;
                sprites[i].pos.1 -= ny * push;
                sprites[j].pos.0 += nx * push;
                sprites[j].pos.1 += ny * push;
                // reflect the velocity components along the contact normal
                for s in [i, j] {
                    let v = &mut sprites[s].vel;
                    let vn = v.0 * nx + v.1 * ny;
                    let sign = if s == i { 1.0 } else { -1.0 };
                    if vn * sign > 0.0 {
                        v.0 -= 2.0 * vn * nx;
                        v.1 -= 2.0 * vn * ny;
                    }
                }
                for s in [i, j] {
                    let r = sprites[s].radius;
                    let mut zero = 0.0;
                    bounce(&mut sprites[s].pos.0, &mut zero, r, w - 1.0 - r);
                    let mut zero = 0.0;
                    bounce(&mut sprites[s].pos.1, &mut zero, r, h - 1.0 - r);
                }
            }
        }
        if !moved {
            break;
        }
    }
}

fn render_video(
    config: &SceneConfig,
    sprites: &mut [Sprite],
    rng: &mut ChaCha8Rng,
) -> (VideoClip, GroundTruth) {
    let (h, w, t) = (config.frame_height, config.frame_width, config.frames_per_video);

    // static textured background
    let mut background = vec![0.0f32; h * w * 3];
    for px in 0..h * w {
        let v = BACKGROUND_BASE + rng.gen_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
        for c in 0..3 {
            background[px * 3 + c] = v;
        }
    }

    let mut frames = vec![0.0f32; t * h * w * 3];
    let mut gt = GroundTruth {
        frame_labels: vec![false; t],
        regions: vec![Vec::new(); t],
        tracks: BTreeMap::new(),
    };

    for fi in 0..t {
        let frame = &mut frames[fi * h * w * 3..(fi + 1) * h * w * 3];
        frame.copy_from_slice(&background);

        for sprite in sprites.iter_mut() {
            if fi < sprite.active.0 || fi >= sprite.active.1 {
                continue;
            }
            // fading trail at previous positions, oldest faintest
            let n_hist = sprite.history.len();
            for &(lag, alpha) in TRAIL_GHOSTS.iter() {
                if lag <= n_hist {
                    let center = sprite.history[n_hist - lag];
                    paint(frame, h, w, sprite, center, alpha);
                }
            }
            let bbox = paint(frame, h, w, sprite, sprite.pos, 1.0);
            if let Some(bbox) = bbox {
                let region = Region {
                    bbox,
                    class: sprite.shape.id(),
                    anomalous: sprite.anomaly.is_some(),
                    track_id: sprite.track_id,
                };
                gt.regions[fi].push(region);
                gt.tracks
                    .entry(sprite.track_id)
                    .or_default()
                    .push((fi, bbox));
                if region.anomalous {
                    gt.frame_labels[fi] = true;
                }
            }

            // advance motion
            sprite.history.push(sprite.pos);
            if sprite.history.len() > TRAIL_ALPHAS.len() {
                sprite.history.remove(0);
            }
            if sprite.anomaly == Some(AnomalyType::ErraticMotion) {
                sprite.vel.0 += rng.gen_range(-2.0..=2.0);
                sprite.vel.1 += rng.gen_range(-2.0..=2.0);
                let speed = (sprite.vel.0.powi(2) + sprite.vel.1.powi(2)).sqrt();
                let target = config.speed_anomalous;
                if speed > 1e-9 {
                    // keep erratic motion at anomalous speed on average
                    let scale = (target / speed).clamp(0.5, 2.0);
                    sprite.vel.0 *= scale;
                    sprite.vel.1 *= scale;
                }
            }
            sprite.pos.0 += sprite.vel.0;
            sprite.pos.1 += sprite.vel.1;
            let r = sprite.radius;
            bounce(&mut sprite.pos.0, &mut sprite.vel.0, r, w as f64 - 1.0 - r);
            bounce(&mut sprite.pos.1, &mut sprite.vel.1, r, h as f64 - 1.0 - r);
        }
        separate_sprites(sprites, fi, w as f64, h as f64);
    }

    // quantize to the u8 grid so the file round-trip is bit-exact
    for v in frames.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let clip = VideoClip {
        frames: Tensor::from_vec(&[t, h, w, 3], frames).expect("shape"),
        fps: 10.0,
    };
    debug_assert!(gt
        .frame_labels
        .iter()
        .enumerate()
        .all(|(i, &l)| l == gt.regions[i].iter().any(|r| r.anomalous)));
    (clip, gt)
}

fn make_normal_sprites(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Sprite> {
    let (h, w, t) = (
        config.frame_height as f64,
        config.frame_width as f64,
        config.frames_per_video,
    );
    let mut sprites = Vec::new();
    for (i, &shape) in config.normal_shapes.iter().enumerate() {
        let radius = rng.gen_range(8.0..=12.0);
        let pos = (
            rng.gen_range(radius..w - 1.0 - radius),
            rng.gen_range(radius..h - 1.0 - radius),
        );
        let vel = random_velocity(rng, config.speed_normal);
        sprites.push(Sprite {
            shape,
            color: SPRITE_COLORS[i % SPRITE_COLORS.len()],
            radius,
            pos,
            vel,
            anomaly: None,
            active: (0, t),
            track_id: i as u32,
            history: Vec::new(),
        });
    }
    sprites
}

fn make_anomalous_sprite(
    config: &SceneConfig,
    anomaly: AnomalyType,
    track_id: u32,
    rng: &mut ChaCha8Rng,
) -> Sprite {
    let (h, w, t) = (
        config.frame_height as f64,
        config.frame_width as f64,
        config.frames_per_video,
    );
    let radius = rng.gen_range(8.0..=12.0);
    let pos = (
        rng.gen_range(radius..w - 1.0 - radius),
        rng.gen_range(radius..h - 1.0 - radius),
    );
    let window = ((t as f64) * 0.4).round() as usize;
    let start = rng.gen_range(t / 8..t - window);
    let (shape, color, vel) = match anomaly {
        // motion anomalies reuse their shape's training color so that only
        // motion, never appearance, distinguishes them from normal sprites
        AnomalyType::FastMotion => {
            let si = rng.gen_range(0..config.normal_shapes.len());
            let speed_hi = config.speed_anomalous + 2.0;
            let vel = random_velocity(rng, (config.speed_anomalous, speed_hi));
            (config.normal_shapes[si], SPRITE_COLORS[si % SPRITE_COLORS.len()], vel)
        }
        AnomalyType::UnseenShape => {
            let vel = random_velocity(rng, config.speed_normal);
            (ShapeClass::Triangle, UNSEEN_COLOR, vel)
        }
        AnomalyType::ErraticMotion => {
            let si = rng.gen_range(0..config.normal_shapes.len());
            let vel = random_velocity(rng, (config.speed_anomalous, config.speed_anomalous + 1.0));
            (config.normal_shapes[si], SPRITE_COLORS[si % SPRITE_COLORS.len()], vel)
        }
    };
    Sprite {
        shape,
        color,
        radius,
        pos,
        vel,
        anomaly: Some(anomaly),
        active: (start, start + window),
        track_id,
        history: Vec::new(),
    }
}

/// Generates the full benchmark: normal-only training videos and test
/// videos that each contain one anomalous sprite (when any anomaly types
/// are requested). Pure function of the config.
pub fn generate_dataset(
    config: &SceneConfig,
) -> Result<(Vec<VideoClip>, Vec<(VideoClip, GroundTruth)>)> {
    config.validate()?;
    let mut train = Vec::new();
    for vi in 0..config.n_train_videos {
        let mut rng = derive_rng(config.seed, "video-train", &[vi as u64]);
        let mut sprites = make_normal_sprites(config, &mut rng);
        let (clip, _) = render_video(config, &mut sprites, &mut rng);
        train.push(clip);
    }
    let mut test = Vec::new();
    for vi in 0..config.n_test_videos {
        let mut rng = derive_rng(config.seed, "video-test", &[vi as u64]);
        let mut sprites = make_normal_sprites(config, &mut rng);
        if !config.anomaly_types.is_empty() {
            let anomaly = config.anomaly_types[vi % config.anomaly_types.len()];
            let track_id = sprites.len() as u32;
            sprites.push(make_anomalous_sprite(config, anomaly, track_id, &mut rng));
        }
        let (clip, gt) = render_video(config, &mut sprites, &mut rng);
        test.push((clip, gt));
    }
    Ok((train, test))
}

pub fn ground_truth_boxes(gt: &GroundTruth, frame: usize) -> Result<&[Region]> {
    gt.regions
        .get(frame)
        .map(|v| v.as_slice())
        .ok_or_else(|| {
            Error::arg(format!(
                "frame {frame} out of range ({} frames)",
                gt.regions.len()
            ))
        })
}

// ---------------------------------------------------------------------------
// File formats

/// Writes magic + u32 T,H,W (LE) + row-major u8 RGB.
pub fn write_video(path: &Path, clip: &VideoClip) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(VIDEO_MAGIC).map_err(io)?;
    for dim in [clip.n_frames(), clip.height(), clip.width()] {
        f.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    }
    let bytes: Vec<u8> = clip
        .frames
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<VideoClip> {
    let io = |e| Error::io(path, e);
    let mut f = fs::File::open(path).map_err(io)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io)?;
    if &magic != VIDEO_MAGIC {
        return Err(Error::format(format!("{}: bad video magic", path.display())));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b).map_err(io)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [t, h, w] = dims;
    let mut bytes = vec![0u8; t * h * w * 3];
    f.read_exact(&mut bytes).map_err(io)?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(VideoClip {
        frames: Tensor::from_vec(&[t, h, w, 3], data)?,
        fps: 10.0,
    })
}

/// One line per region: `frame x1 y1 x2 y2 class anomalous track_id`.
pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut out = String::new();
    for (fi, regions) in gt.regions.iter().enumerate() {
        for r in regions {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                fi,
                r.bbox.x1,
                r.bbox.y1,
                r.bbox.x2,
                r.bbox.y2,
                r.class,
                r.anomalous as u8,
                r.track_id
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path, n_frames: usize) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gt = GroundTruth {
        frame_labels: vec![false; n_frames],
        regions: vec![Vec::new(); n_frames],
        tracks: BTreeMap::new(),
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::format(format!(
                "{}:{}: expected 8 fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::format(format!("{}:{}: bad number {s:?}", path.display(), ln + 1)))
        };
        let frame = parse(fields[0])? as usize;
        if frame >= n_frames {
            return Err(Error::format(format!(
                "{}:{}: frame {frame} out of range",
                path.display(),
                ln + 1
            )));
        }
        let region = Region {
            bbox: Box2D {
                x1: parse(fields[1])? as u32,
                y1: parse(fields[2])? as u32,
                x2: parse(fields[3])? as u32,
                y2: parse(fields[4])? as u32,
            },
            class: parse(fields[5])? as u8,
            anomalous: parse(fields[6])? != 0,
            track_id: parse(fields[7])? as u32,
        };
        if region.anomalous {
            gt.frame_labels[frame] = true;
        }
        gt.tracks
            .entry(region.track_id)
            .or_default()
            .push((frame, region.bbox));
        gt.regions[frame].push(region);
    }
    Ok(gt)
}

/// Directory layout: `train/video_NNN/frames.bin` and
/// `test/video_NNN/{frames.bin,gt.txt}`.
pub fn write_dataset(
    dir: &Path,
    train: &[VideoClip],
    test: &[(VideoClip, GroundTruth)],
) -> Result<()> {
    for (i, clip) in train.iter().enumerate() {
        let vdir = dir.join("train").join(format!("video_{i:03}"));
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        write_video(&vdir.join("frames.bin"), clip)?;
    }
    for (i, (clip, gt)) in test.iter().enumerate() {
        let vdir = dir.join("test").join(format!("video_{i:03}"));
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        write_video(&vdir.join("frames.bin"), clip)?;
        write_ground_truth(&vdir.join("gt.txt"), gt)?;
    }
    Ok(())
}

fn list_videos(split_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(split_dir)
        .map_err(|e| Error::io(split_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_train_split(dir: &Path) -> Result<Vec<VideoClip>> {
    list_videos(&dir.join("train"))?
        .iter()
        .map(|v| read_video(&v.join("frames.bin")))
        .collect()
}

pub fn read_test_split(dir: &Path) -> Result<Vec<(VideoClip, GroundTruth)>> {
    list_videos(&dir.join("test"))?
        .iter()
        .map(|v| {
            let clip = read_video(&v.join("frames.bin"))?;
            let gt = read_ground_truth(&v.join("gt.txt"), clip.n_frames())?;
            Ok((clip, gt))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SceneConfig {
        SceneConfig {
            frame_height: 60,
            frame_width: 80,
            n_train_videos: 1,
            n_test_videos: 3,
            frames_per_video: 24,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_config();
        let (tr1, te1) = generate_dataset(&cfg).unwrap();
        let (tr2, te2) = generate_dataset(&cfg).unwrap();
        assert_eq!(tr1[0].frames.data(), tr2[0].frames.data());
        for ((c1, g1), (c2, g2)) in te1.iter().zip(&te2) {
            assert_eq!(c1.frames.data(), c2.frames.data());
            assert_eq!(g1.frame_labels, g2.frame_labels);
            assert_eq!(g1.regions.len(), g2.regions.len());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_config();
        let mut cfg2 = small_config();
        cfg2.seed = 1;
        let (tr1, _) = generate_dataset(&cfg).unwrap();
        let (tr2, _) = generate_dataset(&cfg2).unwrap();
        assert_ne!(tr1[0].frames.data(), tr2[0].frames.data());
    }

    #[test]
    fn no_anomaly_types_means_all_normal() {
        let mut cfg = small_config();
        cfg.anomaly_types = Vec::new();
        let (_, test) = generate_dataset(&cfg).unwrap();
        for (_, gt) in &test {
            assert!(gt.frame_labels.iter().all(|&l| !l));
        }
    }

    #[test]
    fn default_anomalous_frame_fraction_in_range() {
        let cfg = SceneConfig::default();
        let (_, test) = generate_dataset(&cfg).unwrap();
        let total: usize = test.iter().map(|(_, g)| g.frame_labels.len()).sum();
        let anomalous: usize = test
            .iter()
            .map(|(_, g)| g.frame_labels.iter().filter(|&&l| l).count())
            .sum();
        let fraction = anomalous as f64 / total as f64;
        assert!((0.1..=0.6).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn every_requested_anomaly_type_appears() {
        let cfg = SceneConfig::default();
        let (_, test) = generate_dataset(&cfg).unwrap();
        // each test video with an anomalous region must exist for each type;
        // types are assigned round-robin across videos
        let videos_with_anomaly = test
            .iter()
            .filter(|(_, g)| g.frame_labels.iter().any(|&l| l))
            .count();
        assert!(videos_with_anomaly >= cfg.anomaly_types.len());
    }

    #[test]
    fn pixel_values_in_unit_interval() {
        let cfg = small_config();
        let (train, test) = generate_dataset(&cfg).unwrap();
        for clip in train.iter().chain(test.iter().map(|(c, _)| c)) {
            assert!(clip.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn empty_shape_set_rejected() {
        let mut cfg = small_config();
        cfg.normal_shapes = Vec::new();
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn slow_anomalous_speed_rejected() {
        let mut cfg = small_config();
        cfg.speed_anomalous = 1.5;
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn boxes_stay_inside_frame_and_enclose_sprites() {
        let cfg = small_config();
        let (_, test) = generate_dataset(&cfg).unwrap();
        for (clip, gt) in &test {
            let (h, w) = (clip.height() as u32, clip.width() as u32);
            for regions in &gt.regions {
                for r in regions {
                    assert!(r.bbox.x1 < r.bbox.x2 && r.bbox.x2 <= w);
                    assert!(r.bbox.y1 < r.bbox.y2 && r.bbox.y2 <= h);
                    // sprites are 8..12 px in radius, so boxes are 2 to 25
                    // px on a side (allowing border clipping)
                    assert!(r.bbox.width() <= 26 && r.bbox.height() <= 26);
                }
            }
        }
    }

    #[test]
    fn frame_labels_match_regions() {
        let cfg = SceneConfig::default();
        let (_, test) = generate_dataset(&cfg).unwrap();
        for (_, gt) in &test {
            for (fi, &label) in gt.frame_labels.iter().enumerate() {
                let derived = gt.regions[fi].iter().any(|r| r.anomalous);
                assert_eq!(label, derived);
            }
        }
    }

    #[test]
    fn tracks_cross_check_against_regions() {
        let cfg = small_config();
        let (_, test) = generate_dataset(&cfg).unwrap();
        for (_, gt) in &test {
            for (&track_id, entries) in &gt.tracks {
                for &(fi, bbox) in entries {
                    assert!(gt.regions[fi]
                        .iter()
                        .any(|r| r.track_id == track_id && r.bbox == bbox));
                }
            }
            let region_count: usize = gt.regions.iter().map(|v| v.len()).sum();
            let track_count: usize = gt.tracks.values().map(|v| v.len()).sum();
            assert_eq!(region_count, track_count);
        }
    }

    #[test]
    fn ground_truth_boxes_bounds_check() {
        let cfg = small_config();
        let (_, test) = generate_dataset(&cfg).unwrap();
        let gt = &test[0].1;
        assert!(ground_truth_boxes(gt, 0).is_ok());
        assert!(ground_truth_boxes(gt, cfg.frames_per_video).is_err());
    }

    #[test]
    fn video_file_round_trip_is_bit_exact() {
        let cfg = small_config();
        let (train, test) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &train, &test).unwrap();
        let train2 = read_train_split(dir.path()).unwrap();
        let test2 = read_test_split(dir.path()).unwrap();
        assert_eq!(train.len(), train2.len());
        assert_eq!(train[0].frames.data(), train2[0].frames.data());
        for ((c1, g1), (c2, g2)) in test.iter().zip(&test2) {
            assert_eq!(c1.frames.data(), c2.frames.data());
            assert_eq!(g1.frame_labels, g2.frame_labels);
            for (r1, r2) in g1.regions.iter().zip(&g2.regions) {
                assert_eq!(r1.len(), r2.len());
                for (a, b) in r1.iter().zip(r2) {
                    assert_eq!(a, b);
                }
            }
            assert_eq!(g1.tracks, g2.tracks);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(read_video(&path).is_err());
    }
}
