//! Procedural videos with a known frame → shot → video hierarchy.
//!
//! Every video shows 1–3 objects of one shape family (the semantic class).
//! Shots cut abruptly to a new background, palette, lighting and layout while
//! the object pose drifts slowly inside a shot.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::histogram::{frame_histogram_u8, l1_distance};
use crate::rng::{stream_rng, streams};

pub const FAMILIES: [&str; 8] = [
    "circle", "ellipse", "triangle", "square", "hexagon", "bar", "cross", "half-disc",
];
pub const MAX_OBJECTS: usize = 3;
/// Pixel value of a frame rendered with zero lighting gain.
pub const BACKGROUND_FLOOR: f64 = 0.03;
const CUT_MIN_DISTANCE: f64 = 0.6;
const SHOT_MAX_INTERNAL_DISTANCE: f64 = 0.2;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub videos: usize,
    pub shots_per_video: usize,
    pub frames_per_shot: usize,
    pub classes: usize,
    pub size: usize,
    /// Vary the shot count uniformly by ±1 around `shots_per_video`.
    pub shot_jitter: bool,
    /// Object radius range as a fraction of the frame half-width.
    pub object_scale: (f64, f64),
    /// Maximum per-frame rotation, degrees.
    pub max_spin_deg: f64,
    /// Spread of per-shot orientation around the video's base pose, degrees.
    pub shot_pose_jitter_deg: f64,
    pub max_lighting_drift: f64,
    /// Maximum object speed, half-widths per frame.
    pub max_speed: f64,
    /// Maximum relative change of object size per frame (camera distance).
    pub max_zoom: f64,
    /// Maximum background pan, stripe radians per frame.
    pub max_pan: f64,
    /// Offset added to video ids, so held-out corpora do not collide.
    pub first_id: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            videos: 400,
            shots_per_video: 4,
            frames_per_shot: 12,
            classes: 8,
            size: 32,
            shot_jitter: true,
            object_scale: (0.34, 0.44),
            max_spin_deg: 2.0,
            shot_pose_jitter_deg: 20.0,
            max_lighting_drift: 0.015,
            max_speed: 0.03,
            max_zoom: 0.015,
            max_pan: 0.3,
            first_id: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > FAMILIES.len() {
            return bad(format!("classes must be in 2..={}, got {}", FAMILIES.len(), self.classes));
        }
        if self.shots_per_video < 2 {
            return bad("shots_per_video must be >= 2".into());
        }
        if self.frames_per_shot < 8 {
            return bad("frames_per_shot must be >= 8".into());
        }
        if self.videos == 0 {
            return bad("videos must be >= 1".into());
        }
        if self.size < 8 || self.size > u16::MAX as usize {
            return bad(format!("frame size {} out of range", self.size));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("object_scale range ({lo}, {hi}) is not well ordered"));
        }
        if hi >= 1.0 {
            return bad(format!("object radius {hi} of the half-width does not fit in the frame"));
        }
        if lo * self.size as f64 / 2.0 < 2.0 {
            return bad(format!("objects of radius {lo} cannot be rendered at {} px", self.size));
        }
        if self.max_speed < 0.0 || self.max_pan < 0.0 || !(0.0..0.05).contains(&self.max_zoom) {
            return bad("max_speed and max_pan must be >= 0 and max_zoom in [0, 0.05)".into());
        }
        let max_shots = self.shots_per_video + usize::from(self.shot_jitter);
        if max_shots * self.frames_per_shot > u16::MAX as usize {
            return bad("videos too long for the shard format".into());
        }
        Ok(())
    }
}

/// Ground truth that cannot be recovered from pixels and shards alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub object_count: usize,
    /// Orientation of every object in the frame, degrees in `[0, 360)`.
    pub orientation_deg: Vec<f32>,
    pub lighting: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `T × H × W × C`, row-major, 8-bit.
    pub frames: Vec<u8>,
    /// Frame indices where a new shot starts (0 is implicit and not listed).
    pub boundaries: Vec<usize>,
    pub label: u16,
    pub meta: Option<VideoMeta>,
}

impl VideoRecord {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_len()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    /// `(start, len)` of every shot.
    pub fn shots(&self) -> Vec<(usize, usize)> {
        let mut starts = vec![0];
        starts.extend(&self.boundaries);
        let t = self.num_frames();
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(t) - s))
            .collect()
    }

    pub fn num_shots(&self) -> usize {
        self.boundaries.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn get(&self, video_id: u32) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    /// Center in `[-1, 1]²` at frame 0 of the shot.
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotSpec {
    pub frames: usize,
    pub orientation_deg: f64,
    /// Rotation per frame, degrees.
    pub spin_deg: f64,
    pub object_rgb: [f64; 3],
    pub background_rgb: [f64; 3],
    pub stripe_freq: (f64, f64),
    pub stripe_phase: f64,
    /// Stripe phase change per frame.
    pub pan: f64,
    /// Relative object size change per frame.
    pub zoom: f64,
    pub gain: f64,
    pub gain_drift: f64,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub semantic_class: usize,
    pub size: usize,
    pub shots: Vec<ShotSpec>,
}

impl ShotSpec {
    pub fn orientation_at(&self, frame: usize) -> f64 {
        (self.orientation_deg + self.spin_deg * frame as f64).rem_euclid(360.0)
    }

    pub fn scale_at(&self, frame: usize) -> f64 {
        1.0 + self.zoom * frame as f64
    }

    pub fn gain_at(&self, frame: usize) -> f64 {
        (self.gain + self.gain_drift * frame as f64).clamp(0.0, 1.0)
    }
}

/// Signed distance (negative inside) to a unit-size shape in local coordinates.
fn family_sdf(family: usize, x: f64, y: f64) -> f64 {
    let boxd = |bx: f64, by: f64| {
        let (dx, dy) = (x.abs() - bx, y.abs() - by);
        (dx.max(0.0).hypot(dy.max(0.0))) + dx.max(dy).min(0.0)
    };
    let polygon = |sides: usize, apothem: f64| {
        (0..sides)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / sides as f64 + PI / 2.0;
                x * a.cos() + y * a.sin() - apothem
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    match family {
        0 => x.hypot(y) - 1.0,
        1 => (x.hypot(y / 0.55) - 1.0) * 0.55,
        2 => polygon(3, 0.55),
        3 => boxd(0.75, 0.75),
        4 => polygon(6, 0.9),
        5 => boxd(1.0, 0.32),
        6 => boxd(1.0, 0.3).min(boxd(0.3, 1.0)),
        _ => (x.hypot(y) - 1.0).max(-y),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rasterizes one frame with values in `[0, 1]`, `H × W × 3`.
pub fn render_frame(spec: &SceneSpec, shot_index: usize, frame_index: usize) -> Vec<f64> {
    let shot = &spec.shots[shot_index];
    let n = spec.size;
    let px = 2.0 / n as f64;
    let theta = shot.orientation_at(frame_index).to_radians();
    let (sin, cos) = theta.sin_cos();
    let gain = shot.gain_at(frame_index);
    let scale = shot.scale_at(frame_index);
    let t = frame_index as f64;
    let phase = shot.stripe_phase + shot.pan * t;
    let mut out = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        let v = -1.0 + (row as f64 + 0.5) * px;
        for col in 0..n {
            let u = -1.0 + (col as f64 + 0.5) * px;
            let stripes = 1.0
                + 0.15 * (shot.stripe_freq.0 * u + shot.stripe_freq.1 * v + phase).sin();
            let mut rgb = shot.background_rgb.map(|c| c * stripes);
            for obj in &shot.objects {
                let (cx, cy) = (obj.center.0 + obj.velocity.0 * t, obj.center.1 + obj.velocity.1 * t);
                let (dx, dy) = (u - cx, v - cy);
                let r = obj.radius * scale;
                let lx = (cos * dx + sin * dy) / r;
                let ly = (-sin * dx + cos * dy) / r;
                let d = family_sdf(spec.semantic_class, lx, ly) * r;
                let alpha = (0.5 - d / px).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let shade = 0.7 + 0.3 * lx.clamp(-1.0, 1.0);
                    for (c, &o) in rgb.iter_mut().zip(&shot.object_rgb) {
                        *c = *c * (1.0 - alpha) + o * shade * alpha;
                    }
                }
            }
            for c in rgb {
                out.push((BACKGROUND_FLOOR + gain * c).clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sample_shot<R: Rng>(rng: &mut R, cfg: &GenConfig, frames: usize, count: usize, base_pose: f64) -> ShotSpec {
    let (lo, hi) = cfg.object_scale;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let radius = rng.gen_range(lo..=hi) * [1.0, 0.8, 0.68][count.min(3) - 1];
    let span = frames as f64;
    let zoom = rng.gen_range(-1.0..=1.0) * cfg.max_zoom;
    let reach = radius * (1.0 + zoom * span).max(1.0);
    let v = cfg.max_speed;
    for _ in 0..count {
        let mut best = None;
        for _ in 0..MAX_ATTEMPTS {
            let lim = (1.0 - reach * 1.1).max(0.0);
            let vel = (rng.gen_range(-v..=v), rng.gen_range(-v..=v));
            let start = (rng.gen_range(-lim..=lim), rng.gen_range(-lim..=lim));
            let end = (start.0 + vel.0 * span, start.1 + vel.1 * span);
            if end.0.abs() > lim || end.1.abs() > lim {
                continue;
            }
            let clear = objects.iter().all(|o| {
                let d = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).hypot(p.1 - q.1);
                let oe = (o.center.0 + o.velocity.0 * span, o.center.1 + o.velocity.1 * span);
                d(start, o.center).min(d(end, oe)) > 2.3 * reach
            });
            best = Some(ObjectSpec {
                center: start,
                velocity: vel,
                radius,
            });
            if clear {
                break;
            }
        }
        objects.push(best.unwrap_or(ObjectSpec {
            center: (0.0, 0.0),
            velocity: (0.0, 0.0),
            radius,
        }));
    }
    let hue = rng.gen::<f64>();
    let bg_hue = hue + rng.gen_range(0.25..0.75);
    ShotSpec {
        frames,
        orientation_deg: (base_pose + rng.gen_range(-1.0..=1.0) * cfg.shot_pose_jitter_deg).rem_euclid(360.0),
        spin_deg: rng.gen_range(-1.0..=1.0) * cfg.max_spin_deg,
        object_rgb: hsv_to_rgb(hue, rng.gen_range(0.55..0.95), rng.gen_range(0.75..1.0)),
        background_rgb: hsv_to_rgb(bg_hue, rng.gen_range(0.2..0.8), rng.gen_range(0.15..0.6)),
        stripe_freq: (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)),
        stripe_phase: rng.gen_range(0.0..2.0 * PI),
        pan: rng.gen_range(-1.0..=1.0) * cfg.max_pan,
        zoom,
        gain: rng.gen_range(0.65..1.0),
        gain_drift: rng.gen_range(-1.0..=1.0) * cfg.max_lighting_drift,
        objects,
    }
}

fn render_shot(spec: &SceneSpec, shot: usize) -> Vec<u8> {
    (0..spec.shots[shot].frames)
        .flat_map(|f| render_frame(spec, shot, f).into_iter().map(quantize))
        .collect()
}

/// Scene of one video, including the rejection sampling that keeps cuts
/// visible and shots internally smooth. Also returns the rendered frames.
pub fn generate_video(cfg: &GenConfig, seed: u64, index: usize, class: usize) -> (SceneSpec, VideoRecord) {
    let video_id = cfg.first_id + index as u32;
    let mut rng = stream_rng(seed, streams::VIDEO, u64::from(video_id));
    let k = if cfg.shot_jitter {
        rng.gen_range(cfg.shots_per_video - 1..=cfg.shots_per_video + 1).max(1)
    } else {
        cfg.shots_per_video
    };
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let base_pose = rng.gen_range(0.0..360.0);
    let n = cfg.size;
    let frame_len = n * n * 3;
    let mut spec = SceneSpec {
        semantic_class: class,
        size: n,
        shots: Vec::with_capacity(k),
    };
    let mut frames: Vec<u8> = Vec::with_capacity(k * cfg.frames_per_shot * frame_len);
    let mut boundaries = Vec::new();
    for s in 0..k {
        let prev = (s > 0).then(|| frame_histogram_u8(&frames[frames.len() - frame_len..], 3));
        let mut chosen = None;
        for attempt in 0..MAX_ATTEMPTS {
            let shot = sample_shot(&mut rng, cfg, cfg.frames_per_shot, count, base_pose);
            spec.shots.push(shot);
            let pixels = render_shot(&spec, s);
            let hists: Vec<Vec<f64>> = pixels.chunks(frame_len).map(|f| frame_histogram_u8(f, 3)).collect();
            let cut_ok = prev.as_ref().map_or(true, |p| l1_distance(p, &hists[0]) > CUT_MIN_DISTANCE);
            let smooth = hists.windows(2).all(|w| l1_distance(&w[0], &w[1]) < SHOT_MAX_INTERNAL_DISTANCE);
            if (cut_ok && smooth) || attempt + 1 == MAX_ATTEMPTS {
                chosen = Some(pixels);
                break;
            }
            spec.shots.pop();
        }
        if s > 0 {
            boundaries.push(frames.len() / frame_len);
        }
        frames.extend(chosen.expect("last attempt is always accepted"));
    }
    let mut orientation = Vec::new();
    let mut lighting = Vec::new();
    for shot in &spec.shots {
        for f in 0..shot.frames {
            orientation.push(shot.orientation_at(f) as f32);
            lighting.push(shot.gain_at(f) as f32);
        }
    }
    let record = VideoRecord {
        video_id,
        height: n,
        width: n,
        channels: 3,
        frames,
        boundaries,
        label: class as u16,
        meta: Some(VideoMeta {
            object_count: count,
            orientation_deg: orientation,
            lighting,
        }),
    };
    (spec, record)
}

/// Class-balanced corpus: every class appears `videos / classes` times (the
/// remainder goes to the lowest classes), in a seeded random order.
pub fn generate_corpus(cfg: &GenConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut classes: Vec<usize> = (0..cfg.videos).map(|i| i % cfg.classes).collect();
    classes.shuffle(&mut stream_rng(seed, streams::VIDEO, u64::MAX));
    let videos = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| generate_video(cfg, seed, i, c).1)
        .collect();
    Ok(Corpus { videos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            videos: 16,
            shots_per_video: 3,
            frames_per_shot: 8,
            classes: 8,
            size: 16,
            object_scale: (0.3, 0.4),
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_corpus(&small(), 7).unwrap();
        let b = generate_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let mut hist = [0; 8];
        for v in &a.videos {
            hist[v.label as usize] += 1;
            assert_eq!(v.num_frames(), v.num_shots() * 8);
            assert!((2..=4).contains(&v.num_shots()));
            assert!(v.boundaries.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(hist, [2; 8]);
    }

    #[test]
    fn render_is_pure_and_pose_advances() {
        let (spec, _) = generate_video(&small(), 3, 0, 2);
        assert_eq!(render_frame(&spec, 1, 4), render_frame(&spec, 1, 4));
        let s = &spec.shots[0];
        let step = s.orientation_at(1) - s.orientation_at(0);
        assert!((step.rem_euclid(360.0) - s.spin_deg.rem_euclid(360.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_gain_gives_floor() {
        let (mut spec, _) = generate_video(&small(), 3, 0, 5);
        spec.shots[0].gain = 0.0;
        spec.shots[0].gain_drift = 0.0;
        assert!(render_frame(&spec, 0, 0).iter().all(|&v| v == BACKGROUND_FLOOR));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.classes = 1;
        assert!(generate_corpus(&c, 0).is_err());
        let mut c = small();
        c.object_scale = (0.5, 1.2);
        assert!(generate_corpus(&c, 0).is_err());
        let mut c = small();
        c.frames_per_shot = 4;
        assert!(generate_corpus(&c, 0).is_err());
    }
}
