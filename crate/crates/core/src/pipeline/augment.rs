use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Exemplar views per shot (frame-exemplar mode: views of one frame).
    pub exemplar_frames: usize,
    /// Side of the crop window as a fraction of the frame side.
    pub crop_scale: (f64, f64),
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Hue jitter as a fraction of the color wheel.
    pub hue: f64,
    pub hsv_randomization: bool,
    /// Global per-image hue/saturation/value shift ranges when `hsv_randomization` is on.
    pub hsv_shift: (f64, f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            exemplar_frames: 8,
            crop_scale: (0.7, 1.0),
            rotation_deg: 8.0,
            brightness: 0.15,
            contrast: 0.3,
            hue: 0.05,
            hsv_randomization: false,
            hsv_shift: (0.1, 0.2, 0.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            hsv_randomization: false,
            hsv_shift: (0.0, 0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (h, s, v) = self.hsv_shift;
        let nonneg = [self.rotation_deg, self.brightness, self.contrast, self.hue, h, s, v];
        if nonneg.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("augmentation ranges must be >= 0".into()));
        }
        if self.contrast >= 1.0 {
            return Err(Error::Config("contrast range must be < 1".into()));
        }
        if self.exemplar_frames == 0 {
            return Err(Error::Config("exemplar_frames must be >= 1".into()));
        }
        Ok(())
    }
}

fn sym<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.gen_range(-r..=r)
    }
}

/// Rotates a square `n × n × c` image counter-clockwise by `quarter_turns · 90°`.
pub fn rotate90<T: Copy>(img: &[T], n: usize, c: usize, quarter_turns: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            out.extend_from_slice(&img[(sy * n + sx) * c..(sy * n + sx + 1) * c]);
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hsv(img: &mut [f32], dh: f32, ds: f32, dv: f32) {
    for px in img.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0));
        px.copy_from_slice(&[r, g, b]);
    }
}

fn crop_rotate(img: &[f32], n: usize, c: usize, scale: f64, theta: f64, off: (f64, f64)) -> Vec<f32> {
    let c0 = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let last = (n - 1) as f64;
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c0, y as f64 - c0);
            let sx = (c0 + off.0 + scale * (cos * dx - sin * dy)).clamp(0.0, last);
            let sy = (c0 + off.1 + scale * (sin * dx + cos * dy)).clamp(0.0, last);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| img[(yy * n + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * n + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Augments every `n × n × c` frame in `frames` independently, in place.
pub fn augment<R: Rng>(frames: &mut [f32], n: usize, c: usize, cfg: &AugmentConfig, rng: &mut R) {
    let len = n * n * c;
    for img in frames.chunks_mut(len) {
        let (lo, hi) = cfg.crop_scale;
        let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let theta = sym(rng, cfg.rotation_deg).to_radians();
        let slack = (1.0 - scale) * (n as f64 - 1.0) / 2.0;
        let off = (sym(rng, slack), sym(rng, slack));
        if scale != 1.0 || theta != 0.0 {
            let warped = crop_rotate(img, n, c, scale, theta, off);
            img.copy_from_slice(&warped);
        }
        let b = sym(rng, cfg.brightness) as f32;
        let k = 1.0 + sym(rng, cfg.contrast) as f32;
        let dh = sym(rng, cfg.hue) as f32;
        if k != 1.0 {
            let mean = img.iter().sum::<f32>() / img.len() as f32;
            img.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
        }
        if b != 0.0 {
            img.iter_mut().for_each(|v| *v += b);
        }
        if c == 3 && dh != 0.0 {
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            shift_hsv(img, dh, 0.0, 0.0);
        }
        if cfg.hsv_randomization && c == 3 {
            let (h, s, v) = cfg.hsv_shift;
            let (dh, ds, dv) = (sym(rng, h) as f32, sym(rng, s) as f32, sym(rng, v) as f32);
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            shift_hsv(img, dh, ds, dv);
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn identity_config_is_bit_exact() {
        let src = noise(2 * 8 * 8 * 3, 1);
        let mut out = src.clone();
        augment(&mut out, 8, 3, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(src, out);
    }

    #[test]
    fn clipped_and_reproducible() {
        let cfg = AugmentConfig {
            brightness: 0.9,
            contrast: 0.9,
            hsv_randomization: true,
            ..AugmentConfig::default()
        };
        let src = noise(3 * 8 * 8 * 3, 2);
        let mut a = src.clone();
        let mut b = src.clone();
        augment(&mut a, 8, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        augment(&mut b, 8, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_ne!(a, src);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rotate90_cycles() {
        let img: Vec<u32> = (0..9).collect();
        assert_eq!(rotate90(&img, 3, 1, 1), vec![2, 5, 8, 1, 4, 7, 0, 3, 6]);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r, 3, 1, 1);
        }
        assert_eq!(r, img);
        assert_eq!(rotate90(&rotate90(&img, 3, 1, 1), 3, 1, 1), rotate90(&img, 3, 1, 2));
    }

    #[test]
    fn hsv_round_trip() {
        for px in noise(300, 3).chunks(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            assert!((r - px[0]).abs() < 1e-5 && (g - px[1]).abs() < 1e-5 && (b - px[2]).abs() < 1e-5);
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_scale: (0.9, 0.5),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
