//! Encoder-side augmentation. Decoder queries and ground truth are never
//! altered by these operations, except by the horizontal flip which mirrors
//! the whole sample consistently.

use diffcore::RngStream;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rescale_intrinsics, DepthMap, PinholeIntrinsics, Pixel};
use crate::image::Image;
use crate::synthdata::RenderedSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub resize_min: f64,
    pub resize_max: f64,
    /// Jittered sizes are rounded up to a multiple of this.
    pub size_multiple: usize,
    /// Encoder tokens drop a proportion `p ~ U(0, dropout_max)`.
    pub dropout_max: f64,
    pub flip_prob: f64,
    /// Brightness, contrast, saturation and hue (turns) magnitudes.
    pub color_jitter: [f64; 4],
    /// Sub-pixel noise on encoder token coordinates.
    pub ray_jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_min: 0.25,
            resize_max: 1.5,
            size_multiple: 32,
            dropout_max: 0.5,
            flip_prob: 0.5,
            color_jitter: [0.5, 0.5, 0.5, 0.1],
            ray_jitter: true,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation off.
    pub fn disabled() -> Self {
        Self {
            resize_min: 1.0,
            resize_max: 1.0,
            size_multiple: 1,
            dropout_max: 0.0,
            flip_prob: 0.0,
            color_jitter: [0.0; 4],
            ray_jitter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resize_min > 0.0 && self.resize_min <= self.resize_max) {
            return Err(Error::config(
                "augment.resize_min",
                format!("need 0 < resize_min <= resize_max, got {} and {}", self.resize_min, self.resize_max),
            ));
        }
        if self.size_multiple == 0 {
            return Err(Error::config("augment.size_multiple", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_max) {
            return Err(Error::config("augment.dropout_max", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if self.color_jitter.iter().any(|m| !(*m >= 0.0)) || self.color_jitter[..3].iter().any(|&m| m > 1.0) {
            return Err(Error::config("augment.color_jitter", "magnitudes must be non-negative, the first three at most 1"));
        }
        Ok(())
    }
}

fn jittered_size(n: usize, ratio: f64, multiple: usize) -> usize {
    if ratio == 1.0 {
        return n;
    }
    let target = (n as f64 * ratio).ceil().max(1.0) as usize;
    target.div_ceil(multiple) * multiple
}

/// Resizes the encoder image with independent height and width ratios and
/// rescales the intrinsics to match. Depth stays at the native resolution.
pub fn resolution_jitter(sample: &RenderedSample, cfg: &AugmentConfig, rng: &mut RngStream) -> RenderedSample {
    let r_w = rng.uniform(cfg.resize_min, cfg.resize_max);
    let r_h = rng.uniform(cfg.resize_min, cfg.resize_max);
    resize_encoder_view(sample, r_w, r_h, cfg.size_multiple)
}

/// Deterministic core of [`resolution_jitter`] for given ratios.
pub fn resize_encoder_view(sample: &RenderedSample, r_w: f64, r_h: f64, multiple: usize) -> RenderedSample {
    let (w, h) = (sample.image.width(), sample.image.height());
    let (nw, nh) = (jittered_size(w, r_w, multiple), jittered_size(h, r_h, multiple));
    if (nw, nh) == (w, h) {
        return sample.clone();
    }
    let mut out = sample.clone();
    out.image = sample.image.resized(nw, nh);
    out.intrinsics = rescale_intrinsics(&sample.intrinsics, nw as f64 / w as f64, nh as f64 / h as f64);
    out
}

/// Perturbs each coordinate by independent `U(−0.5, 0.5)` noise.
pub fn ray_jitter(pixels: &[Pixel], rng: &mut RngStream) -> Vec<Pixel> {
    pixels
        .iter()
        .map(|p| Pixel::new(p.u + rng.uniform(-0.5, 0.5), p.v + rng.uniform(-0.5, 0.5)))
        .collect()
}

/// Sorted indices of the `round((1 − p)·n)` retained items (at least one).
pub fn dropout_keep(n: usize, p: f64, rng: &mut RngStream) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let keep = (((1.0 - p) * n as f64).round() as usize).clamp(1, n);
    if keep == n {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Draws `p ~ U(0, dropout_max)` and returns retained indices.
pub fn sample_dropout_keep(n: usize, dropout_max: f64, rng: &mut RngStream) -> Vec<usize> {
    if dropout_max <= 0.0 {
        return (0..n).collect();
    }
    let p = rng.uniform(0.0, dropout_max);
    dropout_keep(n, p, rng)
}

pub fn embedding_dropout<T: diffcore::Real>(
    tokens: &crate::embeddings::TokenSet<T>,
    rng: &mut RngStream,
    dropout_max: f64,
) -> crate::embeddings::TokenSet<T> {
    tokens.select(&sample_dropout_keep(tokens.len(), dropout_max, rng))
}

/// Mirrors image, depth and principal point; applied with `flip_prob`.
pub fn horizontal_flip(sample: &RenderedSample, rng: &mut RngStream, flip_prob: f64) -> RenderedSample {
    if flip_prob <= 0.0 || rng.uniform(0.0, 1.0) >= flip_prob {
        return sample.clone();
    }
    flip(sample)
}

pub fn flip(sample: &RenderedSample) -> RenderedSample {
    let mut out = sample.clone();
    out.image = sample.image.flipped_horizontally();
    let d = &sample.depth;
    let (w, h) = (d.width(), d.height());
    let mut values = d.to_nan_filled();
    for row in values.chunks_mut(w) {
        row.reverse();
    }
    out.depth = DepthMap::from_values(w, h, values).expect("same size");
    let k = &sample.intrinsics;
    out.intrinsics.cx = (k.width as f64 - 1.0) - k.cx;
    out
}

/// Brightness, contrast, saturation and hue factors drawn from
/// `magnitudes`, applied in that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Rotation about the gray axis in turns.
    pub hue: f64,
}

impl ColorFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample(magnitudes: [f64; 4], rng: &mut RngStream) -> Self {
        let [b, c, s, h] = magnitudes;
        Self {
            brightness: rng.uniform(1.0 - b, 1.0 + b),
            contrast: rng.uniform(1.0 - c, 1.0 + c),
            saturation: rng.uniform(1.0 - s, 1.0 + s),
            hue: rng.uniform(-h, h),
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn apply_color(image: &Image, f: ColorFactors) -> Image {
    let mut out = image.clone();
    if f.brightness != 1.0 {
        for v in out.data_mut() {
            *v *= f.brightness as f32;
        }
    }
    if f.contrast != 1.0 {
        let n = (out.width() * out.height()).max(1) as f32;
        let mean = out.data().chunks(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
        for v in out.data_mut() {
            *v = mean + (*v - mean) * f.contrast as f32;
        }
    }
    if f.saturation != 1.0 {
        for p in out.data_mut().chunks_mut(3) {
            let y = luma([p[0], p[1], p[2]]);
            for c in p.iter_mut() {
                *c = y + (*c - y) * f.saturation as f32;
            }
        }
    }
    if f.hue != 0.0 {
        let m = hue_matrix(f.hue * std::f64::consts::TAU);
        for p in out.data_mut().chunks_mut(3) {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            for (r, c) in p.iter_mut().enumerate() {
                *c = (m[r][0] * q[0] + m[r][1] * q[1] + m[r][2] * q[2]) as f32;
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Rotation by `angle` about the unit gray axis `(1,1,1)/√3`.
fn hue_matrix(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

pub fn color_jitter(image: &Image, rng: &mut RngStream, magnitudes: [f64; 4]) -> Image {
    if magnitudes == [0.0; 4] {
        return image.clone();
    }
    apply_color(image, ColorFactors::sample(magnitudes, rng))
}

/// Multiplies fx, fy, cx, cy by `1 + ε`, `ε ~ N(0, σ²)`, redrawing
/// any factor that would make a focal length non-positive.
pub fn perturb_intrinsics(k: &PinholeIntrinsics, noise_level: f64, rng: &mut RngStream) -> PinholeIntrinsics {
    if noise_level <= 0.0 {
        return *k;
    }
    let mut factor = |positive: bool| loop {
        let f = 1.0 + noise_level * rng.normal();
        if !positive || f > 0.0 {
            return f;
        }
    };
    let mut out = *k;
    out.fx *= factor(true);
    out.fy *= factor(true);
    out.cx *= factor(false);
    out.cy *= factor(false);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unproject;

    fn sample(w: usize, h: usize) -> RenderedSample {
        RenderedSample {
            id: "s".into(),
            image: Image::new(w, h, (0..w * h * 3).map(|i| (i % 13) as f32 / 12.0).collect()).unwrap(),
            depth: DepthMap::from_fn(w, h, |x, y| 1.0 + x as f64 + 0.5 * y as f64),
            intrinsics: PinholeIntrinsics::new(100.0, 90.0, 50.0, 40.0, w, h).unwrap(),
            extrinsics: None,
            dense: true,
        }
    }

    #[test]
    fn unit_range_is_identity() {
        let s = sample(48, 40);
        let cfg = AugmentConfig {
            resize_min: 1.0,
            resize_max: 1.0,
            ..AugmentConfig::default()
        };
        assert_eq!(resolution_jitter(&s, &cfg, &mut RngStream::new(0)), s);
    }

    #[test]
    fn half_size_example() {
        let mut s = sample(640, 384);
        s.intrinsics = PinholeIntrinsics::new(500.0, 500.0, 320.0, 192.0, 640, 384).unwrap();
        let out = resize_encoder_view(&s, 0.5, 0.5, 32);
        assert_eq!((out.image.width(), out.image.height()), (320, 192));
        assert_eq!(out.intrinsics, rescale_intrinsics(&s.intrinsics, 0.5, 0.5));
        assert_eq!(out.intrinsics.fx, 250.0);
        assert_eq!(out.intrinsics.cx, 160.25);
        assert_eq!(out.depth, s.depth);
    }

    #[test]
    fn jitter_preserves_geometry() {
        let s = sample(64, 48);
        let cfg = AugmentConfig {
            size_multiple: 8,
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let out = resolution_jitter(&s, &cfg, &mut RngStream::new(seed));
            assert_eq!(out, resolution_jitter(&s, &cfg, &mut RngStream::new(seed)));
            assert_eq!(out.image.width() % 8, 0);
            let r_w = out.image.width() as f64 / 64.0;
            let r_h = out.image.height() as f64 / 48.0;
            for (x, y) in [(0, 0), (13, 29), (63, 47)] {
                let p = Pixel::new(x as f64, y as f64);
                let d = s.depth.get(x, y).unwrap();
                let a = unproject(&s.intrinsics, p, d).unwrap();
                let q = crate::geometry::rescale_pixel(p, r_w, r_h);
                let b = unproject(&out.intrinsics, q, d).unwrap();
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn ray_jitter_bounds_and_mean() {
        let grid: Vec<Pixel> = (0..100_000).map(|i| Pixel::new((i % 97) as f64, (i / 97) as f64)).collect();
        let out = ray_jitter(&grid, &mut RngStream::new(4));
        let mut sum = 0.0;
        for (a, b) in grid.iter().zip(&out) {
            assert!((a.u - b.u).abs() <= 0.5 && (a.v - b.v).abs() <= 0.5);
            sum += b.u - a.u;
        }
        assert!((sum / grid.len() as f64).abs() < 0.01);
    }

    #[test]
    fn dropout_counts() {
        let mut rng = RngStream::new(2);
        assert_eq!(dropout_keep(100, 0.5, &mut rng).len(), 50);
        assert_eq!(sample_dropout_keep(37, 0.0, &mut rng), (0..37).collect::<Vec<_>>());
        assert_eq!(dropout_keep(3, 0.99, &mut rng).len(), 1);
        for _ in 0..20 {
            let k = sample_dropout_keep(40, 0.5, &mut rng);
            assert!(k.windows(2).all(|w| w[0] < w[1]));
            assert!(k.len() >= 20 && k.len() <= 40);
        }
    }

    #[test]
    fn flip_involution() {
        let s = sample(128, 8);
        let f = flip(&s);
        assert_eq!(f.intrinsics.cx, 77.0);
        assert_eq!(f.depth.get(0, 3), s.depth.get(127, 3));
        assert_eq!(flip(&f), s);
        assert_eq!(horizontal_flip(&s, &mut RngStream::new(1), 0.0), s);
    }

    #[test]
    fn color_identity_and_range() {
        let s = sample(16, 16);
        assert_eq!(color_jitter(&s.image, &mut RngStream::new(0), [0.0; 4]), s.image);
        assert_eq!(apply_color(&s.image, ColorFactors::IDENTITY), s.image);
        let mut rng = RngStream::new(9);
        for _ in 0..20 {
            let out = color_jitter(&s.image, &mut rng, [0.5, 0.5, 0.5, 0.1]);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn intrinsics_noise() {
        let k = PinholeIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let mut rng = RngStream::new(5);
        assert_eq!(perturb_intrinsics(&k, 0.0, &mut rng), k);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let p = perturb_intrinsics(&k, 0.1, &mut rng);
            assert!(p.fx > 0.0 && p.fy > 0.0);
            sum += p.fx;
        }
        assert!((sum / n as f64 / 100.0 - 1.0).abs() < 0.005);
    }
}
