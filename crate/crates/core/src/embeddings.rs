//! Geometric (Fourier ray) and image-feature embeddings.

use diffcore::{BoundParams, Graph, ParameterRegistry, Real, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_direction, rescale_intrinsics, PinholeIntrinsics, Pixel};
use crate::image::{lerp_index, Image};

/// Frequency layout of the ray encoding. Output width is `3(F + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierConfig {
    /// Number of frequency bands `F` (even): `F/2` sines and `F/2` cosines.
    pub bands: usize,
    /// Maximum resolution `μ`; the top frequency is `μ/2`.
    pub max_resolution: f64,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self {
            bands: 16,
            max_resolution: 64.0,
        }
    }
}

impl FourierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands % 2 != 0 {
            return Err(Error::config("fourier.bands", format!("must be even, got {}", self.bands)));
        }
        if !(self.max_resolution >= 2.0) {
            return Err(Error::config(
                "fourier.max_resolution",
                format!("must be at least 2, got {}", self.max_resolution),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        3 * (self.bands + 1)
    }

    /// `F/2` frequencies log-spaced over `[1, μ/2]`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.bands / 2;
        match n {
            0 => Vec::new(),
            1 => vec![1.0],
            _ => {
                let top = (self.max_resolution / 2.0).ln();
                (0..n).map(|k| (top * k as f64 / (n - 1) as f64).exp()).collect()
            }
        }
    }
}

/// How decoder queries and encoder tokens describe pixel position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Fourier-encoded unit viewing rays through the calibrated intrinsics.
    #[default]
    Rays,
    /// Fourier-encoded image-normalized pixel coordinates; ignores focal
    /// length and principal point.
    PixelCoords,
}

fn encode_vector_into(c: [f64; 3], freqs: &[f64], out: &mut Vec<f64>) {
    for &x in &c {
        out.push(x);
        out.extend(freqs.iter().map(|f| (std::f64::consts::PI * f * x).sin()));
        out.extend(freqs.iter().map(|f| (std::f64::consts::PI * f * x).cos()));
    }
}

/// Fourier encoding of a unit direction: per component `[c, sin(πf₁c) …,
/// cos(πf₁c) …]`, components concatenated x, y, z.
pub fn fourier_encode(direction: [f64; 3], cfg: &FourierConfig) -> Result<Vec<f64>> {
    let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("direction must be unit length, got norm {norm}")));
    }
    let mut out = Vec::with_capacity(cfg.dim());
    encode_vector_into(direction, &cfg.frequencies(), &mut out);
    Ok(out)
}

/// Ordered pixel coordinates with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub coords: Vec<Pixel>,
    /// `[coords.len(), dim]`
    pub features: Tensor<T>,
}

impl<T: Real> TokenSet<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Keeps rows at `index` (ascending), preserving order.
    pub fn select(&self, index: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Self {
            coords: index.iter().map(|&i| self.coords[i]).collect(),
            features: Tensor::new(vec![index.len(), d], data).expect("sized"),
        }
    }
}

/// Position embedding rows for `pixels`, one per pixel, `[n, 3(F+1)]`.
pub fn position_embeddings<T: Real>(
    k: &PinholeIntrinsics,
    pixels: &[Pixel],
    cfg: &FourierConfig,
    mode: EmbeddingMode,
) -> Tensor<T> {
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(pixels.len() * cfg.dim());
    for &p in pixels {
        let c = match mode {
            EmbeddingMode::Rays => {
                let d = ray_direction(k, p).direction;
                [d.x, d.y, d.z]
            }
            EmbeddingMode::PixelCoords => [
                2.0 * (p.u - 0.5) / k.width as f64 - 1.0,
                2.0 * (p.v - 0.5) / k.height as f64 - 1.0,
                0.0,
            ],
        };
        encode_vector_into(c, &freqs, &mut out);
    }
    Tensor::from_fn(&[pixels.len(), cfg.dim()], |i| T::of(out[i]))
}

/// Ray embeddings for `pixels` under intrinsics `k`, in input order.
pub fn geometric_embeddings<T: Real>(k: &PinholeIntrinsics, pixels: &[Pixel], cfg: &FourierConfig) -> TokenSet<T> {
    TokenSet {
        coords: pixels.to_vec(),
        features: position_embeddings(k, pixels, cfg, EmbeddingMode::Rays),
    }
}

/// Multi-scale feature grid at 1/4 input resolution, `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap<T> {
    pub features: Tensor<T>,
}

impl<T: Real> ImageFeatureMap<T> {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn cell(&self, x: usize, y: usize) -> &[T] {
        let c = self.channels();
        let i = (y * self.width() + x) * c;
        &self.features.data()[i..i + c]
    }
}

/// The four bilinear taps `(flat cell index, weight)` for a continuous
/// position on a `w × h` grid with cell centers at integers, edge-clamped.
pub fn bilinear_taps(w: usize, h: usize, p: Pixel) -> [(usize, f64); 4] {
    let (x0, x1, tx) = lerp_index(p.u, w);
    let (y0, y1, ty) = lerp_index(p.v, h);
    [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ]
}

pub fn bilinear_sample<T: Real>(fm: &ImageFeatureMap<T>, p: Pixel) -> Vec<T> {
    let c = fm.channels();
    let mut out = vec![T::zero(); c];
    for (idx, wt) in bilinear_taps(fm.width(), fm.height(), p) {
        let row = &fm.features.data()[idx * c..(idx + 1) * c];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += T::of(wt) * v;
        }
    }
    out
}

/// Sparse row table for sampling `pixels` from a `w × h` grid.
pub(crate) fn bilinear_table<T: Real>(w: usize, h: usize, pixels: &[Pixel]) -> (Vec<usize>, Vec<usize>, Vec<T>) {
    let mut offsets = Vec::with_capacity(pixels.len() + 1);
    let mut index = Vec::with_capacity(pixels.len() * 4);
    let mut weight = Vec::with_capacity(pixels.len() * 4);
    offsets.push(0);
    for &p in pixels {
        for (i, wt) in bilinear_taps(w, h, p) {
            if wt != 0.0 {
                index.push(i);
                weight.push(T::of(wt));
            }
        }
        offsets.push(index.len());
    }
    (offsets, index, weight)
}

/// Channel widths of the convolutional image encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the stride-2 stem (1/2 resolution).
    pub stem_channels: usize,
    /// Widths of the 1/4, 1/8 and 1/16 stages.
    pub stage_channels: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [8, 16, 32],
        }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("encoder", "channel widths must be positive"));
        }
        Ok(())
    }

    /// Registers `encoder.*` conv kernels (He-normal) and zero biases.
    pub fn init_params<T: Real>(&self, reg: &mut ParameterRegistry<T>, rng: &mut RngStream) -> Result<()> {
        let widths = self.layer_widths();
        for (i, (cin, cout)) in widths.iter().enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            reg.register(format!("encoder.conv{i}.w"), Tensor::randn(&[3, 3, *cin, *cout], std, rng))?;
            reg.register(format!("encoder.conv{i}.b"), Tensor::zeros(&[*cout]))?;
        }
        Ok(())
    }

    fn layer_widths(&self) -> [(usize, usize); 4] {
        let [c1, c2, c3] = self.stage_channels;
        [(3, self.stem_channels), (self.stem_channels, c1), (c1, c2), (c2, c3)]
    }
}

/// Sparse bilinear upsampling table from a `(sw, sh)` grid onto `(dw, dh)`
/// with aligned grid centers.
fn upsample_table<T: Real>(sw: usize, sh: usize, dw: usize, dh: usize) -> (Vec<usize>, Vec<usize>, Vec<T>) {
    let (rx, ry) = (sw as f64 / dw as f64, sh as f64 / dh as f64);
    let pixels: Vec<Pixel> = (0..dh)
        .flat_map(|y| (0..dw).map(move |x| Pixel::new((x as f64 + 0.5) * rx - 0.5, (y as f64 + 0.5) * ry - 0.5)))
        .collect();
    bilinear_table(sw, sh, &pixels)
}

/// Runs the conv pyramid on `graph`: stride-2 stem, then stride-2 stages at
/// 1/4, 1/8 and 1/16 resolution. The coarser maps are bilinearly upsampled to
/// 1/4 and concatenated with it. Returns `[h4 · w4, C]` plus `(w4, h4)`.
pub fn encode_image_on<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    image: &Image,
) -> Result<(Var, usize, usize)> {
    cfg.validate()?;
    if image.width() < 8 || image.height() < 8 {
        return Err(Error::domain(format!(
            "image must be at least 8x8, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let input = Tensor::new(
        vec![image.height(), image.width(), 3],
        image.data().iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let mut x = g.constant(input);
    let mut stages = Vec::with_capacity(3);
    for i in 0..4 {
        let w = p.get(&format!("encoder.conv{i}.w"))?;
        let b = p.get(&format!("encoder.conv{i}.b"))?;
        let y = g.conv2d(x, w, 2, 1)?;
        let y = g.add(y, b)?;
        x = g.gelu(y);
        if i > 0 {
            let s = g.shape(x);
            stages.push((x, s[1], s[0], s[2]));
        }
    }
    let (_, w4, h4, _) = stages[0];
    let mut parts = Vec::with_capacity(3);
    for &(v, w, h, c) in &stages {
        let flat = g.reshape(v, &[h * w, c])?;
        if (w, h) == (w4, h4) {
            parts.push(flat);
        } else {
            let (off, idx, wt) = upsample_table::<T>(w, h, w4, h4);
            parts.push(g.sparse_rows(flat, off, idx, wt)?);
        }
    }
    Ok((g.concat(&parts)?, w4, h4))
}

/// Evaluates the image encoder outside of training.
pub fn image_encoder<T: Real>(image: &Image, params: &ParameterRegistry<T>, cfg: &EncoderConfig) -> Result<ImageFeatureMap<T>> {
    let mut g = Graph::new(false);
    let p = params.bind(&mut g);
    let (v, w4, h4) = encode_image_on(&mut g, &p, cfg, image)?;
    let c = g.shape(v)[1];
    Ok(ImageFeatureMap {
        features: g.value(v).clone().reshaped(vec![h4, w4, c])?,
    })
}

/// Intrinsics of the 1/4-resolution feature grid.
pub fn feature_intrinsics(k: &PinholeIntrinsics, w4: usize, h4: usize) -> PinholeIntrinsics {
    rescale_intrinsics(k, w4 as f64 / k.width as f64, h4 as f64 / k.height as f64)
}

/// Encoder tokens on `graph`: bilinear image features at `pixels` (feature
/// grid coordinates) concatenated with position embeddings under `k4`.
pub fn encoder_tokens_on<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    w4: usize,
    h4: usize,
    k4: &PinholeIntrinsics,
    pixels: &[Pixel],
    cfg: &FourierConfig,
    mode: EmbeddingMode,
) -> Result<Var> {
    let (off, idx, wt) = bilinear_table::<T>(w4, h4, pixels);
    let sampled = g.sparse_rows(features, off, idx, wt)?;
    let geo = g.constant(position_embeddings(k4, pixels, cfg, mode));
    Ok(g.concat(&[sampled, geo])?)
}

/// Concatenates sampled image features and ray embeddings per pixel.
pub fn build_encoder_tokens<T: Real>(
    fm: &ImageFeatureMap<T>,
    k4: &PinholeIntrinsics,
    pixels: &[Pixel],
    cfg: &FourierConfig,
) -> Result<TokenSet<T>> {
    if fm.width() != k4.width || fm.height() != k4.height {
        return Err(Error::Schema(format!(
            "feature map {}x{} does not match intrinsics {}x{}",
            fm.width(),
            fm.height(),
            k4.width,
            k4.height
        )));
    }
    let c = fm.channels();
    let geo = position_embeddings::<T>(k4, pixels, cfg, EmbeddingMode::Rays);
    let dim = c + cfg.dim();
    let mut data = Vec::with_capacity(pixels.len() * dim);
    for (i, &p) in pixels.iter().enumerate() {
        data.extend(bilinear_sample(fm, p));
        data.extend_from_slice(&geo.data()[i * cfg.dim()..(i + 1) * cfg.dim()]);
    }
    Ok(TokenSet {
        coords: pixels.to_vec(),
        features: Tensor::new(vec![pixels.len(), dim], data)?,
    })
}

/// Integer pixel grid `w × h` in row-major order.
pub fn pixel_grid(w: usize, h: usize) -> Vec<Pixel> {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| Pixel::new(x as f64, y as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_dimension() {
        assert_eq!(FourierConfig::default().dim(), 51);
        let e = fourier_encode([0.0, 0.6, 0.8], &FourierConfig::default()).unwrap();
        assert_eq!(e.len(), 51);
    }

    #[test]
    fn zero_bands_is_raw_direction() {
        let cfg = FourierConfig {
            bands: 0,
            max_resolution: 64.0,
        };
        let d = [0.6, 0.0, 0.8];
        assert_eq!(fourier_encode(d, &cfg).unwrap(), d.to_vec());
    }

    #[test]
    fn single_band_layout() {
        let cfg = FourierConfig {
            bands: 2,
            max_resolution: 4.0,
        };
        let e = fourier_encode([0.0, 0.0, 1.0], &cfg).unwrap();
        let want = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{e:?}");
        }
    }

    #[test]
    fn frequencies_span_one_to_half_mu() {
        let f = FourierConfig::default().frequencies();
        assert_eq!(f.len(), 8);
        assert_eq!(f[0], 1.0);
        assert!((f[7] - 32.0).abs() < 1e-12);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(fourier_encode([0.0, 0.0, 1.1], &FourierConfig::default()).is_err());
        assert!(FourierConfig { bands: 3, max_resolution: 64.0 }.validate().is_err());
        assert!(FourierConfig { bands: 4, max_resolution: 1.0 }.validate().is_err());
    }

    #[test]
    fn geometric_embedding_counts() {
        let k = PinholeIntrinsics::new(50.0, 50.0, 3.5, 2.5, 8, 6).unwrap();
        let cfg = FourierConfig::default();
        let empty = geometric_embeddings::<f64>(&k, &[], &cfg);
        assert!(empty.is_empty());
        let grid = pixel_grid(8, 6);
        let all = geometric_embeddings::<f64>(&k, &grid, &cfg);
        assert_eq!(all.len(), 48);
        assert_eq!(all.coords[9], Pixel::new(1.0, 1.0));
        let single = geometric_embeddings::<f64>(&k, &[Pixel::new(1.0, 1.0)], &cfg);
        assert_eq!(single.row(0), all.row(9));
    }

    #[test]
    fn mirrored_pixels_flip_odd_entries_only() {
        let k = PinholeIntrinsics::new(80.0, 80.0, 32.0, 24.0, 64, 48).unwrap();
        let cfg = FourierConfig::default();
        let a = geometric_embeddings::<f64>(&k, &[Pixel::new(40.0, 30.0)], &cfg);
        let b = geometric_embeddings::<f64>(&k, &[Pixel::new(24.0, 18.0)], &cfg);
        let block = cfg.bands + 1;
        let half = cfg.bands / 2;
        for comp in 0..3 {
            for j in 0..block {
                let (x, y) = (a.row(0)[comp * block + j], b.row(0)[comp * block + j]);
                // raw and sine entries are odd in the component, cosines even;
                // z is shared by both rays.
                let odd = comp < 2 && j <= half;
                let want = if odd { -y } else { y };
                assert!((x - want).abs() < 1e-12, "comp {comp} entry {j}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn bilinear_exact_at_centers_and_midpoints() {
        let features = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64 * 1.5 - 2.0);
        let fm = ImageFeatureMap { features };
        assert_eq!(bilinear_sample(&fm, Pixel::new(2.0, 1.0)), fm.cell(2, 1).to_vec());
        let mid = bilinear_sample(&fm, Pixel::new(0.5, 0.0));
        for c in 0..2 {
            assert!((mid[c] - 0.5 * (fm.cell(0, 0)[c] + fm.cell(1, 0)[c])).abs() < 1e-12);
        }
        let flat = ImageFeatureMap {
            features: Tensor::<f64>::full(&[3, 3, 4], 0.7),
        };
        for p in [Pixel::new(0.3, 1.7), Pixel::new(-3.0, 9.0)] {
            assert!(bilinear_sample(&flat, p).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn encoder_output_shape_and_linearity() {
        let cfg = EncoderConfig {
            stem_channels: 8,
            stage_channels: [8, 16, 32],
        };
        let mut reg = ParameterRegistry::<f64>::new();
        cfg.init_params(&mut reg, &mut RngStream::new(0)).unwrap();
        let img = Image::filled(32, 32, [0.0, 0.0, 0.0]);
        let fm = image_encoder(&img, &reg, &cfg).unwrap();
        assert_eq!(fm.features.shape(), &[8, 8, 56]);
        assert!(fm.features.data().iter().all(|&v| v == 0.0));

        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert_eq!(image_encoder(&img, &reg, &cfg).unwrap(), image_encoder(&img, &reg, &cfg).unwrap());
        assert!(image_encoder(&Image::filled(7, 32, [0.5; 3]), &reg, &cfg).is_err());
    }

    #[test]
    fn encoder_tokens_concatenate() {
        let cfg = EncoderConfig {
            stem_channels: 8,
            stage_channels: [8, 16, 32],
        };
        let mut reg = ParameterRegistry::<f64>::new();
        cfg.init_params(&mut reg, &mut RngStream::new(1)).unwrap();
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 11) as f32 / 11.0).collect()).unwrap();
        let fm = image_encoder(&img, &reg, &cfg).unwrap();
        let k = PinholeIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let k4 = feature_intrinsics(&k, 8, 8);
        let fourier = FourierConfig::default();
        let grid = pixel_grid(8, 8);
        let tokens = build_encoder_tokens(&fm, &k4, &grid, &fourier).unwrap();
        assert_eq!(tokens.dim(), 56 + 51);
        assert_eq!(tokens.len(), 64);
        assert_eq!(&tokens.row(10)[..56], fm.cell(2, 1));
        assert!(build_encoder_tokens(&fm, &k4, &[], &fourier).unwrap().is_empty());
    }
}
