//! RGB images with values in [0, 1], channel-interleaved, row-major.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::domain(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest of the 256 8-bit levels.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
        self
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Bilinear resize to `new_w × new_h`, sampling source pixel
    /// `(u' − 0.5)/r + 0.5` for target pixel `u'` (the same map applied to
    /// intrinsics by [`crate::geometry::rescale_intrinsics`]). Edges clamp.
    pub fn resized(&self, new_w: usize, new_h: usize) -> Self {
        let rw = new_w as f64 / self.width as f64;
        let rh = new_h as f64 / self.height as f64;
        let mut out = Vec::with_capacity(new_w * new_h * 3);
        for y in 0..new_h {
            let sv = (y as f64 - 0.5) / rh + 0.5;
            let (y0, y1, ty) = lerp_index(sv, self.height);
            for x in 0..new_w {
                let su = (x as f64 - 0.5) / rw + 0.5;
                let (x0, x1, tx) = lerp_index(su, self.width);
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c] as f64;
                    let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                    let bot = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                    out.push((top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        Self {
            width: new_w,
            height: new_h,
            data: out,
        }
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Neighbor indices and interpolation weight along one axis, clamped to
/// `[0, n − 1]`.
pub(crate) fn lerp_index(s: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = s.clamp(0.0, max);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::new(3, 2, (0..18).map(|v| v as f32 / 17.0).collect()).unwrap();
        assert_eq!(img.resized(3, 2), img);
    }

    #[test]
    fn flip_is_involution() {
        let img = Image::new(4, 3, (0..36).map(|v| v as f32 / 35.0).collect()).unwrap();
        assert_ne!(img.flipped_horizontally(), img);
        assert_eq!(img.flipped_horizontally().flipped_horizontally(), img);
    }

    #[test]
    fn quantized_roundtrips_through_bytes() {
        let img = Image::new(2, 1, vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.333]).unwrap().quantized();
        let back = Image::from_rgb8(2, 1, &img.to_rgb8()).unwrap();
        assert_eq!(back, img);
    }
}
