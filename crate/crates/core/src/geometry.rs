//! Pinhole camera geometry.
//!
//! Camera frame: x right, y down, z forward. Pixel centers sit at integer
//! coordinates. Depth is the camera-frame z of a point, so
//! `unproject(K, p, d) = d · K⁻¹[u, v, 1]ᵀ` always has `z = d`.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_u8, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::domain(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::domain("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain(format!("image size must be at least 1x1, got {}x{}", self.width, self.height)));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹[u, v, 1]ᵀ`; its z component is exactly 1.
    pub fn back_project(&self, p: Pixel) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= -0.5 && p.v >= -0.5 && p.u <= self.width as f64 - 0.5 && p.v <= self.height as f64 - 0.5
    }
}

/// Continuous pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Unit viewing direction in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub direction: Vector3<f64>,
}

pub fn ray_direction(k: &PinholeIntrinsics, p: Pixel) -> Ray {
    Ray {
        direction: k.back_project(p).normalize(),
    }
}

pub fn unproject(k: &PinholeIntrinsics, p: Pixel, depth: f64) -> Result<Point3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {depth}")));
    }
    let r = k.back_project(p);
    Ok(Point3::new(depth * r.x, depth * r.y, depth))
}

pub fn project(k: &PinholeIntrinsics, point: &Point3<f64>) -> Result<Pixel> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok(Pixel::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

/// Intrinsics after resizing the image by `(r_w, r_h)`, keeping every
/// viewing ray fixed under the pixel map `u' = r_w(u − 0.5) + 0.5`.
pub fn rescale_intrinsics(k: &PinholeIntrinsics, r_w: f64, r_h: f64) -> PinholeIntrinsics {
    PinholeIntrinsics {
        fx: r_w * k.fx,
        fy: r_h * k.fy,
        cx: r_w * (k.cx - 0.5) + 0.5,
        cy: r_h * (k.cy - 0.5) + 0.5,
        width: ((r_w * k.width as f64).round() as usize).max(1),
        height: ((r_h * k.height as f64).round() as usize).max(1),
    }
}

/// The pixel coordinate that `p` maps to after a `(r_w, r_h)` resize.
pub fn rescale_pixel(p: Pixel, r_w: f64, r_h: f64) -> Pixel {
    Pixel::new(r_w * (p.u - 0.5) + 0.5, r_h * (p.v - 0.5) + 0.5)
}

/// Dense depth grid (meters) with a validity mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthMap {
    /// Builds a map; non-finite or non-positive values are masked invalid
    /// and stored as 0.
    pub fn from_values(width: usize, height: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::domain(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let mask: Vec<bool> = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::from_values(width, height, values).expect("sized by construction")
    }

    /// Restricts validity to `keep` (intersected with the existing mask).
    pub fn with_mask(mut self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.mask.len() {
            return Err(Error::domain("mask size mismatch"));
        }
        for ((m, v), &k) in self.mask.iter_mut().zip(&mut self.values).zip(keep) {
            *m &= k;
            if !*m {
                *v = 0.0;
            }
        }
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let i = y * self.width + x;
        self.mask[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Values with invalid pixels set to NaN.
    pub fn to_nan_filled(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&d, &m)| if m { d } else { f64::NAN })
            .collect()
    }

    pub fn matches(&self, k: &PinholeIntrinsics) -> bool {
        self.width == k.width && self.height == k.height
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "rotation is not proper orthonormal (|RᵀR − I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// Unit surface normal at integer pixel `(x, y)` from forward differences of
/// unprojected neighbors, `(P[x+1,y] − P[x,y]) × (P[x,y+1] − P[x,y])`.
/// `None` when a neighbor is invalid or the cross product vanishes.
pub fn surface_normal(depth: &DepthMap, k: &PinholeIntrinsics, x: usize, y: usize) -> Option<Vector3<f64>> {
    let at = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.get(x, y)?;
        Some(d * k.back_project(Pixel::new(x as f64, y as f64)))
    };
    let p = at(x, y)?;
    let right = at(x + 1, y)?;
    let down = at(x, y + 1)?;
    normal_from_points(&p, &right, &down)
}

pub(crate) fn normal_from_points(p: &Vector3<f64>, right: &Vector3<f64>, down: &Vector3<f64>) -> Option<Vector3<f64>> {
    let n = (right - p).cross(&(down - p));
    let len = n.norm();
    (len > 0.0 && len.is_finite()).then(|| n / len)
}

/// Colored points in a common frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::Schema(format!(
                "{} points but {} colors",
                points.len(),
                colors.len()
            )));
        }
        Ok(Self { points, colors })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Unprojects the valid pixels of `depth` (restricted to `keep` when
    /// given) in row-major order, colored from `image`.
    pub fn from_depth(depth: &DepthMap, k: &PinholeIntrinsics, image: &Image, keep: Option<&[bool]>) -> Result<Self> {
        let (w, h) = (depth.width(), depth.height());
        if !depth.matches(k) || image.width() != w || image.height() != h {
            return Err(Error::Schema(format!(
                "depth {w}x{h}, intrinsics {}x{}, image {}x{}",
                k.width,
                k.height,
                image.width(),
                image.height()
            )));
        }
        if keep.is_some_and(|m| m.len() != w * h) {
            return Err(Error::Schema("filter mask does not match the depth map".into()));
        }
        let mut out = Self::default();
        for y in 0..h {
            for x in 0..w {
                let Some(d) = depth.get(x, y) else { continue };
                if keep.is_some_and(|m| !m[y * w + x]) {
                    continue;
                }
                out.points.push(unproject(k, Pixel::new(x as f64, y as f64), d)?);
                out.colors.push(image.pixel(x, y).map(to_u8));
            }
        }
        Ok(out)
    }
}

/// Transforms every cloud into the world frame and concatenates them, with
/// no alignment or filtering.
pub fn merge_pointclouds(clouds: &[(PointCloud, Extrinsics)]) -> PointCloud {
    let mut out = PointCloud::default();
    for (cloud, ext) in clouds {
        out.points.extend(cloud.points.iter().map(|p| ext.apply(p)));
        out.colors.extend_from_slice(&cloud.colors);
    }
    out
}

/// Parses the camera text format:
///
/// ```text
/// fx fy
/// cx cy
/// width height
/// r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz   (optional)
/// ```
pub fn parse_camera_text(text: &str) -> Result<(PinholeIntrinsics, Option<Extrinsics>)> {
    let lines: Vec<(usize, &str)> = {
        let mut offset = 0;
        let mut v = Vec::new();
        for line in text.split_inclusive('\n') {
            if !line.trim().is_empty() {
                v.push((offset, line.trim()));
            }
            offset += line.len();
        }
        v
    };
    let nums = |idx: usize, n: usize| -> Result<Vec<f64>> {
        let Some(&(offset, line)) = lines.get(idx) else {
            return Err(Error::parse("camera", text.len(), format!("missing line {}", idx + 1)));
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("camera", offset, format!("line {}: {e}", idx + 1)))?;
        if vals.len() != n {
            return Err(Error::parse(
                "camera",
                offset,
                format!("line {} needs {n} numbers, got {}", idx + 1, vals.len()),
            ));
        }
        Ok(vals)
    };
    let f = nums(0, 2)?;
    let c = nums(1, 2)?;
    let size = nums(2, 2)?;
    if size.iter().any(|s| s.fract() != 0.0 || *s < 1.0) {
        return Err(Error::parse("camera", lines[2].0, "width and height must be positive integers"));
    }
    let k = PinholeIntrinsics::new(f[0], f[1], c[0], c[1], size[0] as usize, size[1] as usize)?;
    let ext = if lines.len() > 3 {
        let e = nums(3, 12)?;
        Some(Extrinsics::new(
            Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]),
            Vector3::new(e[9], e[10], e[11]),
        )?)
    } else {
        None
    };
    if lines.len() > 4 {
        return Err(Error::parse("camera", lines[4].0, "unexpected trailing line"));
    }
    Ok((k, ext))
}

/// Inverse of [`parse_camera_text`]; values use shortest round-trip formatting.
pub fn format_camera_text(k: &PinholeIntrinsics, ext: Option<&Extrinsics>) -> String {
    let mut s = format!("{} {}\n{} {}\n{} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    if let Some(e) = ext {
        let r = &e.rotation;
        let vals: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
            .chain(e.translation.iter().copied())
            .map(|v| v.to_string())
            .collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}
