//! Depth, surface-normal and KL objectives, both as plain `f64` reference
//! implementations and as differentiable graph builders for training.

use diffcore::{Graph, Real, Tensor, Var};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{surface_normal, DepthMap, PinholeIntrinsics};
use crate::network::ConditionedLatent;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub normal: f64,
    pub kl: f64,
    /// Smooth-L1 threshold in meters.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            normal: 0.2,
            kl: 0.1,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal >= 0.0) {
            return Err(Error::config("loss.normal", "must be non-negative"));
        }
        if !(self.kl >= 0.0) {
            return Err(Error::config("loss.kl", "must be non-negative"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("loss.beta", "must be positive"));
        }
        Ok(())
    }
}

pub fn smooth_l1_scalar(delta: f64, beta: f64) -> f64 {
    let a = delta.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean smooth-L1 over pixels valid in `gt`; `pred` is row-major over the
/// same grid.
pub fn smooth_l1(pred: &[f64], gt: &DepthMap, beta: f64) -> Result<f64> {
    if pred.len() != gt.values().len() {
        return Err(Error::domain("prediction and ground truth sizes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &d), &m) in pred.iter().zip(gt.values()).zip(gt.mask()) {
        if m {
            sum += smooth_l1_scalar(p - d, beta);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::domain("no valid ground-truth pixels"));
    }
    Ok(sum / n as f64)
}

/// Normal loss value and the number of pixels it averaged over. A count of
/// zero means no pixel had both normals and the value is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalLoss {
    pub value: f64,
    pub pixels: usize,
}

/// `(1/2N) Σ (1 − cos(n̂, n))` over pixels where both forward-difference
/// normals are defined.
pub fn normal_loss(pred: &DepthMap, gt: &DepthMap, k: &PinholeIntrinsics) -> Result<NormalLoss> {
    if pred.width() != gt.width() || pred.height() != gt.height() || !gt.matches(k) {
        return Err(Error::domain("depth maps and intrinsics must share a size"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if let (Some(a), Some(b)) = (surface_normal(pred, k, x, y), surface_normal(gt, k, x, y)) {
                sum += 1.0 - a.dot(&b);
                n += 1;
            }
        }
    }
    Ok(NormalLoss {
        value: if n == 0 { 0.0 } else { sum / (2.0 * n as f64) },
        pixels: n,
    })
}

/// `−(1/2N) Σ (1 + s − μ² − eˢ)` over all latent entries.
pub fn kl_loss<T: Real>(c: &ConditionedLatent<T>) -> f64 {
    let n = c.mu.numel().max(1) as f64;
    let sum: f64 = c
        .mu
        .data()
        .iter()
        .zip(c.log_var.data())
        .map(|(&m, &s)| {
            let (m, s) = (m.to_f64_lossless(), s.to_f64_lossless());
            1.0 + s - m * m - s.exp()
        })
        .sum();
    -0.5 * sum / n
}

pub fn total_loss(l_depth: f64, l_normal: f64, l_kl: f64, w: &LossWeights) -> f64 {
    l_depth + w.normal * l_normal + w.kl * l_kl
}

/// Mean smooth-L1 between `pred [n, 1]` and constant targets.
pub fn smooth_l1_on<T: Real>(g: &mut Graph<T>, pred: Var, target: &[T], beta: f64) -> Result<Var> {
    let t = g.constant(Tensor::new(vec![target.len(), 1], target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let l = g.smooth_l1(diff, T::of(beta));
    Ok(g.mean(l))
}

/// `−½ mean(1 + s − μ² − eˢ)`.
pub fn kl_on<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.square(mu)?;
    let es = g.exp(log_var);
    let a = g.sub(log_var, mu2)?;
    let a = g.sub(a, es)?;
    let a = g.offset(a, T::one());
    let m = g.mean(a);
    Ok(g.scale(m, T::of(-0.5)))
}

/// Forward-difference triangles on a regular query grid: for each entry,
/// the query indices of the point, its right neighbor and its lower
/// neighbor, and the unit ground-truth normal there.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalStencil {
    pub center: Vec<usize>,
    pub right: Vec<usize>,
    pub down: Vec<usize>,
    pub gt_normals: Vec<Vector3<f64>>,
}

impl NormalStencil {
    /// Builds the stencil on a `cols × rows` grid of queries whose
    /// unprojection rays (z = 1) are `rays` and ground-truth depths `gt`.
    pub fn build(cols: usize, rows: usize, rays: &[Vector3<f64>], gt: &[Option<f64>]) -> Self {
        let mut s = Self::default();
        for r in 0..rows.saturating_sub(1) {
            for c in 0..cols.saturating_sub(1) {
                let (i, ir, id) = (r * cols + c, r * cols + c + 1, (r + 1) * cols + c);
                let (Some(d), Some(dr), Some(dd)) = (gt[i], gt[ir], gt[id]) else {
                    continue;
                };
                let n = (dr * rays[ir] - d * rays[i]).cross(&(dd * rays[id] - d * rays[i]));
                let len = n.norm();
                if len > 0.0 && len.is_finite() {
                    s.center.push(i);
                    s.right.push(ir);
                    s.down.push(id);
                    s.gt_normals.push(n / len);
                }
            }
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

/// Differentiable normal loss for depths `pred [q, 1]` at queries with
/// unprojection `rays`. Returns None when the stencil is empty.
pub fn normal_loss_on<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    rays: &[Vector3<f64>],
    stencil: &NormalStencil,
) -> Result<Option<Var>> {
    if stencil.is_empty() {
        return Ok(None);
    }
    let rows = Tensor::from_fn(&[rays.len(), 3], |i| T::of(rays[i / 3][i % 3]));
    let rays_v = g.constant(rows);
    let d3 = g.concat(&[pred, pred, pred])?;
    let points = g.mul(d3, rays_v)?;
    let p = g.gather_rows(points, &stencil.center)?;
    let pr = g.gather_rows(points, &stencil.right)?;
    let pd = g.gather_rows(points, &stencil.down)?;
    let a = g.sub(pr, p)?;
    let b = g.sub(pd, p)?;
    let comp = |g: &mut Graph<T>, v: Var, i: usize| g.slice_last(v, i, i + 1);
    let (ax, ay, az) = (comp(g, a, 0)?, comp(g, a, 1)?, comp(g, a, 2)?);
    let (bx, by, bz) = (comp(g, b, 0)?, comp(g, b, 1)?, comp(g, b, 2)?);
    let cross = |g: &mut Graph<T>, p: Var, q: Var, r: Var, s: Var| -> Result<Var> {
        let l = g.mul(p, q)?;
        let rr = g.mul(r, s)?;
        Ok(g.sub(l, rr)?)
    };
    let nx = cross(g, ay, bz, az, by)?;
    let ny = cross(g, az, bx, ax, bz)?;
    let nz = cross(g, ax, by, ay, bx)?;
    let n = g.concat(&[nx, ny, nz])?;
    let m = stencil.gt_normals.len();
    let gt = g.constant(Tensor::from_fn(&[m, 3], |i| T::of(stencil.gt_normals[i / 3][i % 3])));
    let ones = g.constant(Tensor::full(&[3, 1], T::one()));
    let dot = g.mul(n, gt)?;
    let dot = g.matmul(dot, ones)?;
    let sq = g.square(n)?;
    let norm2 = g.matmul(sq, ones)?;
    let norm = g.sqrt(norm2);
    let cos = g.div(dot, norm)?;
    let one_minus = g.neg(cos);
    let one_minus = g.offset(one_minus, T::one());
    let mean = g.mean(one_minus);
    Ok(Some(g.scale(mean, T::of(0.5))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_examples() {
        let gt = DepthMap::from_values(1, 1, vec![3.0]).unwrap();
        assert_eq!(smooth_l1(&[3.0], &gt, 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[4.0], &gt, 1.0).unwrap(), 0.5);
        assert_eq!(smooth_l1(&[5.0], &gt, 1.0).unwrap(), 1.5);
        let empty = DepthMap::from_values(1, 1, vec![f64::NAN]).unwrap();
        assert!(smooth_l1(&[1.0], &empty, 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let c = |m: f64, s: f64| ConditionedLatent {
            mu: Tensor::full(&[1, 1], m),
            log_var: Tensor::full(&[1, 1], s),
        };
        assert_eq!(kl_loss(&c(0.0, 0.0)), 0.0);
        assert_eq!(kl_loss(&c(1.0, 0.0)), 0.5);
        assert!((kl_loss(&c(0.0, 4f64.ln())) - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.3).abs() < 1e-15);
        let zero = LossWeights {
            normal: 0.0,
            kl: 0.0,
            beta: 1.0,
        };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &zero), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn normal_loss_identical_and_offset() {
        let k = PinholeIntrinsics::new(40.0, 40.0, 8.0, 6.0, 16, 12).unwrap();
        let gt = DepthMap::from_fn(16, 12, |x, y| 3.0 + 0.1 * x as f64 + 0.05 * (y * y) as f64);
        let l = normal_loss(&gt, &gt, &k).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert_eq!(l.pixels, 15 * 11);
        let flat = DepthMap::from_fn(16, 12, |_, _| 4.0);
        let shifted = DepthMap::from_fn(16, 12, |_, _| 9.0);
        assert!(normal_loss(&shifted, &flat, &k).unwrap().value.abs() < 1e-12);
        let sky = DepthMap::from_fn(16, 12, |_, _| f64::NAN);
        assert_eq!(normal_loss(&gt, &sky, &k).unwrap().pixels, 0);
    }
}
