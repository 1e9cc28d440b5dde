//! Standard depth benchmark metrics, median scaling, the Garg crop,
//! uncertainty filtering curves and intrinsics-noise sweeps.

use diffcore::RngStream;
use serde::{Deserialize, Serialize};

use crate::augment::perturb_intrinsics;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::network::{Model, UncertaintyMap};
use crate::synthdata::RenderedSample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    #[default]
    None,
    Garg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub min_depth: f64,
    pub max_depth: f64,
    pub crop: Crop,
    pub median_scale: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 80.0,
            crop: Crop::None,
            median_scale: false,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth >= 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::config(
                "protocol.min_depth",
                format!("need 0 <= min_depth < max_depth, got ({}, {})", self.min_depth, self.max_depth),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid: usize,
    pub median_scaled: bool,
    pub scale: f64,
}

pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,valid,median_scaled,scale";

/// Shortest display of `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float");
    rounded.to_string()
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            sig6(self.abs_rel),
            sig6(self.sq_rel),
            sig6(self.rmse),
            sig6(self.rmse_log),
            sig6(self.delta1),
            sig6(self.delta2),
            sig6(self.delta3),
            self.valid,
            self.median_scaled,
            sig6(self.scale)
        )
    }

    /// Unweighted mean of per-image reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::domain("no reports to average"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            valid: reports.iter().map(|r| r.valid).sum(),
            median_scaled: reports.iter().all(|r| r.median_scaled),
            scale: avg(|r| r.scale),
        })
    }
}

/// Keeps rows `[⌊0.40810811·H⌋, ⌊0.99189189·H⌋)` and columns
/// `[⌊0.03594771·W⌋, ⌊0.96405229·W⌋)`.
pub fn garg_crop(h: usize, w: usize) -> Vec<bool> {
    let (r0, r1) = ((0.40810811 * h as f64) as usize, (0.99189189 * h as f64) as usize);
    let (c0, c1) = ((0.03594771 * w as f64) as usize, (0.96405229 * w as f64) as usize);
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (r0..r1).contains(&y) && (c0..c1).contains(&x)))
        .collect()
}

pub fn crop_mask(crop: Crop, h: usize, w: usize) -> Vec<bool> {
    match crop {
        Crop::None => vec![true; h * w],
        Crop::Garg => garg_crop(h, w),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Multiplies `pred` by `median(gt) / median(pred)` over `mask ∧ gt valid`.
pub fn median_scale(pred: &[f64], gt: &DepthMap, mask: &[bool]) -> Result<(Vec<f64>, f64)> {
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i] && gt.mask()[i]).collect();
    if idx.is_empty() {
        return Err(Error::domain("median scaling needs at least one valid pixel"));
    }
    let mp = median(idx.iter().map(|&i| pred[i]).collect());
    let mg = median(idx.iter().map(|&i| gt.values()[i]).collect());
    if !(mp > 0.0) || !(mg > 0.0) {
        return Err(Error::domain(format!("median scaling needs positive medians, got {mp} and {mg}")));
    }
    let factor = mg / mp;
    Ok((pred.iter().map(|p| p * factor).collect(), factor))
}

/// Pixels counted by the protocol: valid ground truth in range and inside
/// the crop.
pub fn eval_mask(gt: &DepthMap, proto: &EvalProtocol) -> Vec<bool> {
    let crop = crop_mask(proto.crop, gt.height(), gt.width());
    gt.values()
        .iter()
        .zip(gt.mask())
        .zip(crop)
        .map(|((&d, &m), c)| m && c && d >= proto.min_depth && d <= proto.max_depth)
        .collect()
}

/// Metrics over the protocol mask intersected with `extra` (if given).
pub fn depth_metrics_masked(pred: &[f64], gt: &DepthMap, proto: &EvalProtocol, extra: Option<&[bool]>) -> Result<MetricReport> {
    if pred.len() != gt.values().len() {
        return Err(Error::domain("prediction and ground truth sizes differ"));
    }
    let mut mask = eval_mask(gt, proto);
    if let Some(e) = extra {
        mask.iter_mut().zip(e).for_each(|(m, &k)| *m &= k);
    }
    let (pred, scale) = if proto.median_scale {
        median_scale(pred, gt, &mask)?
    } else {
        (pred.to_vec(), 1.0)
    };
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut deltas = [0usize; 3];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let d = gt.values()[i];
        let p = pred[i].clamp(proto.min_depth, proto.max_depth);
        let diff = p - d;
        abs_rel += diff.abs() / d;
        sq_rel += diff * diff / d;
        se += diff * diff;
        let ld = p.ln() - d.ln();
        sle += ld * ld;
        let ratio = (p / d).max(d / p);
        for (k, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *t {
                deltas[k] += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("no valid pixels after masking"));
    }
    let nf = n as f64;
    Ok(MetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (sle / nf).sqrt(),
        delta1: deltas[0] as f64 / nf,
        delta2: deltas[1] as f64 / nf,
        delta3: deltas[2] as f64 / nf,
        valid: n,
        median_scaled: proto.median_scale,
        scale,
    })
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, proto: &EvalProtocol) -> Result<MetricReport> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::domain("prediction and ground truth sizes differ"));
    }
    depth_metrics_masked(pred.values(), gt, proto, None)
}

/// For each fraction `q`, metrics over the `⌊q·N⌋` valid pixels with the
/// smallest σ (ties by pixel index).
/// Indices of the `valid` pixels ordered by increasing σ, ties by index.
pub fn confidence_order(std: &[f64], valid: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| std[a].total_cmp(&std[b]).then(a.cmp(&b)));
    order
}

pub fn uncertainty_curve(map: &UncertaintyMap, gt: &DepthMap, proto: &EvalProtocol, fractions: &[f64]) -> Result<Vec<(f64, MetricReport)>> {
    if fractions.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(Error::domain("fractions must lie in (0, 1]"));
    }
    let base = eval_mask(gt, proto);
    let order = confidence_order(&map.std, &base);
    let n = order.len();
    fractions
        .iter()
        .map(|&q| {
            let keep = if q == 1.0 { n } else { ((q * n as f64).floor() as usize).max(1) };
            let mut extra = vec![false; base.len()];
            for &i in &order[..keep.min(n)] {
                extra[i] = true;
            }
            Ok((q, depth_metrics_masked(&map.mean, gt, proto, Some(&extra))?))
        })
        .collect()
}

/// Metric and median-scaled reports at one intrinsics noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelReport {
    pub level: f64,
    pub metric: MetricReport,
    pub scaled: MetricReport,
}

/// Evaluates `model` with each sample's intrinsics perturbed at embedding
/// time only. Sample `i` uses stream `i` of `seed` at every level, so levels
/// share their underlying noise draws.
pub fn intrinsics_noise_sweep(
    model: &Model<f32>,
    samples: &[RenderedSample],
    levels: &[f64],
    proto: &EvalProtocol,
    seed: u64,
    latent_samples: usize,
) -> Result<Vec<NoiseLevelReport>> {
    use rayon::prelude::*;
    if levels.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::domain("noise levels must be non-negative"));
    }
    let metric_proto = EvalProtocol {
        median_scale: false,
        ..*proto
    };
    let scaled_proto = EvalProtocol {
        median_scale: true,
        ..*proto
    };
    levels
        .iter()
        .map(|&level| {
            let per: Vec<Result<(MetricReport, MetricReport)>> = samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = RngStream::derive(seed, i as u64);
                    let k = perturb_intrinsics(&s.intrinsics, level, &mut rng);
                    let map = model.predict_with_uncertainty(&s.image, &k, latent_samples, &mut rng)?;
                    Ok((
                        depth_metrics_masked(&map.mean, &s.depth, &metric_proto, None)?,
                        depth_metrics_masked(&map.mean, &s.depth, &scaled_proto, None)?,
                    ))
                })
                .collect();
            let per = per.into_iter().collect::<Result<Vec<_>>>()?;
            let (m, sc): (Vec<_>, Vec<_>) = per.into_iter().unzip();
            Ok(NoiseLevelReport {
                level,
                metric: MetricReport::mean(&m)?,
                scaled: MetricReport::mean(&sc)?,
            })
        })
        .collect()
}
