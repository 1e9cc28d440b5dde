//! Optimization: AdamW, warmup/step-decay schedule, strided query
//! sampling, the per-sample training forward pass, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use diffcore::{checkpoint, BoundParams, Graph, ParameterRegistry, Real, RngStream, Tensor, Var};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_color, horizontal_flip, ray_jitter, resize_encoder_view, sample_dropout_keep, AugmentConfig, ColorFactors};
use crate::embeddings::{encode_image_on, encoder_tokens_on, feature_intrinsics, pixel_grid};
use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::losses::{kl_on, normal_loss_on, smooth_l1_on, LossWeights, NormalStencil};
use crate::network::{decode_on, encode_condition_on, sample_latent_on, standard_normal, LatentDraw, Model, NetworkConfig};
use crate::synthdata::RenderedSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_init: f64,
    pub lr_base: f64,
    pub warmup_epochs: usize,
    pub decay_gamma: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub query_stride: usize,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-5,
            lr_base: 1e-4,
            warmup_epochs: 1,
            decay_gamma: 0.8,
            decay_every: 5,
            epochs: 10,
            batch_size: 4,
            query_stride: 8,
            weight_decay: 1e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::config("schedule.lr_init", "must be positive"));
        }
        if !(self.lr_base > 0.0) {
            return Err(Error::config("schedule.lr_base", "must be positive"));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::config("schedule.decay_gamma", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("schedule.decay_every", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if self.query_stride == 0 {
            return Err(Error::config("schedule.query_stride", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("schedule.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `steps_per_epoch` within `epoch`: linear
/// warmup from `lr_init` to `lr_base`, then one factor of γ per
/// `decay_every` epochs.
pub fn lr_at(epoch: usize, step: usize, steps_per_epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let total = (cfg.warmup_epochs * steps_per_epoch.max(1)) as f64;
        let done = (epoch * steps_per_epoch.max(1) + step) as f64;
        return cfg.lr_init + (cfg.lr_base - cfg.lr_init) * done / total;
    }
    let decays = (epoch - cfg.warmup_epochs) / cfg.decay_every;
    cfg.lr_base * cfg.decay_gamma.powi(decays as i32)
}

/// AdamW moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParameterRegistry<T>, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One decoupled-weight-decay Adam update. A non-finite gradient aborts
    /// the step before anything is modified.
    pub fn step(&mut self, params: &mut ParameterRegistry<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Aborted(format!("non-finite gradient for `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Schema(format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *w *= decay;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = mi.to_f64_lossless() / bc1;
                let vhat = vi.to_f64_lossless() / bc2;
                *w -= T::of(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// A regular `cols × rows` query grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StridedQueries {
    pub pixels: Vec<Pixel>,
    pub cols: usize,
    pub rows: usize,
}

fn phase_range(n: usize, stride: usize) -> (usize, usize) {
    let count = n.div_ceil(stride);
    (count, stride.min(n - (count - 1) * stride))
}

/// Grid with spacing `stride` at a phase drawn from `phase ∈ [0, 1)²`.
pub fn strided_grid(h: usize, w: usize, stride: usize, phase: (f64, f64)) -> StridedQueries {
    let (cols, rx) = phase_range(w, stride);
    let (rows, ry) = phase_range(h, stride);
    let ox = ((phase.0 * rx as f64) as usize).min(rx - 1);
    let oy = ((phase.1 * ry as f64) as usize).min(ry - 1);
    let pixels = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| Pixel::new((ox + c * stride) as f64, (oy + r * stride) as f64)))
        .collect();
    StridedQueries { pixels, cols, rows }
}

/// `ceil(H/s)·ceil(W/s)` in-bounds queries at a random phase.
pub fn strided_queries(h: usize, w: usize, stride: usize, rng: &mut RngStream) -> StridedQueries {
    let phase = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
    strided_grid(h, w, stride.max(1), phase)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Random choices shared by every sample of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchDraw {
    pub resize: (f64, f64),
    pub phase: (f64, f64),
}

impl BatchDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut RngStream) -> Self {
        Self {
            resize: (
                rng.uniform(cfg.resize_min, cfg.resize_max),
                rng.uniform(cfg.resize_min, cfg.resize_max),
            ),
            phase: (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)),
        }
    }
}

/// Graph nodes produced by one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub queries: StridedQueries,
    pub depth: Var,
    pub mu: Var,
    pub log_var: Var,
    pub l_depth: Option<Var>,
    pub l_normal: Option<Var>,
    pub l_kl: Var,
    pub total: Var,
}

/// Augment, encode, condition, sample once, decode at strided queries and
/// assemble the weighted loss.
pub fn forward_train<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    sample: &RenderedSample,
    batch: &BatchDraw,
    rng: &mut RngStream,
) -> Result<TrainForward> {
    let aug = &cfg.augment;
    let sample = horizontal_flip(sample, rng, aug.flip_prob);
    let mut view = resize_encoder_view(&sample, batch.resize.0, batch.resize.1, aug.size_multiple);
    if aug.color_jitter != [0.0; 4] {
        view.image = apply_color(&view.image, ColorFactors::sample(aug.color_jitter, rng));
    }

    let (features, w4, h4) = encode_image_on(g, p, &net.encoder, &view.image)?;
    let k4 = feature_intrinsics(&view.intrinsics, w4, h4);
    let grid = pixel_grid(w4, h4);
    let keep = sample_dropout_keep(grid.len(), aug.dropout_max, rng);
    let mut token_px: Vec<Pixel> = keep.iter().map(|&i| grid[i]).collect();
    if aug.ray_jitter {
        token_px = ray_jitter(&token_px, rng);
    }
    let tokens = encoder_tokens_on(g, features, w4, h4, &k4, &token_px, &net.fourier, net.embedding)?;
    let (mu, log_var) = encode_condition_on(g, p, net, tokens, rng)?;
    let eps = standard_normal(&[net.latents, net.latent_dim], rng);
    let draw = LatentDraw::Noise(eps);
    let z = sample_latent_on(g, mu, log_var, &draw)?;

    let k = &sample.intrinsics;
    let queries = strided_grid(k.height, k.width, cfg.schedule.query_stride, batch.phase);
    let qfeat = crate::embeddings::position_embeddings(k, &queries.pixels, &net.fourier, net.embedding);
    let qv = g.constant(qfeat);
    let (_, depth) = decode_on(g, p, net, z, qv)?;

    let gt: Vec<Option<f64>> = queries
        .pixels
        .iter()
        .map(|q| sample.depth.get(q.u as usize, q.v as usize))
        .collect();
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].is_some()).collect();
    let l_depth = if valid.is_empty() {
        log::warn!("sample {}: no valid ground truth at the query grid", sample.id);
        None
    } else {
        let pv = g.gather_rows(depth, &valid)?;
        let target: Vec<T> = valid.iter().map(|&i| T::of(gt[i].expect("valid"))).collect();
        Some(smooth_l1_on(g, pv, &target, cfg.loss.beta)?)
    };
    let l_normal = if sample.dense && cfg.loss.normal > 0.0 {
        let rays: Vec<Vector3<f64>> = queries.pixels.iter().map(|&q| k.back_project(q)).collect();
        let stencil = NormalStencil::build(queries.cols, queries.rows, &rays, &gt);
        normal_loss_on(g, depth, &rays, &stencil)?
    } else {
        None
    };
    let l_kl = kl_on(g, mu, log_var)?;
    let mut total = g.scale(l_kl, T::of(cfg.loss.kl));
    if let Some(ld) = l_depth {
        total = g.add(total, ld)?;
    }
    if let Some(ln) = l_normal {
        let w = g.scale(ln, T::of(cfg.loss.normal));
        total = g.add(total, w)?;
    }
    Ok(TrainForward {
        queries,
        depth,
        mu,
        log_var,
        l_depth,
        l_normal,
        l_kl,
        total,
    })
}

/// One row of the per-epoch loss log (means over the epoch's samples).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_depth: f64,
    pub l_normal: f64,
    pub l_kl: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,L_D,L_N,L_K,total,lr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.l_depth, self.l_normal, self.l_kl, self.total, self.lr
        )
    }
}

/// Model, optimizer and progress persisted between runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    network: NetworkConfig,
    epochs_done: usize,
    optimizer_step: Option<u64>,
    weight_decay: Option<f64>,
}

const MOMENT1: &str = "@adam.m/";
const MOMENT2: &str = "@adam.v/";

/// Sidecar path holding the network config for a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut reg = ckpt.model.params.clone();
    if let Some(opt) = &ckpt.optimizer {
        for (k, v) in &opt.m {
            reg.register(format!("{MOMENT1}{k}"), v.clone())?;
        }
        for (k, v) in &opt.v {
            reg.register(format!("{MOMENT2}{k}"), v.clone())?;
        }
    }
    checkpoint::save(&reg, path)?;
    let meta = CheckpointMeta {
        network: ckpt.model.config.clone(),
        epochs_done: ckpt.epochs_done,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        weight_decay: ckpt.optimizer.as_ref().map(|o| o.weight_decay),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let meta_path = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", meta_path.display())))?;
    meta.network.validate()?;
    let all: ParameterRegistry<f32> = checkpoint::load(path)?;
    let mut params = ParameterRegistry::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (k, t) in all.iter() {
        if let Some(name) = k.strip_prefix(MOMENT1) {
            m.insert(name.to_string(), t.clone());
        } else if let Some(name) = k.strip_prefix(MOMENT2) {
            v.insert(name.to_string(), t.clone());
        } else {
            params.register(k.clone(), t.clone())?;
        }
    }
    let model = Model::from_parts(meta.network, params)?;
    let optimizer = meta.optimizer_step.map(|step| OptimizerState {
        m,
        v,
        step,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: meta.weight_decay.unwrap_or(0.0),
    });
    Ok(Checkpoint {
        model,
        optimizer,
        epochs_done: meta.epochs_done,
    })
}

/// Where `train` writes checkpoints and the loss log.
pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("ckpt_{epochs_done:03}.ckpt"))
}

fn stream(epoch: usize, index: u64) -> u64 {
    ((epoch as u64) << 32) | index
}

struct SampleResult {
    grads: BTreeMap<String, Tensor<f32>>,
    l_depth: f64,
    l_normal: f64,
    l_kl: f64,
    total: f64,
}

fn run_sample(model: &Model<f32>, cfg: &TrainConfig, sample: &RenderedSample, batch: &BatchDraw, mut rng: RngStream) -> Result<SampleResult> {
    let mut g = Graph::new(true);
    let p = model.params.bind(&mut g);
    let out = forward_train(&mut g, &p, &model.config, cfg, sample, batch, &mut rng)?;
    let val = |v: Option<Var>| v.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
    let result = SampleResult {
        l_depth: val(out.l_depth),
        l_normal: val(out.l_normal),
        l_kl: val(Some(out.l_kl)),
        total: val(Some(out.total)),
        grads: BTreeMap::new(),
    };
    if !result.total.is_finite() {
        return Ok(result);
    }
    let grads = g.backward(out.total)?;
    Ok(SampleResult {
        grads: g.param_grads(&grads),
        ..result
    })
}

/// Trains `start` for `cfg.schedule.epochs` total epochs on `data`.
///
/// With `out_dir`, a checkpoint is written before the first epoch and after
/// each epoch, and log rows are appended to `loss.csv`. A non-finite loss
/// aborts with the epoch, batch, sample id and seed.
pub fn train(start: Checkpoint, data: &[RenderedSample], cfg: &TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let Checkpoint {
        mut model,
        optimizer,
        epochs_done,
    } = start;
    let mut opt = optimizer.unwrap_or_else(|| OptimizerState::new(&model.params, cfg.schedule.weight_decay));
    let log_path = out_dir.map(|d| d.join("loss.csv"));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let log = log_path.as_ref().expect("set with dir");
        if !log.exists() {
            fs::write(log, format!("{LOG_HEADER}\n"))?;
        }
        if epochs_done == 0 {
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.clone()),
                epochs_done: 0,
            };
            save_checkpoint(&checkpoint_path(dir, 0), &ckpt)?;
        }
    }
    let bs = cfg.schedule.batch_size;
    let steps = data.len().div_ceil(bs);
    let mut logs = Vec::new();
    for epoch in epochs_done..cfg.schedule.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut RngStream::derive(seed, stream(epoch, u32::MAX as u64)));
        let mut sums = [0.0f64; 4];
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let draw = BatchDraw::sample(&cfg.augment, &mut RngStream::derive(seed, stream(epoch, (1 << 31) | b as u64)));
            let results: Vec<Result<SampleResult>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let rng = RngStream::derive(seed, stream(epoch, (b * bs + j) as u64));
                    run_sample(&model, cfg, &data[i], &draw, rng)
                })
                .collect();
            let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (j, r) in results.into_iter().enumerate() {
                let r = r?;
                if !r.total.is_finite() {
                    let msg = format!(
                        "non-finite loss {} at epoch {epoch}, batch {b}, sample `{}` (index {}), seed {seed}",
                        r.total, data[chunk[j]].id, chunk[j]
                    );
                    if let Some(dir) = out_dir {
                        fs::write(dir.join("abort.txt"), format!("{msg}\n"))?;
                    }
                    return Err(Error::Aborted(msg));
                }
                sums[0] += r.l_depth;
                sums[1] += r.l_normal;
                sums[2] += r.l_kl;
                sums[3] += r.total;
                for (k, gr) in r.grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, y)| *x += *y),
                        None => {
                            acc.insert(k, gr);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f32;
            for g in acc.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            lr = lr_at(epoch, b, steps, &cfg.schedule);
            opt.step(&mut model.params, &acc, lr)?;
        }
        let n = data.len() as f64;
        let row = EpochLog {
            epoch,
            l_depth: sums[0] / n,
            l_normal: sums[1] / n,
            l_kl: sums[2] / n,
            total: sums[3] / n,
            lr,
        };
        log::info!("{}", row.csv_row());
        if let Some(dir) = out_dir {
            let mut f = OpenOptions::new().append(true).open(log_path.as_ref().expect("set with dir"))?;
            writeln!(f, "{}", row.csv_row())?;
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.clone()),
                epochs_done: epoch + 1,
            };
            save_checkpoint(&checkpoint_path(dir, epoch + 1), &ckpt)?;
        }
        logs.push(row);
    }
    let epochs_done = cfg.schedule.epochs.max(epochs_done);
    Ok((
        Checkpoint {
            model,
            optimizer: Some(opt),
            epochs_done,
        },
        logs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = ScheduleConfig::default();
        assert_eq!(lr_at(0, 0, 10, &cfg), 1e-5);
        assert_eq!(lr_at(1, 0, 10, &cfg), 1e-4);
        assert!((lr_at(1 + cfg.decay_every, 0, 10, &cfg) - 8e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 1..40 {
            let lr = lr_at(e, 0, 10, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_examples() {
        let mut reg = ParameterRegistry::<f64>::new();
        reg.register("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = OptimizerState::new(&reg, 0.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut reg, &grads, 0.1).unwrap();
        assert!((reg.get("w").unwrap().item() + 0.1).abs() < 1e-8);

        let mut reg = ParameterRegistry::<f64>::new();
        reg.register("w", Tensor::scalar(2.0)).unwrap();
        let mut opt = OptimizerState::new(&reg, 1e-4);
        let zero = BTreeMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..3 {
            opt.step(&mut reg, &zero, 0.5).unwrap();
        }
        assert!((reg.get("w").unwrap().item() - 2.0 * (1.0 - 0.5e-4f64).powi(3)).abs() < 1e-15);

        let before = reg.clone();
        let mut opt = OptimizerState::new(&reg, 0.0);
        opt.step(&mut reg, &zero, 0.1).unwrap();
        assert_eq!(reg, before);
        let nan = BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]);
        assert!(matches!(opt.step(&mut reg, &nan, 0.1), Err(Error::Aborted(_))));
        assert_eq!(reg, before);
    }

    #[test]
    fn strided_counts() {
        let mut rng = RngStream::new(0);
        let q = strided_queries(64, 64, 8, &mut rng);
        assert_eq!(q.pixels.len(), 64);
        assert_eq!(strided_queries(5, 7, 1, &mut rng).pixels.len(), 35);
        assert_eq!(strided_queries(64, 96, 8, &mut rng).pixels.len(), 96);
        for _ in 0..50 {
            let q = strided_queries(13, 30, 4, &mut rng);
            assert_eq!(q.pixels.len(), 4 * 8);
            assert!(q.pixels.iter().all(|p| p.u < 30.0 && p.v < 13.0));
        }
    }
}
