//! Desk-scale zero-shot transfer experiment: train on one camera family,
//! evaluate without scaling on a family with different focal lengths and
//! resolution.

use rayon::prelude::*;

use crate::augment::AugmentConfig;
use crate::embeddings::{EmbeddingMode, EncoderConfig, FourierConfig};
use crate::error::Result;
use crate::evalmetrics::{depth_metrics_masked, EvalProtocol, MetricReport};
use crate::losses::LossWeights;
use crate::network::{Model, NetworkConfig};
use crate::synthdata::{generate_samples, CameraFamily, DatasetConfig, RenderedSample, SceneParams, Split};
use crate::trainer::{train, Checkpoint, EpochLog, ScheduleConfig, TrainConfig};
use diffcore::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub train_family: CameraFamily,
    pub test_family: CameraFamily,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub scene: SceneParams,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub protocol: EvalProtocol,
    /// Latent draws averaged per evaluated image.
    pub eval_samples: usize,
    pub data_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train_family: CameraFamily {
                label: "train-A".into(),
                focal: (80.0, 120.0),
                resolutions: vec![(64, 48)],
                principal_jitter: 2.0,
            },
            test_family: CameraFamily {
                label: "test-B".into(),
                focal: (150.0, 200.0),
                resolutions: vec![(96, 64)],
                principal_jitter: 2.0,
            },
            train_samples: 800,
            val_samples: 32,
            test_samples: 32,
            // Sparse, small objects so that most supervised pixels see the
            // ground plane, whose depth along a ray is fixed by the camera.
            scene: SceneParams {
                objects: (0, 2),
                depth_range: (5.0, 20.0),
                sphere_radius: (0.24, 0.72),
                box_half_extent: (0.18, 0.6),
                ..SceneParams::default()
            },
            network: NetworkConfig {
                latents: 32,
                latent_dim: 32,
                heads: 4,
                self_layers: 2,
                mlp_ratio: 2,
                dropout: 0.0,
                d_min: 0.5,
                d_max: 50.0,
                fourier: FourierConfig::default(),
                encoder: EncoderConfig::default(),
                embedding: EmbeddingMode::Rays,
            },
            train: TrainConfig {
                schedule: ScheduleConfig {
                    lr_init: 5e-5,
                    lr_base: 5e-4,
                    warmup_epochs: 1,
                    decay_gamma: 0.8,
                    decay_every: 3,
                    epochs: 10,
                    batch_size: 2,
                    query_stride: 4,
                    weight_decay: 1e-4,
                },
                augment: AugmentConfig {
                    resize_min: 0.75,
                    resize_max: 1.25,
                    size_multiple: 8,
                    dropout_max: 0.3,
                    flip_prob: 0.5,
                    color_jitter: [0.2, 0.2, 0.2, 0.05],
                    ray_jitter: true,
                },
                // A strong prior keeps latent variance alive, so the spread of
                // decoded samples tracks depth error.
                loss: LossWeights {
                    kl: 1.0,
                    ..LossWeights::default()
                },
            },
            protocol: EvalProtocol {
                min_depth: 1e-3,
                max_depth: 40.0,
                ..EvalProtocol::default()
            },
            eval_samples: 1,
            data_seed: 2024,
        }
    }
}

/// Rendered train, same-family validation and cross-family test sets.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub train: Vec<RenderedSample>,
    pub val: Vec<RenderedSample>,
    pub test: Vec<RenderedSample>,
}

pub fn toy_data(cfg: &ToyConfig) -> Result<ToyData> {
    let a = DatasetConfig {
        families: vec![cfg.train_family.clone()],
        samples_per_family: cfg.train_samples + cfg.val_samples,
        val_fraction: cfg.val_samples as f64 / (cfg.train_samples + cfg.val_samples) as f64,
        scene: cfg.scene.clone(),
    };
    let b = DatasetConfig {
        families: vec![cfg.test_family.clone()],
        samples_per_family: cfg.test_samples,
        val_fraction: 0.0,
        scene: cfg.scene.clone(),
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (entry, s) in generate_samples(&a, cfg.data_seed)? {
        match entry.split {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
        }
    }
    let test = generate_samples(&b, cfg.data_seed ^ 0x5eed_b)?.into_iter().map(|(_, s)| s).collect();
    Ok(ToyData { train, val, test })
}

/// Mean metrics of `model` over `samples` using the latent mean (or
/// `latent_samples` draws when > 1).
pub fn evaluate(model: &Model<f32>, samples: &[RenderedSample], proto: &EvalProtocol, latent_samples: usize, seed: u64) -> Result<MetricReport> {
    let reports: Vec<Result<MetricReport>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = RngStream::derive(seed, i as u64);
            let map = model.predict_with(&s.image, &s.intrinsics, latent_samples.max(1), &mut rng, latent_samples == 0)?;
            depth_metrics_masked(&map.mean, &s.depth, proto, None)
        })
        .collect();
    MetricReport::mean(&reports.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub same_family: MetricReport,
    pub cross_family: MetricReport,
}

/// Trains one model with `mode` embeddings and evaluates it unscaled.
pub fn run_toy(cfg: &ToyConfig, data: &ToyData, mode: EmbeddingMode, seed: u64) -> Result<ToyRun> {
    let net = NetworkConfig {
        embedding: mode,
        ..cfg.network.clone()
    };
    let start = Checkpoint {
        model: Model::init(net, seed)?,
        optimizer: None,
        epochs_done: 0,
    };
    let (ckpt, log) = train(start, &data.train, &cfg.train, seed, None)?;
    let proto = EvalProtocol {
        median_scale: false,
        ..cfg.protocol
    };
    let same_family = evaluate(&ckpt.model, &data.val, &proto, cfg.eval_samples, seed)?;
    let cross_family = evaluate(&ckpt.model, &data.test, &proto, cfg.eval_samples, seed)?;
    Ok(ToyRun {
        model: ckpt.model,
        log,
        same_family,
        cross_family,
    })
}
