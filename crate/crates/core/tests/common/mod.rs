//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use diffcore::{compare_gradients, BoundParams, GradComparison, DiffError, Graph, ParameterRegistry, RngStream, Tensor, Var};
use raydepth::augment::AugmentConfig;
use raydepth::embeddings::{EmbeddingMode, EncoderConfig, FourierConfig};
use raydepth::geometry::{DepthMap, PinholeIntrinsics};
use raydepth::image::Image;
use raydepth::losses::LossWeights;
use raydepth::network::{Model, NetworkConfig};
use raydepth::synthdata::RenderedSample;
use raydepth::trainer::{forward_train, BatchDraw, ScheduleConfig, TrainConfig};
use raydepth::Error;

/// Smallest network that still exercises every block.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        latents: 4,
        latent_dim: 8,
        heads: 2,
        self_layers: 1,
        mlp_ratio: 2,
        dropout: 0.0,
        d_min: 0.5,
        d_max: 10.0,
        fourier: FourierConfig {
            bands: 2,
            max_resolution: 8.0,
        },
        encoder: EncoderConfig {
            stem_channels: 2,
            stage_channels: [2, 2, 2],
        },
        embedding: EmbeddingMode::Rays,
    }
}

/// 8×8 sample of a tilted plane with a textured image; every pixel valid.
pub fn plane_sample(seed: u64) -> RenderedSample {
    let mut rng = RngStream::new(seed);
    let k = PinholeIntrinsics::new(7.0, 7.5, 3.6, 3.4, 8, 8).unwrap();
    let (a, b, c) = (rng.uniform(-0.04, 0.04), rng.uniform(0.02, 0.06), rng.uniform(3.0, 5.0));
    let depth = DepthMap::from_fn(8, 8, |x, y| c + a * x as f64 + b * y as f64);
    let data = (0..8 * 8 * 3).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    RenderedSample {
        id: format!("plane{seed}"),
        image: Image::new(8, 8, data).unwrap(),
        depth,
        intrinsics: k,
        extrinsics: None,
        dense: true,
    }
}

/// Training recipe for the tiny model: 4 encoder tokens (before dropout) and
/// a 2×2 strided query grid.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        schedule: ScheduleConfig {
            query_stride: 4,
            batch_size: 2,
            epochs: 2,
            ..ScheduleConfig::default()
        },
        augment: AugmentConfig {
            resize_min: 1.0,
            resize_max: 1.0,
            size_multiple: 8,
            dropout_max: 0.3,
            flip_prob: 0.5,
            color_jitter: [0.2, 0.2, 0.2, 0.05],
            ray_jitter: true,
        },
        loss: LossWeights::default(),
    }
}

fn diff_err(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => panic!("unexpected error in differentiable path: {other}"),
    }
}

/// Analytic vs finite-difference gradients of the full training loss
/// (augmentation, encoder, conditioning, reparameterized sample, decoder,
/// depth + normal + KL terms) with respect to every parameter, at f64.
pub fn full_loss_gradients(seed: u64) -> GradComparison {
    let cfg = tiny_network();
    let train = tiny_train_config();
    let model = Model::<f64>::init(cfg.clone(), seed).unwrap();
    let sample = plane_sample(seed);
    let batch = BatchDraw {
        resize: (1.0, 1.0),
        phase: (0.3, 0.6),
    };
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let f = |g: &mut Graph<f64>, xs: &[Var]| -> Result<Var, DiffError> {
        let p = BoundParams::from_pairs(names.iter().cloned().zip(xs.iter().copied()));
        let mut rng = RngStream::derive(seed, 7);
        let out = forward_train(g, &p, &cfg, &train, &sample, &batch, &mut rng).map_err(diff_err)?;
        assert!(out.l_depth.is_some() && out.l_normal.is_some(), "all loss terms present");
        Ok(out.total)
    };
    compare_gradients(f, &inputs, 1e-5).unwrap()
}

/// Registry of the tiny model's parameters, for building graphs in tests.
pub fn tiny_model(seed: u64) -> Model<f64> {
    Model::init(tiny_network(), seed).unwrap()
}

pub fn registry_len<T: diffcore::Real>(reg: &ParameterRegistry<T>) -> usize {
    reg.iter().map(|(_, t)| t.numel()).sum()
}
