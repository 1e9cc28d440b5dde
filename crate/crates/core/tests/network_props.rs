mod common;

use diffcore::{Graph, RngStream, Tensor};
use raydepth::embeddings::pixel_grid;
use raydepth::geometry::PinholeIntrinsics;
use raydepth::network::{sample_latent, sample_latent_on, ConditionedLatent, LatentDraw, Model};

fn tiny_f32(seed: u64) -> Model<f32> {
    Model::init(common::tiny_network(), seed).unwrap()
}

#[test]
fn conditioning_is_invariant_to_token_order() {
    let model = tiny_f32(1);
    let dim = model.config.token_dim();
    let mut rng = RngStream::new(5);
    let tokens = Tensor::<f32>::randn(&[7, dim], 1.0, &mut rng);
    let order = [3usize, 0, 6, 2, 5, 1, 4];
    let mut permuted = Vec::with_capacity(7 * dim);
    for &i in &order {
        permuted.extend_from_slice(&tokens.data()[i * dim..(i + 1) * dim]);
    }
    let permuted = Tensor::new(vec![7, dim], permuted).unwrap();
    let a = model.encode_condition(&tokens).unwrap();
    let b = model.encode_condition(&permuted).unwrap();
    for (x, y) in a.mu.data().iter().chain(a.log_var.data()).zip(b.mu.data().iter().chain(b.log_var.data())) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn each_query_decodes_independently_of_the_others() {
    let model = tiny_f32(2);
    let k = PinholeIntrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
    let z = Tensor::<f32>::randn(&[4, 8], 1.0, &mut RngStream::new(3));
    let all = model.query_features(&k, &pixel_grid(16, 12));
    let batched = model.decode_depth(&z, &all, 4096).unwrap();
    let single = model.decode_depth(&z, &all, 1).unwrap();
    let sparse = model.decode_depth(&z, &all, 7).unwrap();
    for i in 0..batched.len() {
        assert!((batched[i] - single[i]).abs() < 1e-5);
        assert!((batched[i] - sparse[i]).abs() < 1e-5);
        assert!(batched[i] > model.config.d_min as f32 && batched[i] < model.config.d_max as f32);
    }
}

#[test]
fn latent_samples_average_to_the_mean() {
    let mut rng = RngStream::new(11);
    let mu = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let log_var = Tensor::<f64>::from_fn(&[4, 8], |i| -1.0 + 0.05 * i as f64);
    let c = ConditionedLatent { mu: mu.clone(), log_var: log_var.clone() };
    let n = 20_000;
    let mut sum = vec![0.0; 32];
    for _ in 0..n {
        for (s, v) in sum.iter_mut().zip(sample_latent(&c, &mut rng).data()) {
            *s += v;
        }
    }
    for i in 0..32 {
        let sigma = (0.5 * log_var.data()[i]).exp();
        let err = (sum[i] / n as f64 - mu.data()[i]).abs();
        assert!(err < 5.0 * sigma / (n as f64).sqrt(), "coordinate {i}: {err}");
    }
}

#[test]
fn reparameterized_sample_passes_unit_gradient_to_the_mean() {
    let mut rng = RngStream::new(4);
    let mut g = Graph::<f64>::new(true);
    let mu = g.input(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let s = g.input(Tensor::randn(&[4, 8], 0.5, &mut rng));
    let eps = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let z = sample_latent_on(&mut g, mu, s, &LatentDraw::Noise(eps.clone())).unwrap();
    let total = g.sum(z);
    let grads = g.backward(total).unwrap();
    assert!(grads.get(&g, mu).unwrap().data().iter().all(|&v| v == 1.0));
    let sv = g.value(s).clone();
    for ((gs, s), e) in grads.get(&g, s).unwrap().data().iter().zip(sv.data()).zip(eps.data()) {
        assert!((gs - 0.5 * (0.5 * s).exp() * e).abs() < 1e-12);
    }
}

#[test]
fn zero_sigma_prediction_has_no_spread() {
    let model = tiny_f32(6);
    let s = common::plane_sample(1);
    let map = model.predict_with(&s.image, &s.intrinsics, 3, &mut RngStream::new(1), true).unwrap();
    assert!(map.std.iter().all(|&v| v == 0.0));
    let sampled = model.predict_with_uncertainty(&s.image, &s.intrinsics, 3, &mut RngStream::new(1)).unwrap();
    assert!(sampled.std.iter().any(|&v| v > 0.0));
}
