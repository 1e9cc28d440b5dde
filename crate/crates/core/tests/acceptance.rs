//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting it.
//!
//! The toy training experiments (criteria 6 to 8) share one set of runs:
//! three seeds, each training a ray-embedding and a pixel-coordinate model.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use diffcore::gradcheck::op_cases;
use diffcore::{grad_check, RngStream, Tensor};
use raydepth::embeddings::EmbeddingMode;
use raydepth::evalmetrics::{depth_metrics, intrinsics_noise_sweep, uncertainty_curve, EvalProtocol, MetricReport};
use raydepth::experiment::{evaluate, run_toy, toy_data, ToyConfig, ToyData, ToyRun};
use raydepth::formats::{encode_pfm, encode_ply};
use raydepth::geometry::{
    project, ray_direction, rescale_intrinsics, rescale_pixel, unproject, DepthMap, Pixel, PinholeIntrinsics, PointCloud,
};
use raydepth::losses::{kl_loss, normal_loss, smooth_l1_scalar};
use raydepth::network::{ConditionedLatent, Model};
use raydepth::synthdata::{generate_scene, render_with_ids, CameraFamily, SceneParams};
use raydepth::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let mut worst_op = (0.0f64, "");
    for case in op_cases() {
        for seed in 0..20 {
            let mut rng = RngStream::derive(1000, seed);
            let inputs = case.sample_inputs(&mut rng);
            let err = grad_check(case.f, &inputs, 1e-5).unwrap();
            if err > worst_op.0 {
                worst_op = (err, case.name);
            }
        }
    }
    let mut worst_full = 0.0f64;
    let mut worst_full_elem = 0.0f64;
    for seed in 0..20 {
        let cmp = common::full_loss_gradients(seed);
        worst_full = worst_full.max(cmp.tensorwise());
        worst_full_elem = worst_full_elem.max(cmp.elementwise());
    }
    let elapsed = t.elapsed();
    let pass = worst_op.0 < 1e-5 && worst_full < 1e-5 && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        pass,
        format!(
            "{} ops x 20 seeds worst elementwise {:.2e} ({}); full loss x 20 seeds worst per-tensor {:.2e} \
             (elementwise incl. sub-noise components {:.2e}); {:.1?}",
            op_cases().len(),
            worst_op.0,
            worst_op.1,
            worst_full,
            worst_full_elem,
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_geometry_suite() {
    let t = Instant::now();
    let mut rng = RngStream::new(2);
    let mut worst_ray = 0.0f64;
    let mut worst_trip = 0.0f64;
    for _ in 0..10_000 {
        let (w, h) = (rng.uniform(16.0, 2000.0) as usize, rng.uniform(16.0, 1500.0) as usize);
        let k = PinholeIntrinsics::new(
            rng.uniform(20.0, 3000.0),
            rng.uniform(20.0, 3000.0),
            rng.uniform(0.0, w as f64),
            rng.uniform(0.0, h as f64),
            w,
            h,
        )
        .unwrap();
        let (rw, rh) = (rng.uniform(0.25, 2.0), rng.uniform(0.25, 2.0));
        let p = Pixel::new(rng.uniform(-0.5, w as f64 - 0.5), rng.uniform(-0.5, h as f64 - 0.5));
        let a = ray_direction(&k, p).direction;
        let b = ray_direction(&rescale_intrinsics(&k, rw, rh), rescale_pixel(p, rw, rh)).direction;
        worst_ray = worst_ray.max((a - b).norm());
        let d = rng.uniform(0.1, 100.0);
        let q = project(&k, &unproject(&k, p, d).unwrap()).unwrap();
        worst_trip = worst_trip.max((q.u - p.u).abs().max((q.v - p.v).abs()));
    }
    let elapsed = t.elapsed();
    let pass = worst_ray < 1e-9 && worst_trip < 1e-9 && elapsed < Duration::from_secs(10);
    report(
        2,
        "geometry suite",
        pass,
        format!("10^4 triples: ray drift {worst_ray:.2e}, round trip {worst_trip:.2e} px; {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_loss_oracles() {
    let mut knee = 0.0f64;
    for beta in [0.05, 0.5, 1.0, 3.0] {
        let h = 1e-12;
        knee = knee.max((smooth_l1_scalar(beta - h, beta) - smooth_l1_scalar(beta + h, beta)).abs());
        knee = knee.max((smooth_l1_scalar(beta, beta) - 0.5 * beta).abs());
    }
    let latent = |mu: f64, s: f64| ConditionedLatent {
        mu: Tensor::<f64>::full(&[4, 6], mu),
        log_var: Tensor::full(&[4, 6], s),
    };
    let kl_zero = kl_loss(&latent(0.0, 0.0)).abs();
    let kl_half = (kl_loss(&latent(1.0, 0.0)) - 0.5).abs();
    let k = PinholeIntrinsics::new(50.0, 52.0, 15.5, 11.5, 32, 24).unwrap();
    let depth = DepthMap::from_fn(32, 24, |x, y| 4.0 + 0.05 * x as f64 + 0.1 * y as f64 + 0.01 * (x * y) as f64);
    let nl = normal_loss(&depth, &depth, &k).unwrap();
    let pass = knee < 1e-9 && kl_zero < 1e-12 && kl_half < 1e-12 && nl.value.abs() < 1e-12 && nl.pixels > 0;
    report(
        3,
        "loss oracles",
        pass,
        format!(
            "smooth-L1 knee gap {knee:.1e}; KL at N(0,1) {kl_zero:.1e}; KL(mu=1,s=0) - 0.5 = {kl_half:.1e}; \
             normal loss on identical maps {:.1e} over {} px",
            nl.value, nl.pixels
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = RngStream::new(4);
    let proto = EvalProtocol::default();
    let scaled = EvalProtocol {
        median_scale: true,
        ..proto
    };
    let mut oracle = 0.0f64;
    let mut invariance = 0.0f64;
    for _ in 0..200 {
        let gt = DepthMap::from_fn(20, 15, |_, _| rng.uniform(1.0, 30.0));
        let c = rng.uniform(0.5, 2.0);
        let pred = DepthMap::from_fn(20, 15, |x, y| c * gt.get(x, y).unwrap());
        let r = depth_metrics(&pred, &gt, &proto).unwrap();
        oracle = oracle.max((r.abs_rel - (c - 1.0).abs()).abs()).max((r.rmse_log - c.ln().abs()).abs());

        let noisy = DepthMap::from_fn(20, 15, |_, _| rng.uniform(1.0, 30.0));
        let s = rng.uniform(0.1, 10.0);
        let scaled_pred = DepthMap::from_fn(20, 15, |x, y| s * noisy.get(x, y).unwrap());
        let a = depth_metrics(&noisy, &gt, &scaled).unwrap();
        let b = depth_metrics(&scaled_pred, &gt, &scaled).unwrap();
        for (x, y) in [
            (a.abs_rel, b.abs_rel),
            (a.sq_rel, b.sq_rel),
            (a.rmse, b.rmse),
            (a.rmse_log, b.rmse_log),
            (a.delta1, b.delta1),
            (a.delta2, b.delta2),
            (a.delta3, b.delta3),
        ] {
            invariance = invariance.max((x - y).abs());
        }
    }
    let pass = oracle < 1e-12 && invariance < 1e-9;
    report(
        4,
        "metric oracles",
        pass,
        format!("pred=c*gt oracle gap {oracle:.1e}; median-scaled invariance gap {invariance:.1e} over 200 cases"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_renderer_consistency() {
    let params = SceneParams::default();
    let family = CameraFamily {
        label: "fuzz".into(),
        focal: (40.0, 160.0),
        resolutions: vec![(64, 48), (48, 64), (80, 40)],
        principal_jitter: 4.0,
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..50 {
        let mut rng = RngStream::derive(5, i);
        let scene = generate_scene(&mut rng, &params);
        let k = family.sample_camera(&mut rng);
        let (sample, ids) = render_with_ids(&scene, &k);
        for y in 0..k.height {
            for x in 0..k.width {
                let Some(d) = sample.depth.get(x, y) else {
                    assert!(ids[y * k.width + x].is_none());
                    continue;
                };
                let id = ids[y * k.width + x].expect("valid depth has a primitive");
                let p = unproject(&k, Pixel::new(x as f64, y as f64), d).unwrap();
                worst = worst.max(scene.primitives[id].shape.surface_distance(&p).abs());
                checked += 1;
            }
        }
    }
    let pass = worst < 1e-6 && checked > 0;
    report(
        5,
        "renderer consistency",
        pass,
        format!("50 scenes, {checked} valid pixels, worst surface distance {worst:.2e} m"),
    );
    assert!(pass);
}

struct SeedRuns {
    rays: ToyRun,
    pixel: ToyRun,
    seconds: [f64; 2],
}

struct Toy {
    cfg: ToyConfig,
    data: ToyData,
    runs: Vec<SeedRuns>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = ToyConfig::default();
        let data = toy_data(&cfg).unwrap();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let rays = run_toy(&cfg, &data, EmbeddingMode::Rays, seed).unwrap();
                let t_rays = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let pixel = run_toy(&cfg, &data, EmbeddingMode::PixelCoords, seed).unwrap();
                let t_pixel = t.elapsed().as_secs_f64();
                SeedRuns {
                    rays,
                    pixel,
                    seconds: [t_rays, t_pixel],
                }
            })
            .collect();
        Toy { cfg, data, runs }
    })
}

#[test]
fn criterion_6_toy_scale_transfer() {
    let toy = toy();
    let same: Vec<f64> = toy.runs.iter().map(|r| r.rays.same_family.abs_rel).collect();
    let cross_rays = median(toy.runs.iter().map(|r| r.rays.cross_family.abs_rel).collect());
    let cross_pixel = median(toy.runs.iter().map(|r| r.pixel.cross_family.abs_rel).collect());
    let improvement = 1.0 - cross_rays / cross_pixel;
    let slowest = toy.runs.iter().flat_map(|r| r.seconds).fold(0.0, f64::max);
    let loss_drop: Vec<f64> = toy
        .runs
        .iter()
        .map(|r| r.rays.log.first().unwrap().total / r.rays.log.last().unwrap().total)
        .collect();
    let pass = same.iter().all(|&a| a < 0.15) && improvement >= 0.2 && slowest <= 1800.0;
    let per_seed: Vec<String> = toy
        .runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.rays.cross_family.abs_rel, r.pixel.cross_family.abs_rel))
        .collect();
    report(
        6,
        "toy zero-shot scale transfer",
        pass,
        format!(
            "same-family AbsRel (rays) {same:.3?}; cross-family median rays {cross_rays:.3} vs pixel {cross_pixel:.3} \
             ({:.0}% better; per seed rays/pixel {}); loss drop {loss_drop:.1?}x; slowest run {slowest:.0}s",
            100.0 * improvement,
            per_seed.join(", ")
        ),
    );
    assert!(pass);
}

fn curve_rmse(model: &Model<f32>, toy: &Toy, seed: u64, fractions: &[f64]) -> Vec<f64> {
    let mut per_fraction = vec![Vec::new(); fractions.len()];
    for (i, s) in toy.data.val.iter().enumerate() {
        let mut rng = RngStream::derive(seed, i as u64);
        let map = model.predict_with_uncertainty(&s.image, &s.intrinsics, 10, &mut rng).unwrap();
        for (slot, (_, r)) in per_fraction
            .iter_mut()
            .zip(uncertainty_curve(&map, &s.depth, &toy.cfg.protocol, fractions).unwrap())
        {
            slot.push(r);
        }
    }
    per_fraction.iter().map(|r| MetricReport::mean(r).unwrap().rmse).collect()
}

#[test]
fn criterion_7_uncertainty_monotonicity() {
    let toy = toy();
    let fractions = [1.0, 0.75, 0.5, 0.25];
    let curves: Vec<Vec<f64>> = toy
        .runs
        .iter()
        .zip(SEEDS)
        .map(|(r, seed)| curve_rmse(&r.rays.model, toy, seed, &fractions))
        .collect();
    let good = curves
        .iter()
        .filter(|c| c[2] <= c[0] && c.windows(2).all(|w| w[1] <= w[0]))
        .count();
    let pass = good == SEEDS.len();
    let shown: Vec<String> = curves
        .iter()
        .map(|c| c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(">"))
        .collect();
    report(
        7,
        "uncertainty monotonicity",
        pass,
        format!("N=10 RMSE at fractions 1/.75/.5/.25: [{}]; monotone in {good}/3 seeds", shown.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_intrinsics_noise_direction() {
    let toy = toy();
    let levels = [0.0, 0.05, 0.1, 0.2];
    let sweeps: Vec<Vec<(f64, f64)>> = toy
        .runs
        .iter()
        .zip(SEEDS)
        .map(|(r, seed)| {
            intrinsics_noise_sweep(&r.rays.model, &toy.data.val, &levels, &toy.cfg.protocol, seed, 1)
                .unwrap()
                .iter()
                .map(|l| (l.metric.abs_rel, l.scaled.abs_rel))
                .collect()
        })
        .collect();
    let med_metric: Vec<f64> = (0..levels.len()).map(|i| median(sweeps.iter().map(|s| s[i].0).collect())).collect();
    let metric_deg = median(sweeps.iter().map(|s| s[3].0 / s[0].0 - 1.0).collect());
    let scaled_deg = median(sweeps.iter().map(|s| s[3].1 / s[0].1 - 1.0).collect());
    let monotone = med_metric.windows(2).all(|w| w[1] >= w[0]);
    let pass = monotone && metric_deg > scaled_deg;
    report(
        8,
        "intrinsics-noise direction",
        pass,
        format!(
            "median metric AbsRel at noise 0/.05/.1/.2: {med_metric:.3?}; relative degradation at 0.2 metric \
             {:.0}% vs median-scaled {:.0}%",
            100.0 * metric_deg,
            100.0 * scaled_deg
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let cfg = common::tiny_train_config();
    let data: Vec<_> = (0..4).map(common::plane_sample).collect();
    let proto = EvalProtocol::default();
    let run = |dir: &std::path::Path| {
        let start = Checkpoint {
            model: Model::init(common::tiny_network(), 9).unwrap(),
            optimizer: None,
            epochs_done: 0,
        };
        let (ckpt, log) = train(start, &data, &cfg, 9, Some(dir)).unwrap();
        let metrics = evaluate(&ckpt.model, &data, &proto, 2, 9).unwrap();
        (ckpt, log, metrics, std::fs::read(dir.join("loss.csv")).unwrap())
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (ck1, log1, m1, csv1) = run(d1.path());
    let (_, log2, m2, csv2) = run(d2.path());
    let logs_equal = log1 == log2 && csv1 == csv2 && m1 == m2;

    let path = d1.path().join("roundtrip.ckpt");
    save_checkpoint(&path, &ck1).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let s = &data[0];
    let forward = |m: &Model<f32>| {
        let mut rng = RngStream::new(3);
        m.predict_with_uncertainty(&s.image, &s.intrinsics, 3, &mut rng).unwrap()
    };
    let (a, b) = (forward(&ck1.model), forward(&back.model));
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let ckpt_exact = back == ck1 && bits(&a.mean) == bits(&b.mean) && bits(&a.std) == bits(&b.std);

    let depth = DepthMap::from_values(s.intrinsics.width, s.intrinsics.height, a.mean.clone()).unwrap();
    let cloud = || PointCloud::from_depth(&depth, &s.intrinsics, &s.image, None).unwrap();
    let pfm_stable = encode_pfm(&depth) == encode_pfm(&DepthMap::from_values(8, 8, b.mean.clone()).unwrap())
        && raydepth::formats::decode_pfm(&encode_pfm(&depth)).map(|d| encode_pfm(&d)).unwrap() == encode_pfm(&depth);
    let ply_stable = encode_ply(&cloud()) == encode_ply(&cloud());

    let pass = logs_equal && ckpt_exact && pfm_stable && ply_stable;
    report(
        9,
        "determinism and persistence",
        pass,
        format!(
            "repeat run logs+metrics identical: {logs_equal}; checkpoint bit-exact: {ckpt_exact}; \
             PFM byte-stable: {pfm_stable}; PLY byte-stable: {ply_stable}"
        ),
    );
    assert!(pass);
}
