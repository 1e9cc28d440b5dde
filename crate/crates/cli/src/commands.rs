use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffcore::RngStream;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use raydepth::augment::perturb_intrinsics;
use raydepth::evalmetrics::{
    confidence_order, depth_metrics_masked, eval_mask, uncertainty_curve, Crop, EvalProtocol, MetricReport, CSV_HEADER,
};
use raydepth::formats::{read_pfm, read_ppm, write_pfm, write_pfm_values, write_ply};
use raydepth::geometry::{merge_pointclouds, parse_camera_text, DepthMap, Extrinsics, PinholeIntrinsics, PointCloud};
use raydepth::network::{Model, UncertaintyMap};
use raydepth::synthdata::{make_dataset, Dataset, RenderedSample, Split};
use raydepth::trainer::{checkpoint_path, load_checkpoint, train, Checkpoint};
use raydepth::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct SynthArgs {
    pub out: PathBuf,
    pub samples: Option<usize>,
}

pub fn synth(cfg: &mut RunConfig, args: &SynthArgs) -> Result<()> {
    if let Some(n) = args.samples {
        cfg.dataset.samples_per_family = n;
    }
    cfg.validate()?;
    let ds = make_dataset(&cfg.dataset, cfg.seed, &args.out)?;
    cfg.echo(&args.out)?;
    for label in ds.labels() {
        let count = |split| ds.entries.iter().filter(|e| e.label == label && e.split == split).count();
        println!("{label}: {} train, {} val", count(Split::Train), count(Split::Val));
    }
    println!("{} samples written to {}", ds.entries.len(), args.out.display());
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub family: Option<String>,
}

pub fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let samples = ds.load_where(args.family.as_deref(), Some(Split::Train))?;
    let start = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.config != cfg.network {
                return Err(Error::Schema(format!("{} was trained with a different network config", path.display())));
            }
            ckpt
        }
        None => Checkpoint {
            model: Model::init(cfg.network.clone(), cfg.seed)?,
            optimizer: None,
            epochs_done: 0,
        },
    };
    cfg.echo(&args.out)?;
    let (ckpt, log) = train(start, &samples, &cfg.train(), cfg.seed, Some(&args.out))?;
    for row in &log {
        println!("epoch {} total {:.6} lr {:.3e}", row.epoch, row.total, row.lr);
    }
    println!("checkpoint {}", checkpoint_path(&args.out, ckpt.epochs_done).display());
    Ok(())
}

/// Loads a checkpoint, rejecting it when an explicit config disagrees.
pub fn load_model(path: &Path, cfg: Option<&RunConfig>) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(path)?;
    if let Some(cfg) = cfg {
        if ckpt.model.config != cfg.network {
            return Err(Error::Schema(format!(
                "network config of {} does not match the run config",
                path.display()
            )));
        }
    }
    Ok(ckpt.model)
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: Option<Split>,
}

#[derive(Serialize)]
struct FamilyReport {
    samples: usize,
    metric: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_scaled: Option<MetricReport>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    protocol: &'a EvalProtocol,
    latent_samples: usize,
    intrinsics_noise: f64,
    families: BTreeMap<String, FamilyReport>,
    aggregate: FamilyReport,
}

/// Predicts every sample with its own random stream so results do not
/// depend on thread count.
fn predict_all(model: &Model<f32>, samples: &[RenderedSample], cfg: &RunConfig) -> Result<Vec<UncertaintyMap>> {
    samples
        .par_iter()
        .map(|s| {
            let mut rng = RngStream::derive(cfg.seed, id_stream(&s.id));
            let k = perturb_intrinsics(&s.intrinsics, cfg.eval.intrinsics_noise, &mut rng);
            model.predict_with_uncertainty(&s.image, &k, cfg.eval.samples, &mut rng)
        })
        .collect()
}

/// Stream index from a sample id (FNV-1a), so a sample draws the same noise
/// whichever subset of the dataset a command loads.
fn id_stream(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn eval(model: &Model<f32>, cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let metric_proto = EvalProtocol {
        median_scale: false,
        ..cfg.protocol
    };
    let scaled_proto = EvalProtocol {
        median_scale: true,
        ..cfg.protocol
    };
    let mut families = BTreeMap::new();
    let mut all_metric = Vec::new();
    let mut all_scaled = Vec::new();
    let mut sigma_rows = Vec::new();
    for label in ds.labels() {
        let samples = ds.load_where(Some(&label), args.split)?;
        if samples.is_empty() {
            continue;
        }
        let preds = predict_all(model, &samples, cfg)?;
        let mut metric = Vec::new();
        let mut scaled = Vec::new();
        for (s, p) in samples.iter().zip(&preds) {
            metric.push(depth_metrics_masked(&p.mean, &s.depth, &metric_proto, None)?);
            if cfg.protocol.median_scale {
                scaled.push(depth_metrics_masked(&p.mean, &s.depth, &scaled_proto, None)?);
            }
            let n = p.std.len() as f64;
            let mean_sigma = p.std.iter().sum::<f64>() / n;
            let max_sigma = p.std.iter().copied().fold(0.0, f64::max);
            sigma_rows.push(format!("{},{label},{mean_sigma},{max_sigma}", s.id));
        }
        all_metric.extend_from_slice(&metric);
        all_scaled.extend_from_slice(&scaled);
        families.insert(
            label,
            FamilyReport {
                samples: samples.len(),
                metric: MetricReport::mean(&metric)?,
                median_scaled: (!scaled.is_empty()).then(|| MetricReport::mean(&scaled)).transpose()?,
            },
        );
    }
    if all_metric.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    let report = EvalReport {
        protocol: &cfg.protocol,
        latent_samples: cfg.eval.samples,
        intrinsics_noise: cfg.eval.intrinsics_noise,
        aggregate: FamilyReport {
            samples: all_metric.len(),
            metric: MetricReport::mean(&all_metric)?,
            median_scaled: (!all_scaled.is_empty()).then(|| MetricReport::mean(&all_scaled)).transpose()?,
        },
        families,
    };
    cfg.echo(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(args.out.join("metrics.json"), json + "\n")?;
    let mut csv = format!("family,track,samples,{CSV_HEADER}\n");
    let rows = report.families.iter().map(|(l, r)| (l.as_str(), r)).chain([("all", &report.aggregate)]);
    for (label, r) in rows {
        csv += &format!("{label},metric,{},{}\n", r.samples, r.metric.csv_row());
        if let Some(s) = &r.median_scaled {
            csv += &format!("{label},median_scaled,{},{}\n", r.samples, s.csv_row());
        }
    }
    fs::write(args.out.join("metrics.csv"), csv)?;
    let sigma = format!("id,family,mean_sigma,max_sigma\n{}\n", sigma_rows.join("\n"));
    fs::write(args.out.join("sigma.csv"), sigma)?;
    println!("{}", report.aggregate.metric.csv_row());
    Ok(())
}

/// Reads a camera file; a missing file is reported as such since the model
/// cannot predict metric depth without calibration.
pub fn read_camera(path: &Path) -> Result<(PinholeIntrinsics, Option<Extrinsics>)> {
    let text = fs::read_to_string(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("cannot read intrinsics file {}: {e}", path.display()))
    })?;
    parse_camera_text(&text)
}

pub struct InferArgs {
    pub image: PathBuf,
    pub intrinsics: PathBuf,
    pub out: PathBuf,
}

pub fn infer(model: &Model<f32>, cfg: &RunConfig, args: &InferArgs) -> Result<()> {
    let (k, _) = read_camera(&args.intrinsics)?;
    let image = read_ppm(&args.image)?;
    if image.width() != k.width || image.height() != k.height {
        return Err(Error::Schema(format!(
            "image is {}x{} but intrinsics describe {}x{}",
            image.width(),
            image.height(),
            k.width,
            k.height
        )));
    }
    let mut rng = RngStream::derive(cfg.seed, 0);
    let map = model.predict_with_uncertainty(&image, &k, cfg.eval.samples, &mut rng)?;
    fs::create_dir_all(&args.out)?;
    cfg.echo(&args.out)?;
    write_pfm(&args.out.join("depth.pfm"), &DepthMap::from_values(k.width, k.height, map.mean)?)?;
    write_pfm_values(&args.out.join("sigma.pfm"), k.width, k.height, &map.std)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub struct PointcloudArgs {
    pub depth: Vec<PathBuf>,
    pub intrinsics: Vec<PathBuf>,
    pub image: Vec<PathBuf>,
    pub extrinsics: Vec<PathBuf>,
    pub sigma: Vec<PathBuf>,
    pub filter_fraction: f64,
    pub out: PathBuf,
}

/// Parses twelve numbers: a row-major rotation followed by a translation.
pub fn parse_extrinsics(path: &Path) -> Result<Extrinsics> {
    let text = fs::read_to_string(path)?;
    let mut nums = Vec::new();
    let mut offset = 0;
    for tok in text.split_inclusive(char::is_whitespace) {
        let t = tok.trim();
        if !t.is_empty() {
            nums.push(t.parse::<f64>().map_err(|_| Error::Parse {
                context: path.display().to_string(),
                offset,
                reason: format!("`{t}` is not a number"),
            })?);
        }
        offset += tok.len();
    }
    if nums.len() != 12 {
        return Err(Error::Parse {
            context: path.display().to_string(),
            offset: text.len(),
            reason: format!("expected 12 numbers, found {}", nums.len()),
        });
    }
    Extrinsics::new(Matrix3::from_row_slice(&nums[..9]), Vector3::new(nums[9], nums[10], nums[11]))
}

pub fn pointcloud(args: &PointcloudArgs) -> Result<()> {
    let n = args.depth.len();
    if n == 0 || args.intrinsics.len() != n || args.image.len() != n {
        return Err(Error::Schema(format!(
            "{} depth maps, {} intrinsics files and {} images",
            n,
            args.intrinsics.len(),
            args.image.len()
        )));
    }
    if !args.extrinsics.is_empty() && args.extrinsics.len() != n {
        return Err(Error::Schema(format!("{} extrinsics files for {n} cameras", args.extrinsics.len())));
    }
    if !args.sigma.is_empty() && args.sigma.len() != n {
        return Err(Error::Schema(format!("{} sigma maps for {n} cameras", args.sigma.len())));
    }
    if !(args.filter_fraction > 0.0 && args.filter_fraction <= 1.0) {
        return Err(Error::Config {
            key: "filter_fraction".into(),
            reason: format!("must lie in (0, 1], got {}", args.filter_fraction),
        });
    }
    if args.filter_fraction < 1.0 && args.sigma.is_empty() {
        return Err(Error::Config {
            key: "filter_fraction".into(),
            reason: "filtering needs --sigma maps".into(),
        });
    }
    let mut clouds = Vec::with_capacity(n);
    for i in 0..n {
        let (k, embedded) = read_camera(&args.intrinsics[i])?;
        let depth = read_pfm(&args.depth[i])?;
        let image = read_ppm(&args.image[i])?;
        let keep = match args.sigma.get(i) {
            Some(path) => {
                let sigma = read_pfm(path)?;
                if sigma.width() != depth.width() || sigma.height() != depth.height() {
                    return Err(Error::Schema(format!("{} does not match its depth map", path.display())));
                }
                let order = confidence_order(sigma.values(), depth.mask());
                let count = (args.filter_fraction * order.len() as f64).floor() as usize;
                let mut keep = vec![false; depth.values().len()];
                for &j in &order[..count] {
                    keep[j] = true;
                }
                Some(keep)
            }
            None => None,
        };
        let cloud = PointCloud::from_depth(&depth, &k, &image, keep.as_deref())?;
        let ext = match args.extrinsics.get(i) {
            Some(path) => parse_extrinsics(path)?,
            None => embedded.unwrap_or_else(Extrinsics::identity),
        };
        clouds.push((cloud, ext));
    }
    let merged = merge_pointclouds(&clouds);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_ply(&args.out, &merged)?;
    println!("{} vertices written to {}", merged.len(), args.out.display());
    Ok(())
}

pub struct CurvesArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: Option<Split>,
}

pub fn curves(model: &Model<f32>, cfg: &RunConfig, args: &CurvesArgs) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let samples = ds.load_where(None, args.split)?;
    if samples.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    let mut fractions = cfg.eval.fractions.clone();
    fractions.sort_by(|a, b| b.total_cmp(a));
    fractions.dedup();
    let proto = cfg.protocol;
    let preds = predict_all(model, &samples, cfg)?;
    let mut per_fraction = vec![Vec::new(); fractions.len()];
    for (s, p) in samples.iter().zip(&preds) {
        if !eval_mask(&s.depth, &proto).contains(&true) {
            continue;
        }
        for (slot, (_, r)) in per_fraction.iter_mut().zip(uncertainty_curve(p, &s.depth, &proto, &fractions)?) {
            slot.push(r);
        }
    }
    let mut csv = format!("fraction,{CSV_HEADER}\n");
    for (q, reports) in fractions.iter().zip(&per_fraction) {
        csv += &format!("{q},{}\n", MetricReport::mean(reports)?.csv_row());
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
        cfg.echo(dir)?;
    }
    fs::write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn parse_crop(s: &str) -> std::result::Result<Crop, String> {
    match s {
        "none" => Ok(Crop::None),
        "garg" => Ok(Crop::Garg),
        other => Err(format!("unknown crop `{other}` (expected none or garg)")),
    }
}

pub fn parse_split(s: &str) -> std::result::Result<Option<Split>, String> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "all" => Ok(None),
        other => Err(format!("unknown split `{other}` (expected train, val or all)")),
    }
}
