//! Procedural ray-cast scenes with dense metric depth, and the on-disk
//! dataset layout `root/{manifest.tsv, samples/NNNNNN.{ppm,pfm,txt}}`.

use std::fs;
use std::path::{Path, PathBuf};

use diffcore::RngStream;
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{quantize_depth, read_pfm, read_ppm, with_path, write_pfm, write_ppm};
use crate::geometry::{format_camera_text, parse_camera_text, ray_direction, DepthMap, Extrinsics, PinholeIntrinsics, Pixel};
use crate::image::Image;

const SKY: [f64; 3] = [0.55, 0.7, 0.92];

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Points with `normal · x + offset = 0`; `normal` is unit length.
    Plane { normal: Vector3<f64>, offset: f64 },
    Sphere { center: Point3<f64>, radius: f64 },
    /// Box rotated by `yaw` radians about the camera y axis.
    Box {
        center: Point3<f64>,
        half_extents: Vector3<f64>,
        yaw: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<ScenePrimitive>,
    /// Unit direction towards the light.
    pub light: Vector3<f64>,
    pub ambient: f64,
    /// Hits with depth beyond this are left invalid.
    pub far: f64,
}

/// Ray hit: distance along the unit ray and the outward surface normal.
#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

fn rot_y(yaw: f64, v: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

impl Shape {
    fn intersect(&self, dir: &Vector3<f64>) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        match self {
            Shape::Plane { normal, offset } => {
                let denom = dir.dot(normal);
                if denom.abs() < EPS {
                    return None;
                }
                let t = -offset / denom;
                (t > EPS).then(|| Hit {
                    t,
                    normal: if denom < 0.0 { *normal } else { -normal },
                })
            }
            Shape::Sphere { center, radius } => {
                let c = center.coords;
                let b = dir.dot(&c);
                let disc = b * b - (c.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if b - sq > EPS { b - sq } else { b + sq };
                (t > EPS).then(|| Hit {
                    t,
                    normal: (dir * t - c) / *radius,
                })
            }
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let o = rot_y(-yaw, &(-center.coords));
                let d = rot_y(-yaw, dir);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a].abs() > half_extents[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-half_extents[a] - o[a]) / d[a];
                    let tb = (half_extents[a] - o[a]) / d[a];
                    let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if lo > t0 {
                        t0 = lo;
                        axis0 = a;
                    }
                    if hi < t1 {
                        t1 = hi;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > EPS { (t0, axis0) } else { (t1, axis1) };
                if t <= EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = (o[axis] + t * d[axis]).signum();
                Some(Hit {
                    t,
                    normal: rot_y(*yaw, &n),
                })
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        match self {
            Shape::Plane { normal, offset } => (normal.dot(&p.coords) + offset).abs(),
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let q = rot_y(-yaw, &(p - center));
                let outside = Vector3::new(
                    (q.x.abs() - half_extents.x).max(0.0),
                    (q.y.abs() - half_extents.y).max(0.0),
                    (q.z.abs() - half_extents.z).max(0.0),
                );
                let inside = (q.x.abs() - half_extents.x)
                    .max(q.y.abs() - half_extents.y)
                    .max(q.z.abs() - half_extents.z)
                    .min(0.0);
                (outside.norm() + inside).abs()
            }
        }
    }

    /// Outward unit normal at a surface point.
    pub fn normal_at(&self, p: &Point3<f64>) -> Vector3<f64> {
        match self {
            Shape::Plane { normal, .. } => *normal,
            Shape::Sphere { center, .. } => (p - center).normalize(),
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let q = rot_y(-yaw, &(p - center));
                let gaps = [
                    half_extents.x - q.x.abs(),
                    half_extents.y - q.y.abs(),
                    half_extents.z - q.z.abs(),
                ];
                let axis = (0..3).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).expect("3 axes");
                let mut n = Vector3::zeros();
                n[axis] = q[axis].signum();
                rot_y(*yaw, &n)
            }
        }
    }
}

/// Training/evaluation triplet: image, dense depth, intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub id: String,
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: PinholeIntrinsics,
    pub extrinsics: Option<Extrinsics>,
    /// Ground truth covers every pixel a surface was hit (enables the
    /// surface-normal loss).
    pub dense: bool,
}

/// Renders `scene` and also returns, per pixel, the index of the primitive
/// that produced the depth (None for sky or beyond the far clip).
pub fn render_with_ids(scene: &SceneSpec, k: &PinholeIntrinsics) -> (RenderedSample, Vec<Option<usize>>) {
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f64::NAN; w * h];
    let mut ids = vec![None; w * h];
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let dir = ray_direction(k, Pixel::new(x as f64, y as f64)).direction;
            let nearest = scene
                .primitives
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.shape.intersect(&dir).map(|hit| (i, hit)))
                .min_by(|a, b| a.1.t.total_cmp(&b.1.t));
            let mut rgb = SKY;
            if let Some((i, hit)) = nearest {
                let z = hit.t * dir.z;
                if z <= scene.far {
                    depth[y * w + x] = z;
                    ids[y * w + x] = Some(i);
                    let shade = scene.ambient + (1.0 - scene.ambient) * hit.normal.dot(&scene.light).max(0.0);
                    let albedo = scene.primitives[i].albedo;
                    rgb = [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade];
                }
            }
            pixels.extend(rgb.iter().map(|&c| c as f32));
        }
    }
    let sample = RenderedSample {
        id: String::new(),
        image: Image::new(w, h, pixels).expect("sized").quantized(),
        depth: DepthMap::from_values(w, h, depth).expect("sized"),
        intrinsics: *k,
        extrinsics: None,
        dense: true,
    };
    (sample, ids)
}

pub fn render(scene: &SceneSpec, k: &PinholeIntrinsics) -> RenderedSample {
    render_with_ids(scene, k).0
}

/// Scene distribution shared by all camera families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Range of object-center depths in meters.
    pub depth_range: (f64, f64),
    pub sphere_radius: (f64, f64),
    pub box_half_extent: (f64, f64),
    /// Height of the camera above the ground plane.
    pub camera_height: f64,
    pub far: f64,
    pub ambient: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            objects: (1, 4),
            depth_range: (3.0, 20.0),
            sphere_radius: (0.4, 1.2),
            box_half_extent: (0.3, 1.0),
            camera_height: 1.5,
            far: 40.0,
            ambient: 0.35,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |key: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi {
                Ok(())
            } else {
                Err(Error::config(key, format!("need 0 < lo <= hi, got ({lo}, {hi})")))
            }
        };
        ordered("scene.depth_range", self.depth_range)?;
        ordered("scene.sphere_radius", self.sphere_radius)?;
        ordered("scene.box_half_extent", self.box_half_extent)?;
        if self.objects.0 > self.objects.1 {
            return Err(Error::config("scene.objects", "min exceeds max"));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::config("scene.camera_height", "must be positive"));
        }
        if !(self.far > self.depth_range.1) {
            return Err(Error::config("scene.far", "must exceed the object depth range"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::config("scene.ambient", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn albedo(rng: &mut RngStream, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

/// Ground plane plus objects resting on it. Objects whose surface would come
/// within 0.5 m of the camera are redrawn.
pub fn generate_scene(rng: &mut RngStream, params: &SceneParams) -> SceneSpec {
    let ground = ScenePrimitive {
        shape: Shape::Plane {
            normal: Vector3::new(0.0, -1.0, 0.0),
            offset: params.camera_height,
        },
        albedo: albedo(rng, 0.35, 0.6),
    };
    let mut primitives = vec![ground];
    let count = params.objects.0 + (rng.uniform(0.0, (params.objects.1 - params.objects.0 + 1) as f64) as usize);
    while primitives.len() < count + 1 {
        let z = rng.uniform(params.depth_range.0, params.depth_range.1);
        let x = rng.uniform(-0.6, 0.6) * z;
        let color = albedo(rng, 0.2, 1.0);
        let (shape, extent) = if rng.uniform(0.0, 1.0) < 0.5 {
            let r = rng.uniform(params.sphere_radius.0, params.sphere_radius.1);
            (
                Shape::Sphere {
                    center: Point3::new(x, params.camera_height - r, z),
                    radius: r,
                },
                r,
            )
        } else {
            let he = Vector3::new(
                rng.uniform(params.box_half_extent.0, params.box_half_extent.1),
                rng.uniform(params.box_half_extent.0, params.box_half_extent.1),
                rng.uniform(params.box_half_extent.0, params.box_half_extent.1),
            );
            let yaw = rng.uniform(0.0, std::f64::consts::PI);
            (
                Shape::Box {
                    center: Point3::new(x, params.camera_height - he.y, z),
                    half_extents: he,
                    yaw,
                },
                he.norm(),
            )
        };
        let center = match &shape {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => *center,
            Shape::Plane { .. } => unreachable!(),
        };
        if center.coords.norm() - extent < 0.5 {
            continue;
        }
        primitives.push(ScenePrimitive { shape, albedo: color });
    }
    let light = Vector3::new(rng.uniform(-0.5, 0.5), -1.0, rng.uniform(-0.8, 0.2)).normalize();
    SceneSpec {
        primitives,
        light,
        ambient: params.ambient,
        far: params.far,
    }
}

/// Cameras of one geometric domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFamily {
    pub label: String,
    /// Focal length range in pixels (`fx = fy`).
    pub focal: (f64, f64),
    /// Candidate `(width, height)` resolutions.
    pub resolutions: Vec<(usize, usize)>,
    /// Maximum principal-point offset from the image center, in pixels.
    #[serde(default)]
    pub principal_jitter: f64,
}

impl CameraFamily {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.focal;
        if !(lo > 0.0) {
            return Err(Error::config(format!("families.{}.focal", self.label), format!("f_lo must be positive, got {lo}")));
        }
        if hi < lo {
            return Err(Error::config(format!("families.{}.focal", self.label), "f_hi below f_lo"));
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&(w, h)| w < 8 || h < 8) {
            return Err(Error::config(
                format!("families.{}.resolutions", self.label),
                "need at least one resolution of 8x8 or larger",
            ));
        }
        if !(self.principal_jitter >= 0.0) {
            return Err(Error::config(format!("families.{}.principal_jitter", self.label), "must be non-negative"));
        }
        Ok(())
    }

    pub fn sample_camera(&self, rng: &mut RngStream) -> PinholeIntrinsics {
        let f = rng.uniform(self.focal.0, self.focal.1);
        let (w, h) = self.resolutions[(rng.uniform(0.0, self.resolutions.len() as f64) as usize).min(self.resolutions.len() - 1)];
        let j = self.principal_jitter;
        let cx = (w as f64 - 1.0) / 2.0 + rng.uniform(-j, j);
        let cy = (h as f64 - 1.0) / 2.0 + rng.uniform(-j, j);
        PinholeIntrinsics::new(f, f, cx, cy, w, h).expect("validated family")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub families: Vec<CameraFamily>,
    pub samples_per_family: usize,
    /// Trailing fraction of each family assigned to the validation split.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub scene: SceneParams,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::config("dataset.families", "at least one family is required"));
        }
        for f in &self.families {
            f.validate()?;
            if f.label.is_empty() || f.label.contains(['\t', '\n']) {
                return Err(Error::config("families.label", "labels must be non-empty without tabs or newlines"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("dataset.val_fraction", "must lie in [0, 1)"));
        }
        self.scene.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub split: Split,
}

const MANIFEST_HEADER: &str = "id\tlabel\tsplit";

/// A dataset directory with its parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.tsv");
        let text = fs::read_to_string(&path)?;
        let ctx = path.display().to_string();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (n, line) in text.split_inclusive('\n').enumerate() {
            let body = line.trim_end_matches('\n');
            if n == 0 {
                if body != MANIFEST_HEADER {
                    return Err(Error::parse(ctx, 0, format!("expected header `{MANIFEST_HEADER}`")));
                }
            } else if !body.is_empty() {
                let fields: Vec<&str> = body.split('\t').collect();
                if fields.len() != 3 {
                    return Err(Error::parse(ctx, offset, format!("expected 3 fields, found {}", fields.len())));
                }
                let split = match fields[2] {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    other => return Err(Error::parse(ctx, offset, format!("unknown split `{other}`"))),
                };
                entries.push(ManifestEntry {
                    id: fields[0].to_string(),
                    label: fields[1].to_string(),
                    split,
                });
            }
            offset += line.len();
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn sample_stem(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join("samples").join(&entry.id)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<RenderedSample> {
        read_sample(&self.sample_stem(entry))
    }

    /// Loads all samples matching `label` (any when None) and `split`.
    pub fn load_where(&self, label: Option<&str>, split: Option<Split>) -> Result<Vec<RenderedSample>> {
        self.entries
            .iter()
            .filter(|e| label.is_none_or(|l| e.label == l) && split.is_none_or(|s| e.split == s))
            .map(|e| self.load(e))
            .collect()
    }

    /// Distinct labels in manifest order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.label) {
                out.push(e.label.clone());
            }
        }
        out
    }
}

/// Renders one sample per (family, index) on per-sample RNG streams.
pub fn generate_samples(cfg: &DatasetConfig, seed: u64) -> Result<Vec<(ManifestEntry, RenderedSample)>> {
    cfg.validate()?;
    let n = cfg.samples_per_family;
    let n_train = n - ((n as f64) * cfg.val_fraction).round() as usize;
    let mut out = Vec::with_capacity(cfg.families.len() * n);
    for (fi, family) in cfg.families.iter().enumerate() {
        for i in 0..n {
            let index = fi * n + i;
            let mut rng = RngStream::derive(seed, index as u64);
            let k = family.sample_camera(&mut rng);
            let scene = generate_scene(&mut rng, &cfg.scene);
            let mut sample = render(&scene, &k);
            sample.depth = quantize_depth(&sample.depth);
            sample.id = format!("{index:06}");
            let entry = ManifestEntry {
                id: sample.id.clone(),
                label: family.label.clone(),
                split: if i < n_train { Split::Train } else { Split::Val },
            };
            out.push((entry, sample));
        }
    }
    Ok(out)
}

/// Writes the dataset under `root` and returns its manifest.
pub fn make_dataset(cfg: &DatasetConfig, seed: u64, root: &Path) -> Result<Dataset> {
    let samples = generate_samples(cfg, seed)?;
    fs::create_dir_all(root.join("samples"))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut entries = Vec::with_capacity(samples.len());
    for (entry, sample) in samples {
        write_sample(&sample, &root.join("samples").join(&entry.id))?;
        manifest.push_str(&format!("{}\t{}\t{}\n", entry.id, entry.label, entry.split.as_str()));
        entries.push(entry);
    }
    fs::write(root.join("manifest.tsv"), manifest)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
    })
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `stem.ppm`, `stem.pfm` and `stem.txt`.
pub fn write_sample(sample: &RenderedSample, stem: &Path) -> Result<()> {
    write_ppm(&with_ext(stem, "ppm"), &sample.image)?;
    write_pfm(&with_ext(stem, "pfm"), &sample.depth)?;
    fs::write(
        with_ext(stem, "txt"),
        format_camera_text(&sample.intrinsics, sample.extrinsics.as_ref()),
    )?;
    Ok(())
}

pub fn read_sample(stem: &Path) -> Result<RenderedSample> {
    let image = read_ppm(&with_ext(stem, "ppm"))?;
    let depth = read_pfm(&with_ext(stem, "pfm"))?;
    let cam_path = with_ext(stem, "txt");
    let (intrinsics, extrinsics) = parse_camera_text(&fs::read_to_string(&cam_path)?).map_err(|e| with_path(e, &cam_path))?;
    if image.width() != intrinsics.width || image.height() != intrinsics.height || !depth.matches(&intrinsics) {
        return Err(Error::Schema(format!(
            "{}: image {}x{}, depth {}x{} and camera {}x{} disagree",
            stem.display(),
            image.width(),
            image.height(),
            depth.width(),
            depth.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    Ok(RenderedSample {
        id: stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        image,
        depth,
        intrinsics,
        extrinsics,
        dense: true,
    })
}
