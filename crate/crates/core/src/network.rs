//! Variational latent depth network.
//!
//! A learned latent array of `N_l × 2D_l` is conditioned on encoder tokens by
//! one cross-attention and `self_layers` self-attention blocks (pre-norm,
//! residual, GeLU MLP). Its halves are the mean and log-variance of a
//! diagonal Gaussian. Depth queries carry only position embeddings and read
//! a reparameterized latent sample through one cross-attention and an MLP.

use diffcore::{BoundParams, Graph, ParameterRegistry, Real, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::embeddings::{
    encode_image_on, encoder_tokens_on, feature_intrinsics, pixel_grid, position_embeddings, EmbeddingMode,
    EncoderConfig, FourierConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{PinholeIntrinsics, Pixel};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub latents: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub self_layers: usize,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub fourier: FourierConfig,
    pub encoder: EncoderConfig,
    pub embedding: EmbeddingMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latents: 64,
            latent_dim: 64,
            heads: 4,
            self_layers: 3,
            mlp_ratio: 2,
            dropout: 0.1,
            d_min: 0.5,
            d_max: 50.0,
            fourier: FourierConfig::default(),
            encoder: EncoderConfig::default(),
            embedding: EmbeddingMode::Rays,
        }
    }
}

impl NetworkConfig {
    /// Reference values at the paper's scale.
    pub fn paper_scale() -> Self {
        Self {
            latents: 1024,
            latent_dim: 1024,
            heads: 8,
            self_layers: 8,
            mlp_ratio: 1,
            dropout: 0.1,
            d_min: 0.1,
            d_max: 200.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latents == 0 || self.latent_dim == 0 || self.heads == 0 {
            return Err(Error::config("network", "latents, latent_dim and heads must be positive"));
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::config(
                "network.heads",
                format!("latent_dim {} is not divisible by {} heads", self.latent_dim, self.heads),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("network.mlp_ratio", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("network.dropout", "must lie in [0, 1)"));
        }
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::config("network.d_min", format!("need 0 <= d_min < d_max, got ({}, {})", self.d_min, self.d_max)));
        }
        self.fourier.validate()?;
        self.encoder.validate()
    }

    pub fn token_dim(&self) -> usize {
        self.encoder.out_channels() + self.fourier.dim()
    }

    pub fn query_dim(&self) -> usize {
        self.fourier.dim()
    }
}

/// Mean and log-variance of the conditioned latent, each `[N_l, D_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedLatent<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// How the latent is drawn from its conditioned distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentDraw<T> {
    /// `z = μ`, as if σ were 0.
    Mean,
    /// `z = μ + exp(s/2) ⊙ ε` with the given standard-normal noise.
    Noise(Tensor<T>),
}

/// Per-query mean and population standard deviation over latent samples.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl UncertaintyMap {
    /// Reduces decoded samples (each row-major over the query grid).
    pub fn from_samples(width: usize, height: usize, samples: &[Vec<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("at least one sample is required"));
        }
        let n = width * height;
        if samples.iter().any(|s| s.len() != n) {
            return Err(Error::domain("sample size does not match the grid"));
        }
        let count = samples.len() as f64;
        let mut mean = vec![0.0; n];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut std = vec![0.0; n];
        for s in samples {
            for ((acc, v), m) in std.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        std.iter_mut().for_each(|v| *v = (*v / count).sqrt());
        Ok(Self { width, height, mean, std })
    }
}

fn linear<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{name}.g"))?;
    let bias = p.get(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Splits `[n, h·dh]` into heads `[h, n, dh]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, &[s[0], heads, s[1] / heads])?;
    Ok(g.permute(y, &[1, 0, 2])?)
}

/// Multi-head attention of `xq [n, ·]` over `xkv [m, ·]` into width `dim`.
fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    dim: usize,
) -> Result<Var> {
    let n = g.shape(xq)[0];
    let wq = p.get(&format!("{name}.wq"))?;
    let wk = p.get(&format!("{name}.wk"))?;
    let wv = p.get(&format!("{name}.wv"))?;
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / ((dim / heads) as f64).sqrt()));
    let attn = g.softmax(scores)?;
    let out = g.batch_matmul(attn, v)?;
    let out = g.permute(out, &[1, 0, 2])?;
    let out = g.reshape(out, &[n, dim])?;
    linear(g, p, &format!("{name}.o"), out)
}

fn mlp<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

fn residual<T: Real>(g: &mut Graph<T>, x: Var, branch: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
    let b = g.dropout(branch, rate, rng);
    Ok(g.add(x, b)?)
}

/// Conditions the latent array on `tokens [n, token_dim]`; returns
/// `(μ, s)` vars of shape `[N_l, D_l]`.
pub fn encode_condition_on<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &NetworkConfig,
    tokens: Var,
    rng: &mut RngStream,
) -> Result<(Var, Var)> {
    if g.shape(tokens)[0] == 0 {
        return Err(Error::domain("cannot condition on an empty token set"));
    }
    let width = 2 * cfg.latent_dim;
    let mut x = p.get("latent")?;
    let xq = layer_norm(g, p, "cond.cross.ln_q", x)?;
    let xkv = layer_norm(g, p, "cond.cross.ln_kv", tokens)?;
    let a = attention(g, p, "cond.cross.attn", xq, xkv, cfg.heads, width)?;
    x = residual(g, x, a, cfg.dropout, rng)?;
    let h = layer_norm(g, p, "cond.cross.ln_mlp", x)?;
    let h = mlp(g, p, "cond.cross.mlp", h)?;
    x = residual(g, x, h, cfg.dropout, rng)?;
    for l in 0..cfg.self_layers {
        let pre = format!("cond.self{l}");
        let h = layer_norm(g, p, &format!("{pre}.ln_attn"), x)?;
        let a = attention(g, p, &format!("{pre}.attn"), h, h, cfg.heads, width)?;
        x = residual(g, x, a, cfg.dropout, rng)?;
        let h = layer_norm(g, p, &format!("{pre}.ln_mlp"), x)?;
        let h = mlp(g, p, &format!("{pre}.mlp"), h)?;
        x = residual(g, x, h, cfg.dropout, rng)?;
    }
    let mu = g.slice_last(x, 0, cfg.latent_dim)?;
    let s = g.slice_last(x, cfg.latent_dim, width)?;
    Ok((mu, s))
}

/// Reparameterized latent sample.
pub fn sample_latent_on<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var, draw: &LatentDraw<T>) -> Result<Var> {
    match draw {
        LatentDraw::Mean => Ok(mu),
        LatentDraw::Noise(eps) => {
            let half = g.scale(log_var, T::of(0.5));
            let sigma = g.exp(half);
            let e = g.constant(eps.clone());
            let noise = g.mul(sigma, e)?;
            Ok(g.add(mu, noise)?)
        }
    }
}

/// Decodes `queries [q, query_dim]` against latent `z [N_l, D_l]`;
/// returns the pre-activation `a` and the depth, both `[q, 1]`.
pub fn decode_on<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &NetworkConfig,
    z: Var,
    queries: Var,
) -> Result<(Var, Var)> {
    let qdim = g.shape(queries)[1];
    if qdim != cfg.query_dim() {
        return Err(Error::Diff(diffcore::DiffError::Shape {
            op: "decode",
            detail: format!("query dim {qdim}, expected {}", cfg.query_dim()),
        }));
    }
    let x = linear(g, p, "dec.in", queries)?;
    let xq = layer_norm(g, p, "dec.ln_q", x)?;
    let zk = layer_norm(g, p, "dec.ln_kv", z)?;
    let a = attention(g, p, "dec.attn", xq, zk, cfg.heads, cfg.latent_dim)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, "dec.ln_mlp", x)?;
    let h = mlp(g, p, "dec.mlp", h)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, p, "dec.ln_out", x)?;
    let pre = linear(g, p, "dec.head", h)?;
    let sig = g.sigmoid(pre);
    let scaled = g.scale(sig, T::of(cfg.d_max - cfg.d_min));
    let depth = g.offset(scaled, T::of(cfg.d_min));
    Ok((pre, depth))
}

fn register_linear<T: Real>(reg: &mut ParameterRegistry<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut RngStream) -> Result<()> {
    let std = (gain / fan_in as f64).sqrt();
    reg.register(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    reg.register(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn register_ln<T: Real>(reg: &mut ParameterRegistry<T>, name: &str, dim: usize) -> Result<()> {
    reg.register(format!("{name}.g"), Tensor::full(&[dim], T::one()))?;
    reg.register(format!("{name}.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

fn register_attention<T: Real>(reg: &mut ParameterRegistry<T>, name: &str, dq: usize, dkv: usize, dim: usize, rng: &mut RngStream) -> Result<()> {
    reg.register(format!("{name}.wq"), Tensor::randn(&[dq, dim], (1.0 / dq as f64).sqrt(), rng))?;
    reg.register(format!("{name}.wk"), Tensor::randn(&[dkv, dim], (1.0 / dkv as f64).sqrt(), rng))?;
    reg.register(format!("{name}.wv"), Tensor::randn(&[dkv, dim], (1.0 / dkv as f64).sqrt(), rng))?;
    register_linear(reg, &format!("{name}.o"), dim, dim, 1.0, rng)
}

fn register_mlp<T: Real>(reg: &mut ParameterRegistry<T>, name: &str, dim: usize, hidden: usize, rng: &mut RngStream) -> Result<()> {
    register_linear(reg, &format!("{name}.fc1"), dim, hidden, 2.0, rng)?;
    register_linear(reg, &format!("{name}.fc2"), hidden, dim, 1.0, rng)
}

/// Network weights and their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub params: ParameterRegistry<T>,
}

impl<T: Real> Model<T> {
    /// Variance-scaling normal weights, zero biases, unit norm gains and a
    /// latent array drawn from `N(0, 0.02²)`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed);
        let mut reg = ParameterRegistry::new();
        let (nl, dl) = (config.latents, config.latent_dim);
        let w = 2 * dl;
        config.encoder.init_params(&mut reg, &mut rng)?;
        reg.register("latent", Tensor::randn(&[nl, w], 0.02, &mut rng))?;
        let td = config.token_dim();
        register_ln(&mut reg, "cond.cross.ln_q", w)?;
        register_ln(&mut reg, "cond.cross.ln_kv", td)?;
        register_attention(&mut reg, "cond.cross.attn", w, td, w, &mut rng)?;
        register_ln(&mut reg, "cond.cross.ln_mlp", w)?;
        register_mlp(&mut reg, "cond.cross.mlp", w, config.mlp_ratio * w, &mut rng)?;
        for l in 0..config.self_layers {
            let pre = format!("cond.self{l}");
            register_ln(&mut reg, &format!("{pre}.ln_attn"), w)?;
            register_attention(&mut reg, &format!("{pre}.attn"), w, w, w, &mut rng)?;
            register_ln(&mut reg, &format!("{pre}.ln_mlp"), w)?;
            register_mlp(&mut reg, &format!("{pre}.mlp"), w, config.mlp_ratio * w, &mut rng)?;
        }
        let qd = config.query_dim();
        register_linear(&mut reg, "dec.in", qd, dl, 1.0, &mut rng)?;
        register_ln(&mut reg, "dec.ln_q", dl)?;
        register_ln(&mut reg, "dec.ln_kv", dl)?;
        register_attention(&mut reg, "dec.attn", dl, dl, dl, &mut rng)?;
        register_ln(&mut reg, "dec.ln_mlp", dl)?;
        register_mlp(&mut reg, "dec.mlp", dl, config.mlp_ratio * dl, &mut rng)?;
        register_ln(&mut reg, "dec.ln_out", dl)?;
        register_linear(&mut reg, "dec.head", dl, 1, 1.0, &mut rng)?;
        Ok(Self { config, params: reg })
    }

    /// Checks that `params` has exactly the names and shapes `config` implies.
    pub fn from_parts(config: NetworkConfig, params: ParameterRegistry<T>) -> Result<Self> {
        let reference = Model::<T>::init(config.clone(), 0)?;
        let expected: Vec<(&String, &[usize])> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let found: Vec<(&String, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != found {
            let missing = expected.iter().find(|e| !found.contains(e));
            let extra = found.iter().find(|e| !expected.contains(e));
            return Err(Error::Schema(format!(
                "checkpoint does not match network config (first missing {missing:?}, first unexpected {extra:?})"
            )));
        }
        Ok(Self { config, params })
    }

    /// Condition on an image: encoder tokens at every 1/4-resolution cell.
    pub fn condition_image(&self, image: &Image, k: &PinholeIntrinsics) -> Result<ConditionedLatent<T>> {
        let mut g = Graph::new(false);
        let p = self.params.bind(&mut g);
        let (features, w4, h4) = encode_image_on(&mut g, &p, &self.config.encoder, image)?;
        let k4 = feature_intrinsics(k, w4, h4);
        let tokens = encoder_tokens_on(
            &mut g,
            features,
            w4,
            h4,
            &k4,
            &pixel_grid(w4, h4),
            &self.config.fourier,
            self.config.embedding,
        )?;
        let (mu, s) = encode_condition_on(&mut g, &p, &self.config, tokens, &mut RngStream::new(0))?;
        Ok(ConditionedLatent {
            mu: g.value(mu).clone(),
            log_var: g.value(s).clone(),
        })
    }

    /// Conditions directly on precomputed token features `[n, token_dim]`.
    pub fn encode_condition(&self, tokens: &Tensor<T>) -> Result<ConditionedLatent<T>> {
        let mut g = Graph::new(false);
        let p = self.params.bind(&mut g);
        let t = g.constant(tokens.clone());
        let (mu, s) = encode_condition_on(&mut g, &p, &self.config, t, &mut RngStream::new(0))?;
        Ok(ConditionedLatent {
            mu: g.value(mu).clone(),
            log_var: g.value(s).clone(),
        })
    }

    /// Decodes query features `[q, query_dim]` in chunks of `chunk` rows.
    pub fn decode_depth(&self, z: &Tensor<T>, queries: &Tensor<T>, chunk: usize) -> Result<Vec<T>> {
        let q = queries.shape()[0];
        let d = queries.shape()[1];
        let mut out = Vec::with_capacity(q);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < q {
            let end = (start + chunk).min(q);
            let mut g = Graph::new(false);
            let p = self.params.bind(&mut g);
            let zv = g.constant(z.clone());
            let rows = Tensor::new(vec![end - start, d], queries.data()[start * d..end * d].to_vec())?;
            let qv = g.constant(rows);
            let (_, depth) = decode_on(&mut g, &p, &self.config, zv, qv)?;
            out.extend_from_slice(g.value(depth).data());
            start = end;
        }
        Ok(out)
    }

    /// Query features for `pixels` under the configured embedding mode.
    pub fn query_features(&self, k: &PinholeIntrinsics, pixels: &[Pixel]) -> Tensor<T> {
        position_embeddings(k, pixels, &self.config.fourier, self.config.embedding)
    }

    /// Conditions once and decodes `samples` latent draws at every pixel.
    pub fn predict_with_uncertainty(
        &self,
        image: &Image,
        k: &PinholeIntrinsics,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<UncertaintyMap> {
        self.predict_with(image, k, samples, rng, false)
    }

    /// As [`Self::predict_with_uncertainty`]; `zero_sigma` replaces every
    /// draw by the latent mean.
    pub fn predict_with(
        &self,
        image: &Image,
        k: &PinholeIntrinsics,
        samples: usize,
        rng: &mut RngStream,
        zero_sigma: bool,
    ) -> Result<UncertaintyMap> {
        if samples == 0 {
            return Err(Error::domain("sample count must be at least 1"));
        }
        let cond = self.condition_image(image, k)?;
        let queries = self.query_features(k, &pixel_grid(k.width, k.height));
        let mut decoded = Vec::with_capacity(samples);
        for _ in 0..samples {
            let z = if zero_sigma {
                cond.mu.clone()
            } else {
                sample_latent(&cond, rng)
            };
            let d = self.decode_depth(&z, &queries, 2048)?;
            decoded.push(d.iter().map(|v| v.to_f64().expect("finite")).collect());
        }
        UncertaintyMap::from_samples(k.width, k.height, &decoded)
    }
}

/// `z = μ + exp(s/2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_latent<T: Real>(c: &ConditionedLatent<T>, rng: &mut RngStream) -> Tensor<T> {
    let eps = standard_normal(c.mu.shape(), rng);
    let data = c
        .mu
        .data()
        .iter()
        .zip(c.log_var.data())
        .zip(eps.data())
        .map(|((&m, &s), &e)| m + (s * T::of(0.5)).exp() * e)
        .collect();
    Tensor::new(c.mu.shape().to_vec(), data).expect("same shape")
}

pub fn standard_normal<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.normal()))
}
