//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op<T> {
    Constant,
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Gelu(Var),
    SmoothL1(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SparseRows {
        x: Var,
        offsets: Vec<usize>,
        index: Vec<usize>,
        weight: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Input | Param(_) => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | BatchMatMul(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | Offset(x) | Exp(x) | Log(x) | Sqrt(x) | Sigmoid(x) | Gelu(x)
            | SmoothL1(x, _) | Permute(x, _) | Reshape(x) | Softmax(x) | Sum(x) | Mean(x)
            | GatherRows(x, _) | Dropout(x, _) => vec![*x],
            Slice { x, .. } | SparseRows { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat(xs) => xs.clone(),
            Conv2d { x, w, .. } => vec![*x, *w],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

// tanh-approximation constants for GeLU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

const LAYER_NORM_EPS: f64 = 1e-5;

/// A computation tape. Build a fresh graph per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a graph input or parameter node.
    pub fn get<'g>(&self, graph: &'g Graph<T>, v: Var) -> Option<Tensor<T>> {
        let shape = graph.shape(v).to_vec();
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Real> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf that receives a gradient but is not a named parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_of(sb, sa) {
            Ok(())
        } else {
            Err(DiffError::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.check_broadcast(op, a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let n = bd.len();
        let mut out = Vec::with_capacity(ad.len());
        if n > 0 {
            for chunk in ad.chunks(n) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, node))
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("unary shape");
        self.push(out, node)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |e| e * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `x + c` for a scalar constant.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |e| e + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.sqrt(), Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// GeLU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Elementwise Huber profile of a signed residual:
    /// 0.5x²/β when |x| < β, |x| − 0.5β otherwise.
    pub fn smooth_l1(&mut self, x: Var, beta: T) -> Var {
        let half = T::of(0.5);
        self.unary(
            x,
            move |e| {
                let a = e.abs();
                if a < beta {
                    half * a * a / beta
                } else {
                    a - half * beta
                }
            },
            Op::SmoothL1(x, beta),
        )
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `[b,m,k] · [b,k,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(DiffError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bt {
            gemm_nn(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, Op::BatchMatMul(a, b)))
    }

    /// Reorders axes; output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let (out, out_shape) = kernels::permute(self.data(x), shape, perm);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(DiffError::shape("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().ok_or_else(|| DiffError::shape("softmax", "rank 0"))?;
        let mut out = v.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                for e in row.iter_mut() {
                    *e /= s;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().ok_or_else(|| DiffError::shape("layer_norm", "rank 0"))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(DiffError::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", v.shape(), self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = v.numel() / n.max(1);
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        let nf = T::of(n as f64);
        for row in v.data().chunks(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd.push(r);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| DiffError::shape("concat", "no inputs"))?;
        let lead = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(DiffError::shape("concat", "rank 0"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(DiffError::shape("concat", format!("{:?} vs leading {:?}", s, lead)));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| DiffError::shape("slice_last", "rank 0"))?;
        if start > end || end > w {
            return Err(DiffError::shape("slice_last", format!("{start}..{end} of {w}")));
        }
        let rows = numel(&s[..s.len() - 1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&d[r * w + start..r * w + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start, end }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn row_width(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(DiffError::shape(op, "rank 0"));
        }
        Ok((s[0], numel(&s[1..])))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, w) = self.row_width("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(DiffError::shape("gather_rows", format!("index {bad} of {rows} rows")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = index.len();
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows(x, index.to_vec())))
    }

    /// Sparse linear map over rows: output row `r` is
    /// `Σ weight[j] · x[index[j]]` for `j in offsets[r]..offsets[r+1]`.
    pub fn sparse_rows(&mut self, x: Var, offsets: Vec<usize>, index: Vec<usize>, weight: Vec<T>) -> Result<Var> {
        let (rows, w) = self.row_width("sparse_rows", x)?;
        let valid = !offsets.is_empty()
            && offsets[0] == 0
            && offsets.windows(2).all(|p| p[0] <= p[1])
            && *offsets.last().unwrap() == index.len()
            && index.len() == weight.len()
            && index.iter().all(|&i| i < rows);
        if !valid {
            return Err(DiffError::shape("sparse_rows", "malformed row table"));
        }
        let n_out = offsets.len() - 1;
        let d = self.data(x);
        let mut out = vec![T::zero(); n_out * w];
        for r in 0..n_out {
            let orow = &mut out[r * w..(r + 1) * w];
            for j in offsets[r]..offsets[r + 1] {
                let (src, wt) = (index[j], weight[j]);
                for (o, &e) in orow.iter_mut().zip(&d[src * w..(src + 1) * w]) {
                    *o += wt * e;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = n_out;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SparseRows {
                x,
                offsets,
                index,
                weight,
            },
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect(),
        )
        .expect("dropout shape");
        self.push(out, Op::Dropout(x, mask))
    }

    /// 2-D convolution over a channel-last `[h, w, cin]` input with a
    /// `[k, k, cin, cout]` kernel and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] || stride == 0 {
            return Err(DiffError::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(DiffError::shape("conv2d", format!("input {sx:?} smaller than kernel {k}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let kkc = k * k * cin;
        let xd = self.data(x);
        let mut cols = vec![T::zero(); ho * wo * kkc];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * kkc..(oy * wo + ox + 1) * kkc];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = (iy as usize * wd + ix as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![T::zero(); ho * wo * cout];
        gemm_nn(ho * wo, kkc, cout, &cols, self.data(w), &mut out);
        Ok(self.push(Tensor::new(vec![ho, wo, cout], out)?, Op::Conv2d { x, w, cols, geom }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($v:expr, |$gx:ident| $body:block) => {
                if let Some($gx) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                with_slot!(*a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                });
                with_slot!(*b, |gb| {
                    let n = gb.len();
                    if n > 0 {
                        for chunk in g.chunks(n) {
                            for (x, &d) in gb.iter_mut().zip(chunk) {
                                *x += sign * d;
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let n = bd.len();
                with_slot!(*a, |ga| {
                    for (i, (x, &d)) in ga.iter_mut().zip(g).enumerate() {
                        *x += d * bd[i % n];
                    }
                });
                with_slot!(*b, |gb| {
                    for (i, (&d, &av)) in g.iter().zip(ad).enumerate() {
                        gb[i % n] += d * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let n = bd.len();
                with_slot!(*a, |ga| {
                    for (i, (x, &d)) in ga.iter_mut().zip(g).enumerate() {
                        *x += d / bd[i % n];
                    }
                });
                with_slot!(*b, |gb| {
                    for (i, (&d, &av)) in g.iter().zip(ad).enumerate() {
                        let bv = bd[i % n];
                        gb[i % n] -= d * av / (bv * bv);
                    }
                });
            }
            Op::Scale(x, c) => with_slot!(*x, |gx| {
                for (e, &d) in gx.iter_mut().zip(g) {
                    *e += *c * d;
                }
            }),
            Op::Offset(x) | Op::Reshape(x) => with_slot!(*x, |gx| {
                for (e, &d) in gx.iter_mut().zip(g) {
                    *e += d;
                }
            }),
            Op::Exp(x) => with_slot!(*x, |gx| {
                for ((e, &d), &y) in gx.iter_mut().zip(g).zip(out) {
                    *e += d * y;
                }
            }),
            Op::Log(x) => with_slot!(*x, |gx| {
                for ((e, &d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *e += d / xv;
                }
            }),
            Op::Sqrt(x) => with_slot!(*x, |gx| {
                let half = T::of(0.5);
                for ((e, &d), &y) in gx.iter_mut().zip(g).zip(out) {
                    *e += d * half / y;
                }
            }),
            Op::Sigmoid(x) => with_slot!(*x, |gx| {
                for ((e, &d), &y) in gx.iter_mut().zip(g).zip(out) {
                    *e += d * y * (T::one() - y);
                }
            }),
            Op::Gelu(x) => with_slot!(*x, |gx| {
                for ((e, &d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *e += d * gelu_grad(xv);
                }
            }),
            Op::SmoothL1(x, beta) => with_slot!(*x, |gx| {
                for ((e, &d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    let slope = if xv.abs() < *beta { xv / *beta } else { xv.signum() };
                    *e += d * slope;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_slot!(*a, |ga| {
                    gemm_nt(m, n, k, g, val(*b), ga);
                });
                with_slot!(*b, |gb| {
                    gemm_tn(m, k, n, val(*a), g, gb);
                });
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                with_slot!(*a, |ga| {
                    let bd = val(*b);
                    for i in 0..bt {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                with_slot!(*b, |gb| {
                    let ad = val(*a);
                    for i in 0..bt {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Permute(x, perm) => with_slot!(*x, |gx| {
                let (back, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                for (e, d) in gx.iter_mut().zip(back) {
                    *e += d;
                }
            }),
            Op::Softmax(x) => with_slot!(*x, |gx| {
                let n = *node.value.shape().last().unwrap();
                if n > 0 {
                    for ((gr, dr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s = dot(dr, yr);
                        for ((e, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                            *e += y * (d - s);
                        }
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gd = val(*gain);
                with_slot!(*x, |gx| {
                    let nf = T::of(n as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dh = dr[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            gx[r * n + j] += rs * (dr[j] * gd[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                with_slot!(*gain, |gg| {
                    for (dr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                });
                with_slot!(*bias, |gb| {
                    for dr in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += dr[j];
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut off = 0;
                for &x in xs {
                    let w = *nodes[x.0].value.shape().last().unwrap();
                    with_slot!(x, |gx| {
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice { x, start, end } => with_slot!(*x, |gx| {
                let w = *nodes[x.0].value.shape().last().unwrap();
                let sw = end - start;
                if sw > 0 {
                    for (r, dr) in g.chunks(sw).enumerate() {
                        for (j, &d) in dr.iter().enumerate() {
                            gx[r * w + start + j] += d;
                        }
                    }
                }
            }),
            Op::Sum(x) => with_slot!(*x, |gx| {
                for e in gx.iter_mut() {
                    *e += g[0];
                }
            }),
            Op::Mean(x) => with_slot!(*x, |gx| {
                let d = g[0] / T::of(gx.len() as f64);
                for e in gx.iter_mut() {
                    *e += d;
                }
            }),
            Op::GatherRows(x, index) => with_slot!(*x, |gx| {
                let w = numel(&nodes[x.0].value.shape()[1..]);
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..w {
                        gx[i * w + j] += g[r * w + j];
                    }
                }
            }),
            Op::SparseRows {
                x,
                offsets,
                index,
                weight,
            } => with_slot!(*x, |gx| {
                let w = numel(&nodes[x.0].value.shape()[1..]);
                for r in 0..offsets.len() - 1 {
                    let dr = &g[r * w..(r + 1) * w];
                    for j in offsets[r]..offsets[r + 1] {
                        let (src, wt) = (index[j], weight[j]);
                        for (e, &d) in gx[src * w..(src + 1) * w].iter_mut().zip(dr) {
                            *e += wt * d;
                        }
                    }
                }
            }),
            Op::Dropout(x, mask) => with_slot!(*x, |gx| {
                for ((e, &d), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *e += d * m;
                }
            }),
            Op::Conv2d { x, w, cols, geom } => {
                let kkc = geom.k * geom.k * geom.cin;
                let p = geom.ho * geom.wo;
                with_slot!(*w, |gw| {
                    gemm_tn(p, kkc, geom.cout, cols, g, gw);
                });
                with_slot!(*x, |gx| {
                    let mut dcols = vec![T::zero(); p * kkc];
                    gemm_nt(p, geom.cout, kkc, g, val(*w), &mut dcols);
                    col2im(&dcols, geom, gx);
                });
            }
        }
    }

    /// Gradients of every bound parameter, keyed by name. Parameters bound
    /// more than once have their contributions summed; parameters that do not
    /// reach the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = match &grads.grads[i] {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                };
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

fn grad_slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn col2im<T: Real>(dcols: &[T], geom: &ConvGeom, gx: &mut [T]) {
    let ConvGeom {
        h,
        w,
        cin,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let kkc = k * k * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * kkc..(oy * wo + ox + 1) * kkc];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for c in 0..cin {
                        gx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
