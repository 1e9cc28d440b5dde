//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Analytic and central-difference gradients of a scalar function, one pair
/// of tensors per input.
pub struct GradComparison {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradComparison {
    /// Maximum over coordinates of `|a − n| / max(|a|, |n|, 1e-8)`.
    pub fn elementwise(&self) -> f64 {
        let mut worst = 0.0f64;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (&a, &n) in a.data().iter().zip(n.data()) {
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            }
        }
        worst
    }

    /// Maximum over inputs of `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
    pub fn tensorwise(&self) -> f64 {
        let inf = |t: &Tensor<f64>| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            let diff = a.data().iter().zip(n.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            worst = worst.max(diff / inf(a).max(inf(n)).max(1e-8));
        }
        worst
    }
}

/// Compares the analytic gradient of a scalar function against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, coordinate by coordinate over all
/// `inputs`. Returns the maximum of `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` is evaluated on a fresh inference-mode graph each time, receiving the
/// input leaves in order.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(compare_gradients(f, inputs, eps)?.elementwise())
}

pub fn compare_gradients<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradComparison>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new(false);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut analytic = Vec::with_capacity(inputs.len());
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        analytic.push(grads.get(&g, v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape())));
        let mut num = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            let (xp, xm) = (x0 + eps, x0 - eps);
            probe[k].data_mut()[i] = xp;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = xm;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            // the representable step, equal to 2ε up to rounding of x0 ± ε
            num.data_mut()[i] = (fp - fm) / (xp - xm);
        }
        numeric.push(num);
    }
    Ok(GradComparison { analytic, numeric })
}

/// How inputs for an [`OpCase`] are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDomain {
    /// Uniform in [−2, 2].
    Symmetric,
    /// Uniform in [0.5, 2] (log, sqrt, div denominators).
    Positive,
    /// Uniform in [−2, 2] but at least `margin` away from ±1, the
    /// smooth-L1 knee used by the case.
    AwayFromKnee { margin: f64 },
}

/// A differentiable operation wrapped as a scalar function for checking.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domains: Vec<InputDomain>,
    pub f: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

impl OpCase {
    pub fn sample_inputs<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<f64>> {
        self.shapes
            .iter()
            .zip(&self.domains)
            .map(|(shape, dom)| {
                Tensor::from_fn(shape, |_| match *dom {
                    InputDomain::Symmetric => rng.random_range(-2.0..2.0),
                    InputDomain::Positive => rng.random_range(0.5..2.0),
                    InputDomain::AwayFromKnee { margin } => loop {
                        let x: f64 = rng.random_range(-2.0..2.0);
                        if (x.abs() - 1.0).abs() > margin {
                            break x;
                        }
                    },
                })
            })
            .collect()
    }
}

// Fixed pseudo-random readout weights so every output coordinate gets a
// distinct, non-trivial upstream gradient.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 * 0.618_033_988_75).fract() - 0.5) * 1.7 + 0.3);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One case per differentiable operation of the graph.
pub fn op_cases() -> Vec<OpCase> {
    use InputDomain::*;
    let sym = |n: usize| vec![Symmetric; n];
    vec![
        OpCase {
            name: "add",
            shapes: vec![vec![3, 4], vec![4]],
            domains: sym(2),
            f: |g, x| {
                let y = g.add(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![3, 4], vec![3, 4]],
            domains: sym(2),
            f: |g, x| {
                let y = g.sub(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3, 4], vec![3, 4]],
            domains: sym(2),
            f: |g, x| {
                let y = g.mul(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "div",
            shapes: vec![vec![3, 4], vec![4]],
            domains: vec![Symmetric, Positive],
            f: |g, x| {
                let y = g.div(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "scale_offset",
            shapes: vec![vec![5]],
            domains: sym(1),
            f: |g, x| {
                let y = g.scale(x[0], -1.5);
                let y = g.offset(y, 0.25);
                readout(g, y)
            },
        },
        OpCase {
            name: "exp",
            shapes: vec![vec![6]],
            domains: sym(1),
            f: |g, x| {
                let y = g.exp(x[0]);
                readout(g, y)
            },
        },
        OpCase {
            name: "log",
            shapes: vec![vec![6]],
            domains: vec![Positive],
            f: |g, x| {
                let y = g.log(x[0]);
                readout(g, y)
            },
        },
        OpCase {
            name: "sqrt",
            shapes: vec![vec![6]],
            domains: vec![Positive],
            f: |g, x| {
                let y = g.sqrt(x[0]);
                readout(g, y)
            },
        },
        OpCase {
            name: "sigmoid",
            shapes: vec![vec![6]],
            domains: sym(1),
            f: |g, x| {
                let y = g.sigmoid(x[0]);
                readout(g, y)
            },
        },
        OpCase {
            name: "gelu",
            shapes: vec![vec![8]],
            domains: sym(1),
            f: |g, x| {
                let y = g.gelu(x[0]);
                readout(g, y)
            },
        },
        OpCase {
            name: "smooth_l1",
            shapes: vec![vec![8]],
            domains: vec![AwayFromKnee { margin: 1e-4 }],
            f: |g, x| {
                let y = g.smooth_l1(x[0], 1.0);
                readout(g, y)
            },
        },
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domains: sym(2),
            f: |g, x| {
                let y = g.matmul(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "batch_matmul",
            shapes: vec![vec![2, 3, 4], vec![2, 4, 2]],
            domains: sym(2),
            f: |g, x| {
                let y = g.batch_matmul(x[0], x[1])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "permute_reshape",
            shapes: vec![vec![2, 3, 4]],
            domains: sym(1),
            f: |g, x| {
                let y = g.permute(x[0], &[1, 2, 0])?;
                let y = g.reshape(y, &[3, 8])?;
                let y = g.transpose(y)?;
                readout(g, y)
            },
        },
        OpCase {
            name: "softmax",
            shapes: vec![vec![3, 5]],
            domains: sym(1),
            f: |g, x| {
                let y = g.softmax(x[0])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "layer_norm",
            shapes: vec![vec![3, 6], vec![6], vec![6]],
            domains: sym(3),
            f: |g, x| {
                let y = g.layer_norm(x[0], x[1], x[2])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "concat_slice",
            shapes: vec![vec![3, 2], vec![3, 4]],
            domains: sym(2),
            f: |g, x| {
                let y = g.concat(&[x[0], x[1]])?;
                let y = g.slice_last(y, 1, 5)?;
                readout(g, y)
            },
        },
        OpCase {
            name: "sum_mean",
            shapes: vec![vec![4, 3]],
            domains: sym(1),
            f: |g, x| {
                let s = g.sum(x[0]);
                let m = g.mean(x[0]);
                let s2 = g.mul(s, s)?;
                let y = g.add(s2, m)?;
                Ok(y)
            },
        },
        OpCase {
            name: "gather_rows",
            shapes: vec![vec![4, 3]],
            domains: sym(1),
            f: |g, x| {
                let y = g.gather_rows(x[0], &[2, 0, 2, 3])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "sparse_rows",
            shapes: vec![vec![4, 3]],
            domains: sym(1),
            f: |g, x| {
                let y = g.sparse_rows(x[0], vec![0, 2, 3, 5], vec![0, 1, 3, 2, 2], vec![0.25, 0.75, 1.0, -0.5, 2.0])?;
                readout(g, y)
            },
        },
        OpCase {
            name: "conv2d",
            shapes: vec![vec![5, 6, 2], vec![3, 3, 2, 3]],
            domains: sym(2),
            f: |g, x| {
                let y = g.conv2d(x[0], x[1], 2, 1)?;
                readout(g, y)
            },
        },
    ]
}
