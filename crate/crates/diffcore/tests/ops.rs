use diffcore::gradcheck::op_cases;
use diffcore::{checkpoint, grad_check, DiffError, Graph, ParameterRegistry, RngStream, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn gelu_at_zero() {
    let mut g = Graph::<f64>::new(false);
    let x = g.constant(t(&[1], &[0.0]));
    let y = g.gelu(x);
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new(false);
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = RngStream::new(3);
    let mut g = Graph::<f32>::new(false);
    let x = g.constant(Tensor::randn(&[7, 9], 3.0, &mut rng));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(9) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn matmul_identity() {
    let mut rng = RngStream::new(5);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let mut g = Graph::new(false);
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut rng = RngStream::new(11);
    let mut g = Graph::<f64>::new(false);
    let x = g.constant(Tensor::randn(&[4, 16], 5.0, &mut rng));
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).data().chunks(16) {
        let m: f64 = row.iter().sum::<f64>() / 16.0;
        let v: f64 = row.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-5);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new(true);
    let w = g.input(t(&[3], &[1.0, -2.0, 5.0]));
    let l = g.sum(w);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(&g, w).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::<f64>::new(true);
    let w = g.input(t(&[2], &[1.0, 2.0]));
    let sq = g.square(w).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(&g, w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut reg = ParameterRegistry::<f64>::new();
    reg.register("used", t(&[2], &[1.0, 2.0])).unwrap();
    reg.register("unused", t(&[3], &[4.0, 5.0, 6.0])).unwrap();
    let mut g = Graph::new(true);
    let p = reg.bind(&mut g);
    let u = p.get("used").unwrap();
    let l = g.sum(u);
    let grads = g.backward(l).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg["used"].data(), &[1.0, 1.0]);
    assert_eq!(pg["unused"].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn reuse_accumulates_gradients() {
    let mut g = Graph::<f64>::new(true);
    let w = g.input(t(&[2], &[3.0, -1.0]));
    let a = g.scale(w, 2.0);
    let b = g.add(a, w).unwrap();
    let l = g.sum(b);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(&g, w).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn backward_through_non_scalar_is_rejected() {
    let mut g = Graph::<f64>::new(true);
    let w = g.input(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(DiffError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new(false);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
    let c = g.constant(Tensor::zeros(&[2]));
    let err = g.add(a, c).unwrap_err();
    assert!(err.to_string().starts_with("add"), "{err}");
}

#[test]
fn dropout_is_identity_at_rate_zero_and_in_inference() {
    let mut rng = RngStream::new(1);
    let mut g = Graph::<f64>::new(true);
    let x = g.input(Tensor::randn(&[10], 1.0, &mut rng));
    assert_eq!(g.dropout(x, 0.0, &mut rng), x);
    let mut g = Graph::<f64>::new(false);
    let x = g.input(Tensor::randn(&[10], 1.0, &mut rng));
    assert_eq!(g.dropout(x, 0.5, &mut rng), x);
}

#[test]
fn dropout_gradient_is_the_mask() {
    let mut rng = RngStream::new(9);
    let mut g = Graph::<f64>::new(true);
    let x = g.input(Tensor::full(&[200], 1.0));
    let y = g.dropout(x, 0.25, &mut rng);
    let out = g.value(y).clone();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    // each output equals its mask entry because the input is all ones
    assert_eq!(grads.get(&g, x).unwrap(), out);
    assert!(out.data().iter().any(|&v| v == 0.0));
    assert!(out.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
}

#[test]
fn grad_check_is_exact_for_linear_functions() {
    for v in [0.3, -1.2, 2.0, 0.7] {
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[t(&[1], &[v])], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
    let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
    let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_gelu_below_1e6() {
    let mut rng = RngStream::new(17);
    let x = Tensor::uniform(&[12], -2.0, 2.0, &mut rng);
    let err = grad_check(
        |g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn every_op_passes_grad_check() {
    for case in op_cases() {
        for seed in 0..5u64 {
            let mut rng = RngStream::derive(seed, 1);
            let inputs = case.sample_inputs(&mut rng);
            let err = grad_check(case.f, &inputs, 1e-5).unwrap();
            assert!(err < 1e-5, "{} seed {seed}: {err:e}", case.name);
        }
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = RngStream::new(21);
    let x = Tensor::<f64>::randn(&[5, 4, 2], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 3, 2, 3], 1.0, &mut rng);
    let mut g = Graph::new(false);
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[3, 2, 3]);
    let yd = g.value(y).data();
    for oy in 0..3 {
        for ox in 0..2 {
            for co in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                            continue;
                        }
                        for c in 0..2 {
                            s += x.data()[(iy as usize * 4 + ix as usize) * 2 + c]
                                * w.data()[((ky * 3 + kx) * 2 + c) * 3 + co];
                        }
                    }
                }
                assert!((yd[(oy * 2 + ox) * 3 + co] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_forward() {
    let run = || {
        let mut rng = RngStream::new(99);
        let mut g = Graph::<f32>::new(true);
        let a = g.input(Tensor::randn(&[8, 8], 1.0, &mut rng));
        let b = g.matmul(a, a).unwrap();
        let c = g.dropout(b, 0.1, &mut rng);
        let d = g.softmax(c).unwrap();
        g.value(d).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn truncated_checkpoint_is_rejected_with_offset() {
    let mut reg = ParameterRegistry::<f32>::new();
    reg.register("a", Tensor::full(&[3], 1.5)).unwrap();
    let bytes = checkpoint::encode(&reg);
    let err = checkpoint::decode::<f32>(&bytes[..bytes.len() - 2]).unwrap_err();
    match err {
        DiffError::Checkpoint { offset, .. } => assert!(offset > 8),
        other => panic!("unexpected {other}"),
    }
    assert!(checkpoint::decode::<f32>(b"NOTACKPT\x01\0\0\0\0\0\0\0").is_err());
}

proptest! {
    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
        rows in 1usize..4,
        names in prop::collection::btree_set("[a-z.]{1,12}", 1..4),
    ) {
        let mut reg = ParameterRegistry::<f32>::new();
        for (i, name) in names.iter().enumerate() {
            let n = values.len() * rows;
            let data: Vec<f32> = (0..n).map(|j| values[(i + j) % values.len()]).collect();
            reg.register(name.clone(), Tensor::new(vec![rows, values.len()], data).unwrap()).unwrap();
        }
        let bytes = checkpoint::encode(&reg);
        let back = checkpoint::decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        prop_assert_eq!(back, reg);
    }
}
