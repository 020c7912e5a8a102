use pivad_core::tensor::{gelu_scalar, grad_check, Graph, Tensor, TensorError, Var};
use pivad_oracles::{self as oracle, SplitMix};

fn mat(rng: &mut SplitMix, r: usize, c: usize) -> Tensor {
    Tensor::from_rows(&rng.matrix(r, c)).unwrap()
}

fn rows(t: &Tensor) -> oracle::Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn add_and_sigmoid_basics() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let z = g.constant(Tensor::vector(vec![0.0]));
    let sg = g.sigmoid(z).unwrap();
    assert_eq!(g.value(sg).data(), &[0.5]);
}

#[test]
fn gelu_matches_scalar_reference() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, -0.5, 2.3]));
    let y = g.gelu(x).unwrap();
    for (v, x) in g.value(y).data().iter().zip([1.0, -0.5, 2.3]) {
        assert!((v - oracle::gelu_tanh(x)).abs() < 1e-12);
    }
    assert!((gelu_scalar(1.0) - 0.841_191_990_607_958_6).abs() < 1e-12);
}

#[test]
fn broadcast_over_leading_axes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::vector(vec![10.0, 20.0]));
    let y = g.add(x, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
    let s = g.scalar(2.0);
    let z = g.mul(x, s).unwrap();
    assert_eq!(g.value(z).data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn log_and_sqrt_reject_nonpositive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(
        g.log(x),
        Err(TensorError::Domain { op: "log", .. })
    ));
    let y = g.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(
        g.sqrt(y),
        Err(TensorError::Domain { op: "sqrt", .. })
    ));
}

#[test]
fn matmul_examples_and_oracle() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let c = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let rc = g.matmul(r, c).unwrap();
    assert_eq!(g.value(rc).data(), &[2.0]);

    let mut rng = SplitMix::new(11);
    let a = rng.matrix(3, 4);
    let b = rng.matrix(4, 2);
    let av = g.constant(Tensor::from_rows(&a).unwrap());
    let bv = g.constant(Tensor::from_rows(&b).unwrap());
    let ab = g.matmul(av, bv).unwrap();
    let expect = oracle::flatten(&oracle::matmul(&a, &b));
    for (x, y) in g.value(ab).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(
        g.matmul(av, av),
        Err(TensorError::Shape { op: "matmul", .. })
    ));
}

#[test]
fn conv1d_examples_and_oracle() {
    let mut g = Graph::new();
    // K=1 identity channel map
    let x =
        g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.conv1d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    // box filter with edge effect
    let x = g.constant(Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap());
    let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 2.0]);

    let err = g.conv1d(x, w, b, 1, 0).map(|_| ());
    assert!(err.is_ok());
    let wide = g.constant(Tensor::new(vec![7, 1, 1], vec![1.0; 7]).unwrap());
    assert!(g.conv1d(x, wide, b, 1, 1).is_err());

    let mut rng = SplitMix::new(5);
    for (stride, padding) in [(1, 1), (2, 0), (1, 2), (3, 1)] {
        let xm = rng.matrix(7, 3);
        let wk: Vec<oracle::Mat> = (0..3).map(|_| rng.matrix(3, 4)).collect();
        let bias: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xv = g.constant(Tensor::from_rows(&xm).unwrap());
        let wflat: Vec<f64> = wk.iter().flat_map(oracle::flatten).collect();
        let wv = g.constant(Tensor::new(vec![3, 3, 4], wflat).unwrap());
        let bv = g.constant(Tensor::vector(bias.clone()));
        let y = g.conv1d(xv, wv, bv, stride, padding).unwrap();
        let expect = oracle::flatten(&oracle::conv1d(&xm, &wk, &bias, stride, padding));
        assert_eq!(g.value(y).numel(), expect.len());
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn reductions_and_topk_ties() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let m = g.mean(x, None).unwrap();
    assert_eq!(g.item(m), 2.0);

    let y = g.leaf(Tensor::vector(vec![0.1, 0.9, 0.5]));
    let t = g.topk_mean(y, 0, 2).unwrap();
    assert!((g.item(t) - 0.7).abs() < 1e-15);

    let mut g = Graph::new();
    let z = g.leaf(Tensor::vector(vec![0.5, 0.5, 0.1]));
    let t = g.topk_mean(z, 0, 1).unwrap();
    assert_eq!(g.item(t), 0.5);
    g.backward(t).unwrap();
    assert_eq!(g.grad(z).unwrap(), &[1.0, 0.0, 0.0]);
    assert!(g.topk_mean(z, 0, 4).is_err());

    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_rows(&[vec![3.0, 1.0, 3.0], vec![0.0, 2.0, -1.0]]).unwrap());
    let mx = g.max(w, 1).unwrap();
    assert_eq!(g.value(mx).data(), &[3.0, 2.0]);
    let s = g.sum(mx, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    let mut g = Graph::new();
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let s0 = g.sum(w, Some(0)).unwrap();
    let s1 = g.mean(w, Some(1)).unwrap();
    assert_eq!(g.value(s0).data(), &[4.0, 6.0]);
    assert_eq!(g.value(s1).data(), &[1.5, 3.5]);
    assert!(matches!(g.sum(w, Some(2)), Err(TensorError::Axis { .. })));
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let big = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let s = g.softmax(big, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let mut rng = SplitMix::new(3);
    for scale in [1.0, 1e3, 1e6] {
        let m: oracle::Mat = rng
            .matrix(5, 7)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * scale).collect())
            .collect();
        let x = g.constant(Tensor::from_rows(&m).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let ls = g.log_softmax(x, 1).unwrap();
        let sv = g.value(s).clone();
        assert!(sv.is_finite() && g.value(ls).is_finite());
        for (r, row) in m.iter().enumerate() {
            assert!((sv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let expect = oracle::softmax_row(row);
            for (a, b) in sv.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_zero_mean_unit_variance() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y).data();
    let expect = oracle::layer_norm_row(&[1.0, 2.0, 3.0], 1e-5);
    for (a, b) in v.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean = v.iter().sum::<f64>() / 3.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-9);
    // eps shifts the variance by O(eps / var)
    assert!((var - 1.0).abs() < 1e-4);
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let v = g.value(y).data();
    let var = v.iter().map(|a| a * a).sum::<f64>() / 3.0;
    assert!((var - 1.0).abs() < 1e-9);
    assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![5.0, -1.0, 2.0]));
    let s = g.sum(x, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.leaf(Tensor::vector(vec![7.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq, None).unwrap();
    assert!(matches!(g.backward(sq), Err(TensorError::NonScalarLoss(_))));
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    assert!(g.grad(unused).is_none());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn normalize_rows_clamps_zero_rows_with_warning() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let y = g.normalize_rows(x, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    assert_eq!(g.warnings().len(), 1);
}

#[test]
fn grad_check_sum_of_squares_passes() {
    let f = |g: &mut Graph, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq, None)
    };
    let r = grad_check(f, &[Tensor::vector(vec![0.3, -1.2, 2.0])], 1e-5, 1e-6).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.eps, 1e-5);
}

#[test]
fn grad_check_flags_corrupted_backward() {
    // forward is x^2, derivative deliberately reports x instead of 2x
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.custom_unary(v[0], |x| x * x, |x| x);
        g.sum(y, None)
    };
    let r = grad_check(f, &[Tensor::vector(vec![0.7, -0.4])], 1e-5, 1e-4).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.4);
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite() {
    let f = |g: &mut Graph, v: &[Var]| g.sum(v[0], None);
    assert!(grad_check(f, &[Tensor::vector(vec![1.0])], 0.1, 1e-4).is_err());
    let nan = |g: &mut Graph, v: &[Var]| {
        let s = g.sum(v[0], None)?;
        Ok(g.scale(s, f64::NAN))
    };
    assert!(matches!(
        grad_check(nan, &[Tensor::vector(vec![1.0])], 1e-5, 1e-4),
        Err(TensorError::NonFinite(_))
    ));
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// coordinate contributes a distinct slope.
fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SplitMix::new(seed ^ 0xABCD);
    let w = Tensor::new(shape, (0..n).map(|_| rng.uniform(0.5, 1.5)).collect())?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p, None)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>,
);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = SplitMix::new(seed);
    let r = 2 + rng.below(7);
    let c = 2 + rng.below(7);
    let k = 1 + rng.below(c.min(3));
    let pos = |rng: &mut SplitMix| {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.uniform(0.2, 2.0)).collect(),
        )
        .unwrap()
    };
    let a = mat(&mut rng, r, c);
    let b = mat(&mut rng, r, c);
    let bias = Tensor::vector((0..c).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let pa = pos(&mut rng);
    let pb = pos(&mut rng);
    let m2 = mat(&mut rng, c, 3);
    let wconv = Tensor::new(
        vec![k, c, 3],
        (0..k * c * 3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let bconv = Tensor::vector(vec![0.1, -0.2, 0.3]);
    let gamma = Tensor::vector((0..c).map(|_| rng.uniform(0.5, 1.5)).collect());
    // distinct values keep top-k away from selection ties
    let mut distinct: Vec<f64> = (0..r * c).map(|i| i as f64 * 0.37 - 1.0).collect();
    for i in (1..distinct.len()).rev() {
        distinct.swap(i, rng.below(i + 1));
    }
    let distinct = Tensor::new(vec![r, c], distinct).unwrap();
    let s = seed;
    vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add(v[0], v[1])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "sub_bcast",
            vec![a.clone(), bias.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.sub(v[0], v[1])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.mul(v[0], v[1])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "div",
            vec![a.clone(), pb.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.div(v[0], v[1])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "exp",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.exp(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "log",
            vec![pa.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.log(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "sqrt",
            vec![pa.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.sqrt(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "relu",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.relu(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "gelu",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.gelu(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "sigmoid",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.sigmoid(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "tanh",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.tanh(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "matmul",
            vec![a.clone(), m2],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.transpose(v[0])?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "conv1d",
            vec![a.clone(), wconv, bconv],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.conv1d(v[0], v[1], v[2], 1, 1)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "sum_axis0",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.sum(v[0], Some(0))?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "mean_axis1",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.mean(v[0], Some(1))?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "max_axis1",
            vec![distinct.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.max(v[0], 1)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "topk_mean_axis0",
            vec![distinct],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.topk_mean(v[0], 0, 2.min(r))?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "softmax",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0], 1)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "log_softmax_axis0",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.log_softmax(v[0], 0)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "layer_norm",
            vec![a.clone(), gamma, bias.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "concat_slice",
            vec![a.clone(), b.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.concat(&[v[0], v[1]])?;
                let z = g.slice_cols(y, 1, c)?;
                probe_sum(g, z, s)
            }),
        ),
        (
            "normalize_rows",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.normalize_rows(v[0], 1e-12)?;
                probe_sum(g, y, s)
            }),
        ),
        (
            "scale_shift_clamp",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.scale(v[0], 3.0);
                let y = g.add_scalar(y, 0.5);
                let y = g.clamp(y, -10.0, 10.0);
                probe_sum(g, y, s)
            }),
        ),
        (
            "reshape_diag",
            vec![mat(&mut rng, 3, 3)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.reshape(v[0], vec![9])?;
                let y = g.reshape(y, vec![3, 3])?;
                let d = g.diagonal(y)?;
                probe_sum(g, d, s)
            }),
        ),
    ]
}

#[test]
fn every_op_passes_finite_differences_over_ten_seeds() {
    for seed in 0..10 {
        for (name, inputs, f) in op_cases(seed) {
            let report = grad_check(f, &inputs, 1e-5, 1e-4).unwrap();
            assert!(report.passed, "op {name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = SplitMix::new(99);
        let mut g = Graph::new();
        let x = g.leaf(mat(&mut rng, 6, 5));
        let w = g.leaf(mat(&mut rng, 5, 4));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let l = g.sum(s, Some(0)).unwrap();
        let l = g.log(l).unwrap();
        let l = g.mean(l, None).unwrap();
        g.backward(l).unwrap();
        (
            g.item(l).to_bits(),
            g.grad(x).unwrap().to_vec(),
            g.grad(w).unwrap().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a
        .1
        .iter()
        .zip(&b.1)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a
        .2
        .iter()
        .zip(&b.2)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn transpose_matches_rows() {
    let mut rng = SplitMix::new(8);
    let m = mat(&mut rng, 3, 5);
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let t = g.transpose(x).unwrap();
    let tv = rows(g.value(t));
    for i in 0..3 {
        for j in 0..5 {
            assert_eq!(tv[j][i], m.get2(i, j));
        }
    }
}
