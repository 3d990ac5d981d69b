use biaxial::gradcheck::{self, Tolerance};
use biaxial::{Graph, Rng, Tensor, TensorError};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::eye(3));
    let b = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.0, 7.0]));
    let out = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(out), g.value(b));

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let out = g.matmul(a, c).unwrap();
    assert_eq!(g.value(out).data(), &[17.0, 39.0]);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let any = g.constant(t(&[3, 2], &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0]));
    let out = g.matmul(z, any).unwrap();
    assert_eq!(g.value(out).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!(close(*v, 1.0 / 3.0, 1e-15));
    }

    let x = g.constant(Tensor::from_vec(vec![2.0, 0.0]));
    let y = g.softmax(x).unwrap();
    let e2 = 2f64.exp();
    let want = [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)];
    assert!(close(g.value(y).data()[0], want[0], 1e-15));
    assert!(close(g.value(y).data()[1], want[1], 1e-15));
    assert!(close(want[0], 0.8808, 1e-4));

    let base = vec![0.3, -1.2, 4.0, 0.0];
    let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
    let (a, b) = (g.constant(Tensor::from_vec(base)), g.constant(Tensor::from_vec(shifted)));
    let (ya, yb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
    for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
        assert!(close(*p, *q, 1e-12));
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
    assert!(matches!(g.softmax(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 1.0, 10.0]));
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    // Φ(1) = 0.841344746068543
    assert!(close(v[1], 0.841_344_746_068_543, 1e-12));
    assert!(close(v[2], 10.0, 1e-6));
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 5], 3.25));
    let y = g.instance_norm(c, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let y = g.instance_norm(x, 0.0).unwrap();
    let (m, v) = moments(g.value(y).data());
    assert!(close(m, 0.0, 1e-9) && close(v, 1.0, 1e-9));
    assert!(close(g.value(y).data()[0], -(1.5f64).sqrt(), 1e-12));

    // With eps the output variance is var/(var+eps) exactly.
    let y = g.instance_norm(x, 1e-5).unwrap();
    let (_, v) = moments(g.value(y).data());
    assert!(close(v, (2.0 / 3.0) / (2.0 / 3.0 + 1e-5), 1e-12));
}

#[test]
fn instance_norm_zero_mean_on_random_input() {
    let mut rng = Rng::new(11);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, 4, 50], 2.0, &mut rng));
    let y = g.instance_norm(x, 1e-5).unwrap();
    for row in g.value(y).data().chunks(50) {
        let (m, _) = moments(row);
        assert!(m.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_examples() {
    let mut rng = Rng::new(5);
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[6]));
    let zero = g.constant(Tensor::zeros(&[6]));
    let c = g.constant(Tensor::full(&[3, 6], -2.0));
    let y = g.layer_norm(c, gain, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let x = g.constant(Tensor::randn(&[4, 6], 3.0, &mut rng));
    let y = g.layer_norm(x, gain, zero, 1e-5).unwrap();
    for row in g.value(y).data().chunks(6) {
        let (m, v) = moments(row);
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }

    let gz = g.constant(Tensor::zeros(&[6]));
    let bias_t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let bias = g.constant(bias_t.clone());
    let y = g.layer_norm(x, gz, bias, 1e-5).unwrap();
    for row in g.value(y).data().chunks(6) {
        assert_eq!(row, bias_t.data());
    }
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let one = g.constant(t(&[1, 1, 1], &[1.0]));
    let y = g.conv1d(x, one, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let pair = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = g.conv1d(x, pair, 2, 0).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);

    let long = g.constant(Tensor::zeros(&[1, 1, 30_000]));
    let k = g.constant(Tensor::zeros(&[1, 1, 10]));
    let y = g.conv1d(long, k, 5, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 5999]);

    let short = g.constant(Tensor::zeros(&[1, 1, 3]));
    let big = g.constant(Tensor::zeros(&[1, 1, 5]));
    assert!(matches!(g.conv1d(short, big, 1, 0), Err(TensorError::EmptyOutput { .. })));
    // Padding makes it feasible.
    let padded = g.conv1d(short, big, 1, 1).unwrap();
    assert_eq!(g.shape(padded), &[1, 1, 1]);
}

#[test]
fn backward_examples() {
    let w = Tensor::from_vec(vec![1.0, 2.0]).with_grad();
    let mut g = Graph::new();
    let wv = g.leaf(&w);
    let s = g.sum(wv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(wv).unwrap(), &[1.0, 1.0]);

    let mut g = Graph::new();
    let wv = g.leaf(&w);
    let sq = g.square(wv);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(wv).unwrap(), &[2.0, 4.0]);

    // Gradients accumulate into the source tensor until zeroed.
    let mut w = w;
    g.accumulate_into(wv, &mut w);
    g.accumulate_into(wv, &mut w);
    assert_eq!(w.grad().unwrap(), &[4.0, 8.0]);
    w.zero_grad();
    assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let v = g.leaf(&w);
    assert!(matches!(g.backward(v), Err(TensorError::NotScalar(_))));
}

#[test]
fn untracked_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let w = g.leaf(&Tensor::from_vec(vec![3.0, 4.0]).with_grad());
    let p = g.mul(c, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(vec![0.5]));
    let l = g.bce(p, &[1.0]).unwrap();
    assert!(close(g.value(l).item().unwrap(), std::f64::consts::LN_2, 1e-15));

    let p = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    let l = g.bce(p, &[1.0, 0.0]).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-10);

    let p = g.constant(Tensor::from_vec(vec![0.9, 0.1]));
    let l = g.bce(p, &[1.0, 0.0]).unwrap();
    let want = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
    assert!(close(g.value(l).item().unwrap(), want, 1e-15));
    assert!(close(want, 0.10536, 1e-5));
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&mut Graph, &[biaxial::Var]) -> biaxial::tensor::Result<biaxial::Var>) {
    let report = gradcheck::check(inputs, Tolerance::default(), f).unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
    assert!(report.checked > 0);
}

/// Weighted sum with fixed pseudo-random weights, so that every output
/// element carries a distinct upstream gradient.
fn probe(g: &mut Graph, v: biaxial::Var) -> biaxial::tensor::Result<biaxial::Var> {
    let n = g.value(v).len();
    let shape = g.shape(v).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.4).collect();
    let wv = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    let mut rng = Rng::new(2024);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    assert_grads(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y)
    });

    let x = random(&[2, 3, 4], &mut rng);
    let y = random(&[2, 5, 4], &mut rng);
    assert_grads(&[x.clone(), y.clone()], |g, v| {
        let o = g.bmm(v[0], v[1], true)?;
        probe(g, o)
    });
    let z = random(&[2, 4, 3], &mut rng);
    assert_grads(&[x.clone(), z], |g, v| {
        let o = g.bmm(v[0], v[1], false)?;
        probe(g, o)
    });

    assert_grads(&[random(&[3, 5], &mut rng)], |g, v| {
        let s = g.softmax(v[0])?;
        probe(g, s)
    });
    assert_grads(&[random(&[10], &mut rng)], |g, v| {
        let s = g.gelu(v[0]);
        probe(g, s)
    });
    assert_grads(&[random(&[2, 7], &mut rng)], |g, v| {
        let s = g.instance_norm(v[0], 1e-5)?;
        probe(g, s)
    });
    assert_grads(
        &[random(&[3, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)],
        |g, v| {
            let s = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, s)
        },
    );
    assert_grads(&[random(&[2, 2, 9], &mut rng), random(&[3, 2, 3], &mut rng)], |g, v| {
        let s = g.conv1d(v[0], v[1], 2, 1)?;
        probe(g, s)
    });
    assert_grads(&[random(&[2, 3, 4], &mut rng)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        probe(g, p)
    });
    assert_grads(&[random(&[2, 3], &mut rng), random(&[2, 1], &mut rng)], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        probe(g, c)
    });
    assert_grads(&[random(&[2, 3], &mut rng), random(&[3], &mut rng)], |g, v| {
        let c = g.add_broadcast(v[0], v[1])?;
        let b = g.broadcast_leading(v[1], 2)?;
        let s = g.sub(c, b)?;
        let m = g.mul(s, v[0])?;
        probe(g, m)
    });
    assert_grads(&[random(&[3, 2], &mut rng)], |g, v| {
        let s = g.select(v[0], 1, 1)?;
        let r = g.reshape(s, &[3, 1])?;
        let sc = g.scale(r, -1.5);
        let m = g.mask_mul(sc, vec![1.0, 0.0, 2.0])?;
        let q = g.square(m);
        Ok(g.mean(q))
    });
    assert_grads(&[Tensor::from_vec(vec![0.2, 0.7, 0.45])], |g, v| g.bce(v[0], &[1.0, 0.0, 1.0]));
}

#[test]
fn composed_graph_matches_finite_differences() {
    let mut rng = Rng::new(99);
    let x = random(&[2, 3, 4], &mut rng);
    let wq = random(&[4, 4], &mut rng);
    let wk = random(&[4, 4], &mut rng);
    let wv = random(&[4, 4], &mut rng);
    assert_grads(&[x, wq, wk, wv], |g, v| {
        let x2 = g.reshape(v[0], &[6, 4])?;
        let q = g.matmul(x2, v[1])?;
        let k = g.matmul(x2, v[2])?;
        let val = g.matmul(x2, v[3])?;
        let q = g.reshape(q, &[2, 3, 4])?;
        let k = g.reshape(k, &[2, 3, 4])?;
        let val = g.reshape(val, &[2, 3, 4])?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, 0.5);
        let p = g.softmax(s)?;
        let o = g.bmm(p, val, false)?;
        let o = g.gelu(o);
        probe(g, o)
    });
}

#[test]
fn same_seed_same_outputs() {
    let run = || {
        let mut rng = Rng::new(31);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[8, 3], 1.0, &mut rng));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv1d_length_follows_formula(
        n in 1usize..60, h in 1usize..9, s in 1usize..6, p in 0usize..4, seed in 0u64..1000
    ) {
        prop_assume!(n + 2 * p >= h);
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 2, n], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[3, 2, h], 1.0, &mut rng));
        let y = g.conv1d(x, w, s, p).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 3, (n + 2 * p - h) / s + 1]);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in 0u64..1000
    ) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[rows, cols], scale, &mut rng));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn random_small_graphs_match_finite_differences(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..10_000
    ) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let gain = Tensor::randn(&[n], 1.0, &mut rng);
        let bias = Tensor::randn(&[n], 1.0, &mut rng);
        let report = gradcheck::check(&[a, b, gain, bias], Tolerance::default(), |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.layer_norm(y, v[2], v[3], 1e-5)?;
            let y = g.gelu(y);
            let y = g.softmax(y)?;
            probe(g, y)
        }).unwrap();
        prop_assert!(report.passed(), "{:?}", report.mismatches);
    }
}
