use approx::assert_abs_diff_eq;
use densecam::rng::{indexed_stream, uniform_f64};
use densecam::tensor::{
    finite_diff_check, Activation, BatchNormOptions, Graph, Mode, RunningStats, Tensor, Var,
};
use densecam::Error;
use proptest::prelude::*;

fn t(dims: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(dims.to_vec(), values.to_vec()).unwrap()
}

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = indexed_stream(seed, "tensor-test", 0);
    Tensor::from_fn(dims, |_| 4.0 * uniform_f64(&mut rng) - 2.0)
}

fn train_bn() -> BatchNormOptions {
    BatchNormOptions {
        mode: Mode::Train,
        momentum: 0.9,
        epsilon: 1e-5,
    }
}

/// Max relative error between backprop and central differences for
/// `Σ c_i out_i`, with random coefficients `c`, over every input coordinate.
fn grad_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars);
    let coeffs = random(g.value(out).dims(), 99).into_values();
    let loss = g.dot(out, &coeffs).unwrap();
    g.backward(loss).unwrap();
    let params: Vec<f64> = inputs.iter().flat_map(|x| x.values().to_vec()).collect();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| g.grad_tensor(v).unwrap().into_values())
        .collect();
    let rebuild = |theta: &[f64]| {
        let mut g = Graph::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| {
                let values = theta[offset..offset + x.len()].to_vec();
                offset += x.len();
                g.param(Tensor::new(x.dims().to_vec(), values).unwrap())
            })
            .collect();
        let out = build(&mut g, &vars);
        let loss = g.dot(out, &coeffs).unwrap();
        g.value(loss).values()[0]
    };
    finite_diff_check(rebuild, &params, &analytic, 1e-5).unwrap()
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &t(&[1, 1, 1, 1], &[10.0]));

    let input = random(&[2, 3, 5, 4], 1);
    let x = g.constant(input.clone());
    let id = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| {
        if i % 4 == 0 {
            1.0
        } else {
            0.0
        }
    }));
    let y = g.conv2d(x, id, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);

    let zero = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let y = g.conv2d(x, zero, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[2, 2, 5, 4]));
}

#[test]
fn conv2d_channel_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape(_)));
    assert!(
        msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"),
        "{msg}"
    );
}

#[test]
fn batchnorm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    let opts = BatchNormOptions {
        epsilon: 0.0,
        ..train_bn()
    };
    let y = g.batchnorm(x, gamma, beta, &mut stats, opts).unwrap();
    for (a, e) in g
        .value(y)
        .values()
        .iter()
        .zip([-1.3416, -0.4472, 0.4472, 1.3416])
    {
        assert_abs_diff_eq!(*a, e, epsilon = 1e-4);
    }
    // Running stats moved 10% toward the batch statistics.
    assert_abs_diff_eq!(stats.mean[0], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(stats.var[0], 0.9 + 0.125, epsilon = 1e-12);

    let c = g.constant(Tensor::full(&[2, 1, 3, 3], 7.0));
    let five = g.constant(Tensor::full(&[1], 5.0));
    let y = g
        .batchnorm(c, gamma, five, &mut RunningStats::new(1), train_bn())
        .unwrap();
    assert!(g.value(y).values().iter().all(|v| (v - 5.0).abs() < 1e-9));

    let r = g.constant(random(&[2, 1, 3, 3], 4));
    let zero = g.constant(Tensor::zeros(&[1]));
    let minus = g.constant(Tensor::full(&[1], -1.5));
    let y = g
        .batchnorm(r, zero, minus, &mut RunningStats::new(1), train_bn())
        .unwrap();
    assert!(g.value(y).values().iter().all(|&v| v == -1.5));
}

#[test]
fn batchnorm_eval_requires_populated_stats() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 2, 2, 2], 5));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let eval = BatchNormOptions {
        mode: Mode::Eval,
        ..train_bn()
    };
    let mut stats = RunningStats::unpopulated(2);
    assert!(matches!(
        g.batchnorm(x, gamma, beta, &mut stats, eval),
        Err(Error::State(_))
    ));
    g.batchnorm(x, gamma, beta, &mut stats, train_bn()).unwrap();
    assert!(stats.populated);
    let before = stats.clone();
    g.batchnorm(x, gamma, beta, &mut stats, eval).unwrap();
    assert_eq!(stats, before, "eval mode must not touch running stats");
}

#[test]
fn batchnorm_train_output_is_standardized() {
    for seed in 0..10 {
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4, 5, 5], seed));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let eps = 1e-5;
        let mut stats = RunningStats::new(4);
        let y = g.batchnorm(x, gamma, beta, &mut stats, train_bn()).unwrap();
        let xs = g.value(x).clone();
        let ys = g.value(y);
        for c in 0..4 {
            let pick = |t: &Tensor| -> Vec<f64> {
                (0..3)
                    .flat_map(|n| t.values()[(n * 4 + c) * 25..(n * 4 + c + 1) * 25].to_vec())
                    .collect()
            };
            let (xc, yc) = (pick(&xs), pick(ys));
            let n = yc.len() as f64;
            let mean = yc.iter().sum::<f64>() / n;
            let var = yc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let xm = xc.iter().sum::<f64>() / n;
            let xv = xc.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-8);
            assert!((var - xv / (xv + eps)).abs() < 1e-6);
        }
    }
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 3f64.ln()]));
    let r = g.activation(x, Activation::Relu);
    let s = g.activation(x, Activation::Sigmoid);
    assert_eq!(g.value(r).values()[0], 0.0);
    assert_eq!(g.value(s).values()[1], 0.5);
    assert_abs_diff_eq!(g.value(s).values()[2], 0.75, epsilon = 1e-15);
    let wide = g.constant(t(&[4], &[-40.0, -5.0, 5.0, 30.0]));
    let s = g.sigmoid(wide);
    assert!(g.value(s).values().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(p).values(), &[2.5]);
    let gp = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(gp), &t(&[1, 1], &[2.5]));

    let c = g.constant(Tensor::full(&[2, 3, 6, 6], 1.25));
    let p = g.avg_pool2d(c, 2, 2).unwrap();
    assert!(g.value(p).values().iter().all(|&v| v == 1.25));

    let r = random(&[2, 2, 3, 3], 8);
    let rv = g.constant(r.clone());
    let p = g.avg_pool2d(rv, 1, 1).unwrap();
    assert_eq!(g.value(p), &r);

    let single = g.constant(t(&[1, 2, 1, 1], &[3.0, -1.0]));
    let gp = g.global_avg_pool(single).unwrap();
    assert_eq!(g.value(gp).values(), &[3.0, -1.0]);
    let z = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let gp = g.global_avg_pool(z).unwrap();
    assert_eq!(g.value(gp).values(), &[0.0]);

    let small = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(g.avg_pool2d(small, 3, 1), Err(Error::Shape(_))));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = random(&[2, 2, 3, 3], 10);
    let b = random(&[2, 3, 3, 3], 11);
    let av = g.param(a.clone());
    let bv = g.constant(b.clone());
    let c = g.concat_channels(av, bv).unwrap();
    assert_eq!(g.value(c).dims(), &[2, 5, 3, 3]);
    assert_eq!(g.value(c).slice_channels(0..2).unwrap(), a);
    assert_eq!(g.value(c).slice_channels(2..5).unwrap(), b);

    let empty = g.constant(Tensor::zeros(&[2, 0, 3, 3]));
    let same = g.concat_channels(av, empty).unwrap();
    assert_eq!(g.value(same), &a);

    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(av).unwrap().iter().all(|&v| v == 1.0));
    let err = grad_error(&[a.clone(), b.clone()], |g, v| {
        g.concat_channels(v[0], v[1]).unwrap()
    });
    assert!(err < 1e-4);

    let mismatched = g.constant(Tensor::zeros(&[2, 1, 3, 4]));
    assert!(matches!(
        g.concat_channels(av, mismatched),
        Err(Error::Shape(_))
    ));
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[1, 2], &[0.5, 0.5]));
    let b = g.constant(t(&[1], &[1.0]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).values(), &[2.5]);

    let input = random(&[3, 4], 12);
    let xi = g.constant(input.clone());
    let eye = g.constant(Tensor::from_fn(
        &[4, 4],
        |i| if i % 5 == 0 { 1.0 } else { 0.0 },
    ));
    let zb = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(xi, eye, zb).unwrap();
    assert_eq!(g.value(y), &input);

    let zw = g.constant(Tensor::zeros(&[2, 4]));
    let bias = g.constant(t(&[2], &[0.3, -0.7]));
    let y = g.linear(xi, zw, bias).unwrap();
    for row in g.value(y).values().chunks(2) {
        assert_eq!(row, &[0.3, -0.7]);
    }
    assert!(matches!(g.linear(xi, w, b), Err(Error::Shape(_))));
}

#[test]
fn backprop_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(w);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.25]);

    let mut g = Graph::new();
    let p = g.param(random(&[3], 1));
    let c = g.constant(Tensor::scalar(2.0));
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    assert_eq!(g.grad_tensor(p).unwrap(), Tensor::zeros(&[3]));

    let v = g.sum(p);
    let vec = g.sigmoid(p);
    assert!(matches!(g.backward(vec), Err(Error::Usage(_))));
    g.backward(v).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0; 3]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 2], &[0.3, -0.2]));
    let both = g.concat_channels(x, x).unwrap();
    let loss = g.sum(both);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.backward(loss).unwrap();
    assert_eq!(
        g.grad(x).unwrap(),
        &[4.0, 4.0],
        "leaf grads accumulate until zeroed"
    );
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn every_operation_passes_finite_differences() {
    for seed in 0..3 {
        let x = random(&[2, 3, 5, 5], seed);
        let k = random(&[4, 3, 3, 3], seed + 100);
        let b = random(&[4], seed + 200);
        for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
            let err = grad_error(&[x.clone(), k.clone(), b.clone()], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
            });
            assert!(err < 1e-4, "conv2d stride {stride} pad {pad}: {err}");
        }
        let pointwise = random(&[2, 3, 1, 1], seed + 300);
        let err = grad_error(&[x.clone(), pointwise], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 0).unwrap()
        });
        assert!(err < 1e-4, "pointwise conv: {err}");

        let gamma = random(&[3], seed + 400);
        let beta = random(&[3], seed + 500);
        for mode in [Mode::Train, Mode::Eval] {
            let err = grad_error(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let mut stats = RunningStats::new(3);
                stats.var = vec![0.5, 1.5, 2.0];
                let opts = BatchNormOptions { mode, ..train_bn() };
                g.batchnorm(v[0], v[1], v[2], &mut stats, opts).unwrap()
            });
            assert!(err < 1e-4, "batchnorm {mode:?}: {err}");
        }

        for kind in [Activation::Relu, Activation::Sigmoid] {
            let err = grad_error(&[x.clone()], |g, v| g.activation(v[0], kind));
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
        let err = grad_error(&[x.clone()], |g, v| g.avg_pool2d(v[0], 2, 2).unwrap());
        assert!(err < 1e-4, "avg_pool2d: {err}");
        let err = grad_error(&[x.clone()], |g, v| g.avg_pool2d(v[0], 3, 1).unwrap());
        assert!(err < 1e-4, "avg_pool2d overlapping: {err}");
        let err = grad_error(&[x.clone()], |g, v| g.global_avg_pool(v[0]).unwrap());
        assert!(err < 1e-4, "global_avg_pool: {err}");

        let inp = random(&[3, 5], seed + 600);
        let w = random(&[2, 5], seed + 700);
        let lb = random(&[2], seed + 800);
        let err = grad_error(&[inp, w, lb], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
        assert!(err < 1e-4, "linear: {err}");

        let logits = random(&[4, 3], seed + 900);
        let targets: Vec<f64> = (0..12)
            .map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64)
            .collect();
        let err = grad_error(&[logits], |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce_loss(p, &targets, 0.7, 0.3).unwrap()
        });
        assert!(err < 1e-4, "bce: {err}");
    }
}

#[test]
fn backprop_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 2, 6, 6], 3));
        let k = g.param(random(&[3, 2, 3, 3], 4));
        let gamma = g.param(Tensor::full(&[3], 1.0));
        let beta = g.param(Tensor::zeros(&[3]));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let y = g
            .batchnorm(y, gamma, beta, &mut RunningStats::new(3), train_bn())
            .unwrap();
        let y = g.relu(y);
        let y = g.global_avg_pool(y).unwrap();
        let p = g.sigmoid(y);
        let loss = g
            .bce_loss(p, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0], 1.0, 1.0)
            .unwrap();
        g.backward(loss).unwrap();
        [k, gamma, beta].map(|v| g.grad(v).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_output_dims_follow_floor_formula(
        h in 1usize..12, w in 1usize..12, kh in 1usize..5, kw in 1usize..5,
        stride in 1usize..4, padding in 0usize..3, cin in 1usize..3, cout in 1usize..3,
    ) {
        prop_assume!(h + 2 * padding >= kh && w + 2 * padding >= kw);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, cin, h, w]));
        let k = g.constant(Tensor::zeros(&[cout, cin, kh, kw]));
        let y = g.conv2d(x, k, None, stride, padding).unwrap();
        let expected = [1, cout, (h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1];
        prop_assert_eq!(g.value(y).dims(), &expected[..]);
    }

    #[test]
    fn concat_then_slice_recovers_operands(c1 in 0usize..4, c2 in 0usize..4, seed in 0u64..1000) {
        let a = random(&[2, c1, 2, 3], seed);
        let b = random(&[2, c2, 2, 3], seed + 1);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat_channels(av, bv).unwrap();
        prop_assert_eq!(g.value(c).slice_channels(0..c1).unwrap(), a);
        prop_assert_eq!(g.value(c).slice_channels(c1..c1 + c2).unwrap(), b);
    }

    #[test]
    fn activation_ranges(values in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n], values).unwrap());
        let r = g.relu(x);
        let s = g.sigmoid(x);
        prop_assert!(g.value(r).values().iter().all(|&v| v >= 0.0));
        prop_assert!(g.value(s).values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
