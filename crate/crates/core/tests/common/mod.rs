//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance runner.

use densecam::model::{build_model, DenseConfig, DenseModel};
use densecam::rng::{stream, uniform_f64};
use densecam::tensor::{
    finite_diff_check, finite_diff_check_coords, BatchNormOptions, Graph, Mode, RunningStats,
    Tensor, Var,
};
use densecam::train::ClassWeights;

/// Central-difference step, scaled by `max(1, |θ|)` inside the checker.
pub const STEP: f64 = 1e-5;
/// Step for the full network. Its 64×64 maps hold enough ReLU inputs near
/// zero that a 1e-5 step crosses kinks, adding error proportional to the
/// step; roundoff at 1e-6 is still near 1e-9.
pub const MODEL_STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

fn uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = stream(seed, "gradcheck");
    Tensor::from_fn(dims, |_| lo + (hi - lo) * uniform_f64(&mut rng))
}

/// Checks `dot(op(inputs), c)` for fixed random `c`, differentiating with
/// respect to every input value.
fn check_op(inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Tensor], track: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = op(&mut g, &vars);
        (g, vars, out)
    };
    let (g, _, out) = eval(&inputs, false);
    let n_out = g.value(out).len();
    let coefficients = uniform(&[n_out], -1.0, 1.0, n_out as u64).into_values();

    let (mut g, vars, out) = eval(&inputs, true);
    let loss = g.dot(out, &coefficients).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| g.grad(*v).unwrap().to_vec())
        .collect();

    let params: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
    let unflatten = |theta: &[f64]| {
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let v = theta[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.dims().to_vec(), v).unwrap()
            })
            .collect::<Vec<_>>()
    };
    finite_diff_check(
        |theta| {
            let (mut g, _, out) = eval(&unflatten(theta), false);
            let loss = g.dot(out, &coefficients).unwrap();
            g.value(loss).values()[0]
        },
        &params,
        &analytic,
        STEP,
    )
    .unwrap()
}

fn bn_options(mode: Mode) -> BatchNormOptions {
    BatchNormOptions {
        mode,
        ..BatchNormOptions::default()
    }
}

/// Maximum relative error of every differentiable graph operation, with
/// inputs drawn from `[-2, 2]`.
pub fn operation_errors() -> Vec<(&'static str, f64)> {
    let u = |dims: &[usize], seed| uniform(dims, -2.0, 2.0, seed);
    let eval_stats = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.4],
        populated: true,
    };
    vec![
        (
            "conv2d 3x3 stride 1 pad 1 with bias",
            check_op(
                vec![u(&[2, 2, 5, 5], 1), u(&[3, 2, 3, 3], 2), u(&[3], 3)],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap(),
            ),
        ),
        (
            "conv2d 3x3 stride 2 pad 0",
            check_op(vec![u(&[1, 2, 6, 7], 4), u(&[2, 2, 3, 3], 5)], |g, v| {
                g.conv2d(v[0], v[1], None, 2, 0).unwrap()
            }),
        ),
        (
            "conv2d 1x1",
            check_op(vec![u(&[2, 3, 4, 4], 6), u(&[2, 3, 1, 1], 7)], |g, v| {
                g.conv2d(v[0], v[1], None, 1, 0).unwrap()
            }),
        ),
        (
            "batchnorm train",
            check_op(
                vec![u(&[3, 2, 3, 3], 8), u(&[2], 9), u(&[2], 10)],
                |g, v| {
                    let mut stats = RunningStats::new(2);
                    g.batchnorm(v[0], v[1], v[2], &mut stats, bn_options(Mode::Train))
                        .unwrap()
                },
            ),
        ),
        (
            "batchnorm eval",
            check_op(
                vec![u(&[2, 2, 3, 3], 11), u(&[2], 12), u(&[2], 13)],
                |g, v| {
                    let mut stats = eval_stats.clone();
                    g.batchnorm(v[0], v[1], v[2], &mut stats, bn_options(Mode::Eval))
                        .unwrap()
                },
            ),
        ),
        (
            "relu",
            check_op(vec![u(&[2, 3, 4, 4], 14)], |g, v| g.relu(v[0])),
        ),
        (
            "sigmoid",
            check_op(vec![u(&[4, 5], 15)], |g, v| g.sigmoid(v[0])),
        ),
        (
            "avg_pool2d",
            check_op(vec![u(&[2, 2, 5, 5], 16)], |g, v| {
                g.avg_pool2d(v[0], 2, 2).unwrap()
            }),
        ),
        (
            "global_avg_pool",
            check_op(vec![u(&[2, 3, 3, 4], 17)], |g, v| {
                g.global_avg_pool(v[0]).unwrap()
            }),
        ),
        (
            "concat_channels",
            check_op(vec![u(&[2, 2, 3, 3], 18), u(&[2, 1, 3, 3], 19)], |g, v| {
                g.concat_channels(v[0], v[1]).unwrap()
            }),
        ),
        (
            "linear",
            check_op(vec![u(&[3, 5], 20), u(&[4, 5], 21), u(&[4], 22)], |g, v| {
                g.linear(v[0], v[1], v[2]).unwrap()
            }),
        ),
        (
            "bce_loss weighted",
            check_op(vec![uniform(&[3, 2], 0.05, 0.95, 23)], |g, v| {
                g.bce_loss(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 0.8, 0.2)
                    .unwrap()
            }),
        ),
        (
            "bce_loss unit",
            check_op(vec![uniform(&[2, 4], 0.05, 0.95, 24)], |g, v| {
                g.bce_loss(v[0], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0], 1.0, 1.0)
                    .unwrap()
            }),
        ),
        ("sum", check_op(vec![u(&[2, 3], 25)], |g, v| g.sum(v[0]))),
    ]
}

fn flat_params(model: &DenseModel) -> Vec<f64> {
    model
        .parameters()
        .iter()
        .flat_map(|p| p.value.values().to_vec())
        .collect()
}

fn load_params(model: &mut DenseModel, theta: &[f64]) {
    let mut offset = 0;
    for p in model.parameters_mut() {
        let n = p.value.len();
        p.value
            .values_mut()
            .copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
}

fn model_loss(
    model: &DenseModel,
    images: &Tensor,
    targets: &[f64],
    w: &ClassWeights,
    track: bool,
) -> (Graph, Vec<Var>, Var) {
    let mut graph = Graph::new();
    let mut stats = model.running_stats_snapshot();
    let traced = model
        .trace(&mut graph, images.clone(), Mode::Train, &mut stats, track)
        .unwrap();
    let loss = graph
        .bce_loss(traced.probabilities, targets, w.w_plus, w.w_minus)
        .unwrap();
    (graph, traced.params, loss)
}

/// Relative error of the full desk-scale network's loss gradient on
/// `per_tensor` sampled coordinates of every parameter tensor.
pub fn model_error(class_names: &[&str], w: ClassWeights, per_tensor: usize, seed: u64) -> f64 {
    let config = DenseConfig::default().with_classes(class_names);
    let mut model = build_model(&config, seed).unwrap();
    let batch = 3;
    let images = uniform(&[batch, 1, 64, 64], 0.0, 1.0, seed + 100);
    let mut rng = stream(seed, "targets");
    let targets: Vec<f64> = (0..batch * class_names.len())
        .map(|i| {
            if i % 3 == 0 || uniform_f64(&mut rng) < 0.4 {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let (mut graph, vars, loss) = model_loss(&model, &images, &targets, &w, true);
    graph.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| graph.grad(*v).unwrap().to_vec())
        .collect();

    let mut coords = Vec::new();
    let mut offset = 0;
    for p in model.parameters() {
        let n = p.value.len();
        for _ in 0..per_tensor.min(n) {
            coords.push(offset + (uniform_f64(&mut rng) * n as f64) as usize);
        }
        offset += n;
    }
    let theta = flat_params(&model);
    finite_diff_check_coords(
        |t| {
            load_params(&mut model, t);
            let (graph, _, loss) = model_loss(&model, &images, &targets, &w, false);
            graph.value(loss).values()[0]
        },
        &theta,
        &analytic,
        MODEL_STEP,
        &coords,
    )
    .unwrap()
}

/// The single-output weighted loss and the four-class multi-label loss.
pub fn model_errors(per_tensor: usize) -> Vec<(&'static str, f64)> {
    vec![
        (
            "desk model, weighted pneumonia loss",
            model_error(
                &["Pneumonia"],
                ClassWeights::from_counts(3, 7).unwrap(),
                per_tensor,
                1,
            ),
        ),
        (
            "desk model, multi-label loss",
            model_error(
                &["Pneumonia", "Effusion", "Nodule", "Mass"],
                ClassWeights::UNIT,
                per_tensor,
                2,
            ),
        ),
    ]
}
