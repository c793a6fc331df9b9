//! Forward and backward kernels for the non-convolution operations.

use super::conv::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Smallest and largest probability fed to a logarithm in the BCE losses.
pub const PROB_CLAMP: f64 = 1e-12;

/// Per-channel running mean and (biased) variance used by batchnorm in
/// eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub populated: bool,
}

impl RunningStats {
    /// Mean 0, variance 1, ready for eval mode.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            populated: true,
        }
    }

    /// Stats that must see at least one train-mode batch before eval mode
    /// can use them.
    pub fn unpopulated(channels: usize) -> Self {
        RunningStats {
            populated: false,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) struct BatchNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<usize> {
    let (_, c, _, _) = input.dims4("batchnorm")?;
    for (what, t) in [("gamma", gamma), ("beta", beta)] {
        if t.dims() != [c] {
            return Err(Error::shape(format!(
                "batchnorm {what} dims {:?}, expected [{c}]",
                t.dims()
            )));
        }
    }
    if stats.channels() != c {
        return Err(Error::shape(format!(
            "batchnorm running stats have {} channels, input has {c}",
            stats.channels()
        )));
    }
    Ok(c)
}

pub(crate) fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    train: bool,
    momentum: f64,
    epsilon: f64,
) -> Result<(Tensor, BatchNormCache)> {
    if !(epsilon >= 0.0) || !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Usage(format!(
            "batchnorm needs epsilon >= 0 and momentum in [0, 1], got {epsilon}, {momentum}"
        )));
    }
    let c = bn_check(input, gamma, beta, stats)?;
    let (b, _, h, w) = input.dims4("batchnorm")?;
    let plane = h * w;
    let count = (b * plane) as f64;
    let (mean, var) = if train {
        if b * plane == 0 {
            return Err(Error::shape("batchnorm over an empty batch"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                let s = &input.values()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..b {
            for ch in 0..c {
                let s = &input.values()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                var[ch] += s.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        if stats.populated {
            for ch in 0..c {
                stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
            }
        } else {
            stats.mean.clone_from(&mean);
            stats.var.clone_from(&var);
            stats.populated = true;
        }
        (mean, var)
    } else {
        if !stats.populated {
            return Err(Error::State(
                "batchnorm in eval mode with unpopulated running stats".into(),
            ));
        }
        (stats.mean.clone(), stats.var.clone())
    };
    let mut inv_std = Vec::with_capacity(c);
    for (ch, v) in var.iter().enumerate() {
        let denom = (v + epsilon).sqrt();
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!(
                "batchnorm channel {ch} has zero variance and epsilon 0"
            )));
        }
        inv_std.push(1.0 / denom);
    }
    let mut normalized = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    for n in 0..b {
        for ch in 0..c {
            let range = (n * c + ch) * plane..(n * c + ch + 1) * plane;
            let (g, bt) = (gamma.values()[ch], beta.values()[ch]);
            for i in range {
                let xh = (input.values()[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.dims().to_vec(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            train,
        },
    ))
}

/// Returns (d_input, d_gamma, d_beta).
pub(crate) fn batchnorm_backward(
    dims: &[usize],
    gamma: &Tensor,
    cache: &BatchNormCache,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, plane) = (dims[0], dims[1], dims[2] * dims[3]);
    let count = (b * plane) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                d_beta[ch] += grad_out[i];
                d_gamma[ch] += grad_out[i] * cache.normalized[i];
            }
        }
    }
    let mut d_input = vec![0.0; grad_out.len()];
    for n in 0..b {
        for ch in 0..c {
            let g = gamma.values()[ch];
            let scale = g * cache.inv_std[ch];
            for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                d_input[i] = if cache.train {
                    // d_beta and d_gamma are exactly the sums of dy and dy * x_hat.
                    scale * (grad_out[i] - (d_beta[ch] + cache.normalized[i] * d_gamma[ch]) / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Logistic function, kept strictly inside (0, 1): beyond |x| ≈ 37 the exact
/// value rounds to 1 (or underflows), so it is pinned to the nearest
/// representable interior point.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn pool_geometry(input: &Tensor, window: usize, stride: usize) -> Result<[usize; 6]> {
    let (b, c, h, w) = input.dims4("avg_pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::shape(
            "avg_pool2d window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "avg_pool2d window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    Ok([
        b,
        c,
        h,
        w,
        (h - window) / stride + 1,
        (w - window) / stride + 1,
    ])
}

pub(crate) fn avg_pool_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [b, c, h, w, oh, ow] = pool_geometry(input, window, stride)?;
    let scale = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &input.values()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    acc += src[row..row + window].iter().sum::<f64>();
                }
                out[(plane * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub(crate) fn avg_pool_backward(
    input_dims: &[usize],
    window: usize,
    stride: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let (b, c, h, w) = (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let scale = 1.0 / (window * window) as f64;
    let mut d = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(plane * oh + oy) * ow + ox] * scale;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    dst[row..row + window].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    d
}

pub(crate) fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool over an empty plane"));
    }
    let plane = h * w;
    let values = input
        .values()
        .chunks(plane)
        .map(|s| s.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![b, c], values)
}

pub(crate) fn global_avg_pool_backward(input_dims: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let plane = input_dims[2] * input_dims[3];
    grad_out
        .iter()
        .flat_map(|g| std::iter::repeat_n(g / plane as f64, plane))
        .collect()
}

pub(crate) fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels batch/spatial mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let plane = ha * wa;
    let mut values = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        values.extend_from_slice(&a.values()[n * ca * plane..(n + 1) * ca * plane]);
        values.extend_from_slice(&b.values()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], values)
}

/// Splits an output gradient into the two operands' gradients.
pub(crate) fn concat_backward(
    a_dims: &[usize],
    b_dims: &[usize],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (n, ca, cb, plane) = (a_dims[0], a_dims[1], b_dims[1], a_dims[2] * a_dims[3]);
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for chunk in grad_out.chunks((ca + cb) * plane).take(n) {
        da.extend_from_slice(&chunk[..ca * plane]);
        db.extend_from_slice(&chunk[ca * plane..]);
    }
    (da, db)
}

pub(crate) fn linear_check(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize)> {
    let (b, f) = match input.dims() {
        [b, f] => (*b, *f),
        d => {
            return Err(Error::shape(format!(
                "linear input must be [B, F], got {d:?}"
            )))
        }
    };
    let (k, fw) = match weights.dims() {
        [k, f] => (*k, *f),
        d => {
            return Err(Error::shape(format!(
                "linear weights must be [K, F], got {d:?}"
            )))
        }
    };
    if fw != f || bias.dims() != [k] {
        return Err(Error::shape(format!(
            "linear shape mismatch: input {:?}, weights {:?}, bias {:?}",
            input.dims(),
            weights.dims(),
            bias.dims()
        )));
    }
    Ok((b, f, k))
}

pub(crate) fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f, k) = linear_check(input, weights, bias)?;
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.values().iter().copied()).collect();
    gemm(
        b,
        f,
        k,
        Mat::n(input.values()),
        Mat::t(weights.values()),
        1.0,
        &mut out,
    );
    Tensor::new(vec![b, k], out)
}

/// Element-wise BCE terms `-w_pos y ln p - w_neg (1 - y) ln(1 - p)` with `p`
/// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; returns (loss, dloss/dp).
pub(crate) fn bce_term(p: f64, y: f64, w_pos: f64, w_neg: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -w_pos * y * pc.ln() - w_neg * (1.0 - y) * (1.0 - pc).ln();
    let grad = -w_pos * y / pc + w_neg * (1.0 - y) / (1.0 - pc);
    (loss, grad)
}
