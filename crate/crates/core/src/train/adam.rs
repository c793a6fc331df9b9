use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_tensors(params: &[Tensor]) -> Self {
        AdamState::new(params.iter().map(Tensor::len))
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m ← β₁ m + (1 − β₁) g
/// v ← β₂ v + (1 − β₂) g²
/// θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
/// ```
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adam_step got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::shape(format!(
                "adam_step parameter {i} has dims {:?}, gradient {:?}",
                p.dims(),
                g.dims()
            )));
        }
    }
    adam_update(
        params
            .iter_mut()
            .map(Tensor::values_mut)
            .zip(grads.iter().map(Tensor::values)),
        state,
        cfg,
    )
}

/// [`adam_step`] over raw `(values, gradient)` pairs.
pub(crate) fn adam_update<'a>(
    pairs: impl ExactSizeIterator<Item = (&'a mut [f64], &'a [f64])>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if pairs.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam state tracks {} parameters, got {}",
            state.m.len(),
            pairs.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((theta, g), (m, v)) in pairs.zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        if theta.len() != m.len() || g.len() != m.len() {
            return Err(Error::shape("adam state does not match parameter sizes"));
        }
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
