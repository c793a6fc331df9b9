//! Binary cross-entropy losses and prevalence-based class weights.

use crate::error::{Error, Result};
use crate::tensor::PROB_CLAMP;

/// Term weights for the single-output task: positives are weighted by the
/// negative fraction and vice versa.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_count: usize,
    pub n_count: usize,
}

impl ClassWeights {
    /// Unit weights on both terms.
    pub const UNIT: ClassWeights = ClassWeights {
        w_plus: 1.0,
        w_minus: 1.0,
        p_count: 0,
        n_count: 0,
    };

    pub fn from_counts(p_count: usize, n_count: usize) -> Result<Self> {
        if p_count == 0 || n_count == 0 {
            return Err(Error::DegenerateClass {
                positives: p_count,
                negatives: n_count,
            });
        }
        let total = (p_count + n_count) as f64;
        Ok(ClassWeights {
            w_plus: n_count as f64 / total,
            w_minus: p_count as f64 / total,
            p_count,
            n_count,
        })
    }
}

/// Counts positives (`y > 0.5`) and negatives in `labels`.
pub fn class_weights(labels: &[f64]) -> Result<ClassWeights> {
    let p = labels.iter().filter(|&&y| y > 0.5).count();
    ClassWeights::from_counts(p, labels.len() - p)
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−w₊ y ln p − w₋ (1 − y) ln(1 − p)` with `p` clamped away from 0 and 1.
pub fn weighted_bce(p: f64, y: f64, w: &ClassWeights) -> f64 {
    let p = clamp(p);
    -w.w_plus * y * p.ln() - w.w_minus * (1.0 - y) * (1.0 - p).ln()
}

/// Mean of [`weighted_bce`] over a batch.
pub fn weighted_bce_batch(p: &[f64], y: &[f64], w: &ClassWeights) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape(format!(
            "weighted_bce_batch needs equal non-empty lengths, got {} and {}",
            p.len(),
            y.len()
        )));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| weighted_bce(p, y, w))
        .sum::<f64>()
        / p.len() as f64)
}

/// Sum over classes of unweighted binary cross-entropy.
pub fn multilabel_bce(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape(format!(
            "multilabel_bce has {} probabilities but {} labels",
            p.len(),
            y.len()
        )));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp(p);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_from_counts() {
        let w = class_weights(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(w.w_plus, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w.w_minus, 0.2, epsilon = 1e-15);
        let even = class_weights(&[1.0, 0.0]).unwrap();
        assert_eq!((even.w_plus, even.w_minus), (0.5, 0.5));
        assert!(matches!(
            class_weights(&[1.0, 1.0]),
            Err(Error::DegenerateClass {
                positives: 2,
                negatives: 0
            })
        ));
    }

    #[test]
    fn weighted_reference_values() {
        let w = ClassWeights::from_counts(2, 8).unwrap();
        assert_abs_diff_eq!(weighted_bce(0.5, 1.0, &w), 0.8 * 2f64.ln(), epsilon = 1e-15);
        assert!(weighted_bce(1.0, 1.0, &w) < 1e-11);
        let half = ClassWeights::from_counts(5, 5).unwrap();
        for p in [0.01, 0.3, 0.77] {
            assert_abs_diff_eq!(
                weighted_bce(p, 1.0, &half),
                weighted_bce(1.0 - p, 0.0, &half),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn multilabel_reference_values() {
        assert_abs_diff_eq!(
            multilabel_bce(&[0.5; 14], &[1.0; 14]).unwrap(),
            14.0 * 2f64.ln(),
            epsilon = 1e-12
        );
        let mut p = [0.1; 14];
        p[0] = 0.9;
        let mut y = [0.0; 14];
        y[0] = 1.0;
        assert_abs_diff_eq!(
            multilabel_bce(&p, &y).unwrap(),
            -14.0 * 0.9f64.ln(),
            epsilon = 1e-12
        );
        assert!(multilabel_bce(&[0.5; 3], &[1.0; 2]).is_err());
    }
}
