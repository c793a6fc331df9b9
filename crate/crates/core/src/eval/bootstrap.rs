//! Percentile bootstrap over images.
//!
//! Resample `i` draws its `n` indices from
//! `indexed_stream(seed, NS_BOOTSTRAP, i)` with [`uniform_index`], so any
//! subset of resamples can be recomputed independently and in any order.

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, uniform_index, NS_BOOTSTRAP};

pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapResult {
    /// Statistic on the original images.
    pub estimate: f64,
    /// 2.5th percentile of the resampled statistics.
    pub ci_low: f64,
    /// 97.5th percentile.
    pub ci_high: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedDifference {
    pub result: BootstrapResult,
    /// Zero lies outside `[ci_low, ci_high]`.
    pub significant: bool,
}

/// Indices of resample `index` over `n` images.
pub fn resample_indices(n: usize, seed: u64, index: usize) -> Vec<usize> {
    let mut rng = indexed_stream(seed, NS_BOOTSTRAP, index as u64);
    (0..n).map(|_| uniform_index(&mut rng, n)).collect()
}

/// The statistic on each of `n_samples` resamples, in resample order.
pub fn resample_statistics(
    statistic: impl Fn(&[usize]) -> Result<f64>,
    n_images: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_sizes(n_images, n_samples)?;
    (0..n_samples)
        .map(|i| {
            let v = statistic(&resample_indices(n_images, seed, i))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!(
                    "statistic is {v} on bootstrap resample {i}"
                )))
            }
        })
        .collect()
}

/// Per-resample `stat_a − stat_b`, both evaluated on the same indices.
pub fn paired_differences(
    stat_a: impl Fn(&[usize]) -> Result<f64>,
    stat_b: impl Fn(&[usize]) -> Result<f64>,
    n_images: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    resample_statistics(
        |rows| Ok(stat_a(rows)? - stat_b(rows)?),
        n_images,
        n_samples,
        seed,
    )
}

fn check_sizes(n_images: usize, n_samples: usize) -> Result<()> {
    if n_images == 0 || n_samples == 0 {
        return Err(Error::Config(format!(
            "bootstrap needs images and samples, got {n_images} images and {n_samples} samples"
        )));
    }
    Ok(())
}

/// `q`-quantile of sorted values by linear interpolation between order
/// statistics at position `q · (n − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BootstrapResult {
    /// Interval from the resampled statistics (any order).
    pub fn from_samples(estimate: f64, mut samples: Vec<f64>, seed: u64) -> Self {
        samples.sort_by(f64::total_cmp);
        BootstrapResult {
            estimate,
            ci_low: percentile(&samples, 0.025),
            ci_high: percentile(&samples, 0.975),
            n_samples: samples.len(),
            seed,
        }
    }
}

impl PairedDifference {
    pub fn from_samples(estimate: f64, samples: Vec<f64>, seed: u64) -> Self {
        let result = BootstrapResult::from_samples(estimate, samples, seed);
        PairedDifference {
            significant: !(result.ci_low <= 0.0 && 0.0 <= result.ci_high),
            result,
        }
    }
}

/// 95% percentile interval of `statistic` over image resamples. The
/// statistic receives the (possibly repeated) image indices of a sample.
pub fn bootstrap_ci(
    statistic: impl Fn(&[usize]) -> Result<f64>,
    n_images: usize,
    n_samples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_sizes(n_images, n_samples)?;
    let estimate = statistic(&(0..n_images).collect::<Vec<_>>())?;
    let samples = resample_statistics(&statistic, n_images, n_samples, seed)?;
    Ok(BootstrapResult::from_samples(estimate, samples, seed))
}

/// Interval for `stat_a − stat_b` on shared resamples.
pub fn paired_difference_ci(
    stat_a: impl Fn(&[usize]) -> Result<f64>,
    stat_b: impl Fn(&[usize]) -> Result<f64>,
    n_images: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PairedDifference> {
    check_sizes(n_images, n_samples)?;
    let all: Vec<usize> = (0..n_images).collect();
    let estimate = stat_a(&all)? - stat_b(&all)?;
    let samples = paired_differences(&stat_a, &stat_b, n_images, n_samples, seed)?;
    Ok(PairedDifference::from_samples(estimate, samples, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.1), 1.4);
        assert_eq!(percentile(&[7.0], 0.975), 7.0);
    }

    #[test]
    fn single_image_has_zero_width() {
        let data = [0.3];
        let r = bootstrap_ci(
            |rows| Ok(rows.iter().map(|&i| data[i]).sum::<f64>()),
            1,
            50,
            3,
        )
        .unwrap();
        assert_eq!((r.ci_low, r.ci_high, r.estimate), (0.3, 0.3, 0.3));
    }

    #[test]
    fn non_finite_statistic_names_the_resample() {
        let err = bootstrap_ci(
            |rows| Ok(if rows[0] == 99 { f64::NAN } else { 0.0 }),
            100,
            500,
            1,
        )
        .map(|_| ())
        .unwrap_err();
        assert!(err.to_string().contains("resample"));
    }

    #[test]
    fn same_seed_same_result() {
        let data: Vec<f64> = (0..40).map(|i| (i % 3) as f64).collect();
        let stat =
            |rows: &[usize]| Ok(rows.iter().map(|&i| data[i]).sum::<f64>() / rows.len() as f64);
        assert_eq!(
            bootstrap_ci(stat, 40, 200, 9).unwrap(),
            bootstrap_ci(stat, 40, 200, 9).unwrap()
        );
        assert_ne!(
            bootstrap_ci(stat, 40, 200, 9).unwrap(),
            bootstrap_ci(stat, 40, 200, 10).unwrap()
        );
    }
}
