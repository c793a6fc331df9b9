//! F1, multi-rater agreement, AUROC and thresholding.

use crate::error::{Error, Result};

/// An F1 value and whether it came from the no-positives convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Score {
    pub value: f64,
    /// Neither vector had a positive; `value` is 1.0 by convention.
    pub degenerate: bool,
}

/// `2TP / (2TP + FP + FN)`. With no positives in either vector the score
/// is 1.0 and flagged degenerate.
pub fn f1(pred: &[bool], truth: &[bool]) -> Result<F1Score> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "f1 got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        F1Score {
            value: 1.0,
            degenerate: true,
        }
    } else {
        F1Score {
            value: (2 * tp) as f64 / denom as f64,
            degenerate: false,
        }
    })
}

/// Binary labels from several raters over the same images.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterMatrix {
    pub image_ids: Vec<String>,
    pub rater_names: Vec<String>,
    /// `labels[r][i]` is rater `r`'s label for image `i`.
    pub labels: Vec<Vec<bool>>,
    /// Index of the rater that is the model, if any.
    pub model: Option<usize>,
}

impl RaterMatrix {
    pub fn new(
        image_ids: Vec<String>,
        rater_names: Vec<String>,
        labels: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if rater_names.len() < 2 || labels.len() != rater_names.len() {
            return Err(Error::Config(format!(
                "need at least two raters with one label column each, got {} names and {} columns",
                rater_names.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|col| col.len() != image_ids.len()) {
            return Err(Error::shape("every rater must label every image"));
        }
        Ok(RaterMatrix {
            image_ids,
            rater_names,
            labels,
            model: None,
        })
    }

    /// Flags the rater called `name` as the model.
    pub fn with_model(mut self, name: &str) -> Result<Self> {
        let i = self.rater_index(name).ok_or_else(|| {
            Error::Config(format!(
                "no rater named {name:?}; raters are {}",
                self.rater_names.join(", ")
            ))
        })?;
        self.model = Some(i);
        Ok(self)
    }

    pub fn rater_index(&self, name: &str) -> Option<usize> {
        self.rater_names.iter().position(|n| n == name)
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn num_raters(&self) -> usize {
        self.rater_names.len()
    }

    /// Raters other than the model, in column order.
    pub fn radiologists(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_raters()).filter(move |&r| Some(r) != self.model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRaterF1 {
    /// Mean F1 of each rater against every other rater as ground truth.
    pub per_rater: Vec<f64>,
    /// Mean of `per_rater` over the raters that are not the model.
    pub radiologist_average: f64,
    /// Some pairwise F1 hit the no-positives convention.
    pub degenerate: bool,
}

/// Scores every rater against each other rater as ground truth.
pub fn multi_rater_f1(m: &RaterMatrix) -> Result<MultiRaterF1> {
    multi_rater_f1_on(m, &(0..m.num_images()).collect::<Vec<_>>())
}

/// [`multi_rater_f1`] on the image rows listed in `rows` (repeats allowed).
pub fn multi_rater_f1_on(m: &RaterMatrix, rows: &[usize]) -> Result<MultiRaterF1> {
    let n = m.num_raters();
    let columns: Vec<Vec<bool>> = m
        .labels
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    let mut per_rater = Vec::with_capacity(n);
    let mut degenerate = false;
    for r in 0..n {
        let mut sum = 0.0;
        for g in (0..n).filter(|&g| g != r) {
            let s = f1(&columns[r], &columns[g])?;
            degenerate |= s.degenerate;
            sum += s.value;
        }
        per_rater.push(sum / (n - 1) as f64);
    }
    let radiologists: Vec<f64> = m.radiologists().map(|r| per_rater[r]).collect();
    Ok(MultiRaterF1 {
        radiologist_average: mean(&radiologists),
        per_rater,
        degenerate,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "auroc got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("auroc score {bad} is not a number")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {positives} positive and {negatives} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their average.
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += midrank * tied_pos as f64;
        start = end;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// `p ≥ threshold` for each probability.
pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= threshold).collect()
}

/// The threshold among the distinct probabilities that maximizes F1 on
/// `truth`, with its score. Ties go to the smallest threshold.
pub fn optimal_threshold(probabilities: &[f64], truth: &[bool]) -> Result<(f64, F1Score)> {
    let mut candidates: Vec<f64> = probabilities.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, F1Score)> = None;
    for t in candidates {
        let score = f1(&binarize(probabilities, t), truth)?;
        if best.is_none_or(|(_, b)| score.value > b.value) {
            best = Some((t, score));
        }
    }
    best.ok_or_else(|| Error::shape("optimal_threshold needs at least one probability"))
}
