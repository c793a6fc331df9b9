//! Resizing and per-channel normalization of image tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate sampled by output index `i` under corner-aligned
/// bilinear resampling; a single output sample sits at the source center.
fn source_coord(i: usize, from: usize, to: usize) -> f64 {
    if to == 1 {
        (from as f64 - 1.0) / 2.0
    } else {
        i as f64 * (from as f64 - 1.0) / (to as f64 - 1.0)
    }
}

fn taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    (0..to)
        .map(|i| {
            let x = source_coord(i, from, to);
            let lo = (x.floor() as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of one `h × w` plane to `th × tw`, corner-aligned.
/// Same-size input is copied unchanged.
pub fn bilinear(plane: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    assert!(h > 0 && w > 0);
    if (h, w) == (th, tw) {
        return plane.to_vec();
    }
    let rows = taps(h, th);
    let cols = taps(w, tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let at = |y: usize, x: usize| plane[y * w + x];
            let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
            let bottom = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

/// Resizes a `[C, H, W]` image to `[C, target, target]`.
pub fn resize_image(image: &Tensor, target: usize) -> Result<Tensor> {
    let [c, h, w] = image.dims()[..] else {
        return Err(Error::shape(format!(
            "resize_image expects [C, H, W], got {:?}",
            image.dims()
        )));
    };
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::shape(
            "resize_image needs non-empty input and target",
        ));
    }
    let mut values = Vec::with_capacity(c * target * target);
    for plane in image.values().chunks(h * w) {
        values.extend(bilinear(plane, h, w, target, target));
    }
    Tensor::new(vec![c, target, target], values)
}

/// `(C, plane)` view of a `[C, H, W]` or `[N, C, H, W]` tensor.
fn channel_layout(images: &Tensor) -> Result<(usize, usize)> {
    match images.dims() {
        [c, h, w] => Ok((*c, h * w)),
        [_, c, h, w] => Ok((*c, h * w)),
        d => Err(Error::shape(format!(
            "expected [C, H, W] or [N, C, H, W] images, got {d:?}"
        ))),
    }
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize(images: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let (c, plane) = channel_layout(images)?;
    if mean.len() != c || std.len() != c {
        return Err(Error::shape(format!(
            "normalize needs {c} channel statistics, got {} means and {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(ch) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Numeric(format!(
            "normalize: channel {ch} has std {}",
            std[ch]
        )));
    }
    let mut out = images.clone();
    for (i, chunk) in out.values_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        chunk
            .iter_mut()
            .for_each(|x| *x = (*x - mean[ch]) / std[ch]);
    }
    Ok(out)
}

/// Per-channel mean and population standard deviation.
pub fn channel_stats(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, plane) = channel_layout(images)?;
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (i, chunk) in images.values().chunks(plane).enumerate() {
        sum[i % c] += chunk.iter().sum::<f64>();
        count[i % c] += chunk.len();
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect();
    let mut sq = vec![0.0; c];
    for (i, chunk) in images.values().chunks(plane).enumerate() {
        let m = mean[i % c];
        sq[i % c] += chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(s, n)| (s / *n as f64).sqrt())
        .collect();
    Ok((mean, std))
}

/// Mirrors the width axis of a `[C, H, W]` image in place.
pub fn flip_horizontal(values: &mut [f64], width: usize) {
    for row in values.chunks_mut(width) {
        row.reverse();
    }
}
