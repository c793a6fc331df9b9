//! Class activation maps: the classifier-weighted sum of the final feature
//! maps, upscaled to the input, rendered as overlays and scored against
//! ground-truth boxes.

use crate::data::{bilinear, netpbm::to_u8, Pnm, Region};
use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::tensor::Tensor;

/// A `height × width` row-major map for one class of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub class_name: String,
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    /// `(row, col)` of the maximum, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Min-max scaled to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if hi > lo {
            self.values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.values.len()]
        }
    }

    /// Grayscale export of [`ActivationMap::normalized`].
    pub fn to_pgm(&self) -> Pnm {
        Pnm::from_unit_plane(self.width, self.height, &self.normalized())
    }
}

/// `M[i, j] = Σ_k w[k] · f[k, i, j]` over feature maps `f` of shape
/// `[K, h, w]`. No bias and no normalization.
pub fn compute_cam(
    features: &Tensor,
    weights: &[f64],
    class_name: &str,
    image_id: &str,
) -> Result<ActivationMap> {
    let [k, h, w] = features.dims()[..] else {
        return Err(Error::shape(format!(
            "compute_cam expects [K, h, w], got {:?}",
            features.dims()
        )));
    };
    if weights.len() != k {
        return Err(Error::shape(format!(
            "compute_cam got {} weights for {k} feature maps",
            weights.len()
        )));
    }
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (f, &wk) in features.values().chunks(plane).zip(weights) {
        for (m, &v) in values.iter_mut().zip(f) {
            *m += wk * v;
        }
    }
    Ok(ActivationMap {
        class_name: class_name.to_string(),
        image_id: image_id.to_string(),
        height: h,
        width: w,
        values,
    })
}

/// Corner-aligned bilinear upscale to `height × width`.
pub fn upscale(map: &ActivationMap, height: usize, width: usize) -> Result<ActivationMap> {
    if height < map.height || width < map.width {
        return Err(Error::Usage(format!(
            "cannot upscale a {}x{} map to {height}x{width}",
            map.height, map.width
        )));
    }
    Ok(ActivationMap {
        values: bilinear(&map.values, map.height, map.width, height, width),
        height,
        width,
        ..map.clone()
    })
}

/// Blends a grayscale image (values in `[0, 1]`) with a red ramp of the
/// normalized map: `(1 − α)·gray + α·heat` per channel.
pub fn render_overlay(gray: &[f64], map: &ActivationMap, alpha: f64) -> Result<Pnm> {
    if gray.len() != map.height * map.width {
        return Err(Error::shape(format!(
            "overlay image has {} pixels, map is {}x{}",
            gray.len(),
            map.height,
            map.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Usage(format!(
            "overlay alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let heat = map.normalized();
    let mut pixels = Vec::with_capacity(3 * gray.len());
    for (&g, &m) in gray.iter().zip(&heat) {
        let base = (1.0 - alpha) * g;
        pixels.extend([to_u8(base + alpha * m), to_u8(base), to_u8(base)]);
    }
    Ok(Pnm::rgb(map.width, map.height, pixels))
}

/// Hit when the map's argmax lies inside the inclusive box.
pub fn pointing_game(map: &ActivationMap, region: &Region) -> bool {
    let (row, col) = map.argmax();
    region.contains(col, row)
}

/// Upscaled maps of class `class` for every image in `images`
/// (`[N, C, H, W]`), from eval-mode feature maps.
pub fn class_cams(
    model: &DenseModel,
    images: &Tensor,
    ids: &[String],
    class: &str,
) -> Result<Vec<ActivationMap>> {
    let c = model.class_index(class).ok_or_else(|| {
        Error::Usage(format!(
            "class {class:?} is not an output of this model; outputs are {}",
            model.config().class_names.join(", ")
        ))
    })?;
    let [n, _, h, w] = images.dims()[..] else {
        return Err(Error::shape(format!(
            "class_cams expects [N, C, H, W], got {:?}",
            images.dims()
        )));
    };
    if ids.len() != n {
        return Err(Error::shape(format!("{} ids for {n} images", ids.len())));
    }
    let weights = model.classifier_weights();
    let k = weights.dims()[1];
    let row = &weights.values()[c * k..(c + 1) * k];
    let features = model.predict(images.clone())?.final_feature_maps;
    let dims = features.dims();
    let plane = dims[1] * dims[2] * dims[3];
    features
        .values()
        .chunks(plane)
        .zip(ids)
        .map(|(f, id)| {
            let f = Tensor::new(dims[1..].to_vec(), f.to_vec())?;
            upscale(&compute_cam(&f, row, class, id)?, h, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: Vec<f64>) -> ActivationMap {
        ActivationMap {
            class_name: "Mass".into(),
            image_id: "x".into(),
            height: h,
            width: w,
            values,
        }
    }

    fn region(x0: usize, y0: usize, x1: usize, y1: usize) -> Region {
        Region {
            image_id: "x".into(),
            class: "Mass".into(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    #[test]
    fn weighted_sum_example() {
        let f = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(
            compute_cam(&f, &[1.0, 0.5], "Mass", "x").unwrap().values,
            vec![1.0; 4]
        );
        assert_eq!(
            compute_cam(&f, &[0.0, 0.0], "Mass", "x").unwrap().values,
            vec![0.0; 4]
        );
        assert!(compute_cam(&f, &[1.0], "Mass", "x").is_err());
    }

    #[test]
    fn map_mean_plus_bias_is_the_logit() {
        use crate::model::{build_model, DenseConfig};
        let config = DenseConfig {
            image_size: 16,
            block_sizes: vec![1, 1],
            ..DenseConfig::default().with_classes(&["Effusion", "Mass"])
        };
        let model = build_model(&config, 3).unwrap();
        let images = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 7919) % 61) as f64 / 61.0);
        let out = model.predict(images).unwrap();
        let weights = model.classifier_weights();
        let k = weights.dims()[1];
        let bias = &model
            .parameters()
            .iter()
            .find(|p| p.name == "classifier.bias")
            .unwrap()
            .value;
        let dims = out.final_feature_maps.dims().to_vec();
        for (b, f) in out
            .final_feature_maps
            .values()
            .chunks(k * dims[2] * dims[3])
            .enumerate()
        {
            let f = Tensor::new(dims[1..].to_vec(), f.to_vec()).unwrap();
            for c in 0..2 {
                let row = &weights.values()[c * k..(c + 1) * k];
                let cam = compute_cam(&f, row, "Mass", "x").unwrap();
                let mean = cam.values.iter().sum::<f64>() / cam.values.len() as f64;
                let p = out.probabilities.values()[b * 2 + c];
                assert!((mean + bias.values()[c] - (p / (1.0 - p)).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upscale_examples() {
        let m = map(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let up = upscale(&m, 2, 4).unwrap();
        let third = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in up.values.chunks(4) {
            for (a, b) in row.iter().zip(third) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(upscale(&m, 2, 2).unwrap(), m);
        assert!(matches!(upscale(&m, 1, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn overlay_examples() {
        let gray = [0.0, 0.5, 1.0, 0.2];
        let plain = render_overlay(&gray, &map(2, 2, vec![3.0, 1.0, 2.0, 0.0]), 0.0).unwrap();
        for (px, g) in plain.pixels.chunks(3).zip(gray) {
            assert_eq!(px, [to_u8(g); 3]);
        }
        let flat = render_overlay(&gray, &map(2, 2, vec![5.0; 4]), 1.0).unwrap();
        assert!(flat.pixels.iter().all(|&v| v == 0));
        let peak = render_overlay(&gray, &map(2, 2, vec![0.1, 0.3, 0.9, 0.2]), 1.0).unwrap();
        let reds: Vec<u8> = peak.pixels.chunks(3).map(|p| p[0]).collect();
        assert_eq!(reds.iter().position(|&r| r == 255), Some(2));
        assert!(render_overlay(&gray[..3], &map(2, 2, vec![0.0; 4]), 0.5).is_err());
    }

    #[test]
    fn pointing_game_examples() {
        let mut values = vec![0.0; 16];
        values[2 * 4 + 1] = 1.0;
        assert!(pointing_game(
            &map(4, 4, values.clone()),
            &region(1, 2, 2, 3)
        ));
        values[0] = 2.0;
        assert!(!pointing_game(&map(4, 4, values), &region(1, 2, 2, 3)));
        assert!(!pointing_game(
            &map(4, 4, vec![1.0; 16]),
            &region(1, 1, 3, 3)
        ));
    }
}
