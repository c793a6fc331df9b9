use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture of a dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseConfig {
    pub input_channels: usize,
    /// Output channels of the initial 3×3 convolution.
    pub initial_channels: usize,
    /// Number of layers in each dense block.
    pub block_sizes: Vec<usize>,
    /// Channels each dense-block layer adds.
    pub growth_rate: usize,
    /// Transition layers keep `floor(compression · channels)` channels.
    pub compression: f64,
    pub num_classes: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for DenseConfig {
    /// The desk-scale network: 64×64 grayscale input, blocks of 2, 4 and 4
    /// layers, growth 8, single pneumonia output.
    fn default() -> Self {
        DenseConfig {
            input_channels: 1,
            initial_channels: 16,
            block_sizes: vec![2, 4, 4],
            growth_rate: 8,
            compression: 0.5,
            num_classes: 1,
            image_size: 64,
            class_names: vec!["Pneumonia".to_string()],
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

/// Channel bookkeeping for one dense block and the transition after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub layers: usize,
    /// `in_channels + layers · growth_rate`.
    pub out_channels: usize,
    /// Channels after the following transition, `None` for the last block.
    pub transition_channels: Option<usize>,
    /// Spatial side length inside the block.
    pub spatial: usize,
}

impl DenseConfig {
    /// The 121-layer layout (blocks 6/12/24/16, growth 32, 64 initial
    /// channels) at 224×224. Expressible but far too large for CPU training.
    pub fn densenet121(num_classes: usize, class_names: Vec<String>) -> Self {
        DenseConfig {
            input_channels: 3,
            initial_channels: 64,
            block_sizes: vec![6, 12, 24, 16],
            growth_rate: 32,
            compression: 0.5,
            num_classes,
            image_size: 224,
            class_names,
            ..DenseConfig::default()
        }
    }

    pub fn with_classes(mut self, class_names: &[&str]) -> Self {
        self.num_classes = class_names.len();
        self.class_names = class_names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn transition_channels(&self, channels: usize) -> usize {
        ((self.compression * channels as f64).floor() as usize).max(1)
    }

    pub fn block_plan(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::with_capacity(self.block_sizes.len());
        let mut channels = self.initial_channels;
        let mut spatial = self.image_size;
        for (i, &layers) in self.block_sizes.iter().enumerate() {
            let out = channels + layers * self.growth_rate;
            let last = i + 1 == self.block_sizes.len();
            let transition = (!last).then(|| self.transition_channels(out));
            plans.push(BlockPlan {
                in_channels: channels,
                layers,
                out_channels: out,
                transition_channels: transition,
                spatial,
            });
            if let Some(t) = transition {
                channels = t;
                spatial /= 2;
            }
        }
        plans
    }

    /// Channels of the final feature maps (the classifier's input width).
    pub fn feature_channels(&self) -> usize {
        self.block_plan()
            .last()
            .map_or(self.initial_channels, |b| b.out_channels)
    }

    /// Spatial side length of the final feature maps.
    pub fn feature_size(&self) -> usize {
        self.block_plan()
            .last()
            .map_or(self.image_size, |b| b.spatial)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("initial_channels", self.initial_channels),
            ("growth_rate", self.growth_rate),
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "block_sizes must be a non-empty list of positive counts, got {:?}",
                self.block_sizes
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression must lie in (0, 1], got {}",
                self.compression
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return Err(Error::Config(
                "bn_momentum must lie in [0, 1] and bn_epsilon must be positive".into(),
            ));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "num_classes is {} but {} class names were given",
                self.num_classes,
                self.class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if name.is_empty() || name.contains(['|', '\n', '=']) {
                return Err(Error::Config(format!("invalid class name {name:?}")));
            }
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        if self.image_size < 3 {
            return Err(Error::Config(format!(
                "image_size {} is too small for the initial 3x3 convolution",
                self.image_size
            )));
        }
        for (i, plan) in self.block_plan().iter().enumerate() {
            if plan.transition_channels.is_some() && plan.spatial < 2 {
                return Err(Error::Config(format!(
                    "image_size {} too small: transition {} would pool a {}x{} map with a 2x2 window",
                    self.image_size,
                    i + 1,
                    plan.spatial,
                    plan.spatial
                )));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` lines, in a fixed key order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "initial_channels={}", self.initial_channels);
        let _ = writeln!(s, "block_sizes={}", join(&self.block_sizes));
        let _ = writeln!(s, "growth_rate={}", self.growth_rate);
        let _ = writeln!(s, "compression={:?}", self.compression);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "class_names={}", self.class_names.join("|"));
        let _ = writeln!(s, "bn_momentum={:?}", self.bn_momentum);
        let _ = writeln!(s, "bn_epsilon={:?}", self.bn_epsilon);
        s
    }

    /// Applies one `key=value` setting. Returns `false` for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "input_channels" => self.input_channels = num(key, value)?,
            "initial_channels" => self.initial_channels = num(key, value)?,
            "block_sizes" => {
                self.block_sizes = value
                    .split(',')
                    .map(|v| num(key, v))
                    .collect::<Result<_>>()?
            }
            "growth_rate" => self.growth_rate = num(key, value)?,
            "compression" => self.compression = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "class_names" => {
                self.class_names = value.split('|').map(|s| s.trim().to_string()).collect()
            }
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_epsilon" => self.bn_epsilon = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_channel_formula() {
        let cfg = DenseConfig {
            initial_channels: 4,
            growth_rate: 2,
            block_sizes: vec![3],
            ..DenseConfig::default()
        };
        assert_eq!(cfg.block_plan()[0].out_channels, 10);
    }

    #[test]
    fn desk_config_plan() {
        let plan = DenseConfig::default().block_plan();
        let outs: Vec<_> = plan
            .iter()
            .map(|p| (p.in_channels, p.out_channels, p.spatial))
            .collect();
        assert_eq!(outs, vec![(16, 32, 64), (16, 48, 32), (24, 56, 16)]);
        assert_eq!(DenseConfig::default().feature_channels(), 56);
    }

    #[test]
    fn full_compression_keeps_channels() {
        let cfg = DenseConfig {
            compression: 1.0,
            ..DenseConfig::default()
        };
        for p in cfg.block_plan() {
            if let Some(t) = p.transition_channels {
                assert_eq!(t, p.out_channels);
            }
        }
        assert_eq!(cfg.transition_channels(1), 1);
        let tiny = DenseConfig {
            compression: 0.01,
            ..DenseConfig::default()
        };
        assert_eq!(tiny.transition_channels(5), 1);
    }

    #[test]
    fn rejects_tiny_images_naming_the_stage() {
        let cfg = DenseConfig {
            image_size: 3,
            block_sizes: vec![1, 1, 1],
            ..DenseConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("transition 2"), "{err}");
        assert!(DenseConfig::default().validate().is_ok());
        assert!(DenseConfig::densenet121(1, vec!["Pneumonia".into()])
            .validate()
            .is_ok());
    }

    #[test]
    fn key_values_roundtrip() {
        let cfg = DenseConfig {
            compression: 0.3,
            ..DenseConfig::default().with_classes(&["Mass", "Nodule"])
        };
        let mut back = DenseConfig::default();
        for line in cfg.to_key_values().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("learning_rate", "1").unwrap());
    }

    #[test]
    fn rejects_duplicate_class_names() {
        let cfg = DenseConfig::default().with_classes(&["Mass", "Mass"]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
