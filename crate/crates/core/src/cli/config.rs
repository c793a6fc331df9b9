//! Run settings: a registry of `key = value` settings resolved from
//! built-in defaults, a config file, and command-line flags, in that
//! order of increasing precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{pathology_index, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::DenseConfig;
use crate::train::{Task, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed for every random stream"),
    ("out", "output directory"),
    (
        "data_dir",
        "dataset directory (default: the output directory)",
    ),
    ("checkpoint", "model file (default: <out>/model.dcam)"),
    (
        "classes",
        "comma-separated pathology names, one output each",
    ),
    ("task", "pneumonia (single weighted output) or multilabel"),
    ("image_size", "square input side in pixels"),
    ("input_channels", "network input channels (1 gray, 3 color)"),
    ("initial_channels", "channels of the first convolution"),
    (
        "block_sizes",
        "comma-separated layer counts of the dense blocks",
    ),
    ("growth_rate", "channels added by each dense layer"),
    ("compression", "transition channel fraction"),
    ("bn_momentum", "running-statistic momentum"),
    ("bn_epsilon", "batch-norm variance offset"),
    ("learning_rate", "initial Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_epsilon", "Adam denominator offset"),
    ("batch_size", "training minibatch size"),
    ("max_epochs", "training epochs"),
    (
        "plateau_delta",
        "minimum absolute validation-loss improvement",
    ),
    (
        "plateau_patience_epochs",
        "non-improving epochs before decay",
    ),
    ("decay_factor", "learning-rate divisor on plateau"),
    ("min_lr", "learning-rate floor"),
    ("flip_probability", "horizontal flip probability"),
    ("num_images", "synthetic images to generate"),
    ("noise_sigma", "synthetic pixel noise standard deviation"),
    ("blob_radius_min", "smallest synthetic motif semi-axis"),
    ("blob_radius_max", "largest synthetic motif semi-axis"),
    ("train_fraction", "patient fraction in the training split"),
    (
        "validation_fraction",
        "patient fraction in the validation split",
    ),
    ("test_fraction", "patient fraction in the test split"),
    ("eval_batch_size", "images per inference batch"),
    ("bootstrap_samples", "bootstrap resamples"),
    (
        "threshold",
        "probability threshold in (0, 1), or `optimal` for the validation F1 maximizer",
    ),
    ("raters", "rater label CSV to evaluate"),
    ("predictions", "model probability CSV to evaluate"),
    ("model_rater", "name of the model's column among the raters"),
    (
        "eval_class",
        "class scored by F1 (default: the first class)",
    ),
    ("cam_class", "class to localize (default: the first class)"),
    (
        "cam_images",
        "comma-separated image ids (default: true-positive test images)",
    ),
    ("cam_alpha", "heat-map opacity in [0, 1]"),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Maximize F1 on the validation split.
    Optimal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub classes: Vec<String>,
    pub task: Task,
    pub model: DenseConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub split_fractions: (f64, f64, f64),
    pub eval_batch_size: usize,
    pub bootstrap_samples: usize,
    pub threshold: Threshold,
    pub raters: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub model_rater: String,
    pub eval_class: Option<String>,
    pub cam_class: Option<String>,
    pub cam_images: Vec<String>,
    pub cam_alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("."),
            data_dir: None,
            checkpoint: None,
            classes: vec!["Pneumonia".into()],
            task: Task::Pneumonia,
            model: DenseConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            split_fractions: (0.7, 0.1, 0.2),
            eval_batch_size: 32,
            bootstrap_samples: crate::eval::DEFAULT_SAMPLES,
            threshold: Threshold::Fixed(0.5),
            raters: None,
            predictions: None,
            model_rater: "model".into(),
            eval_class: None,
            cam_class: None,
            cam_images: Vec::new(),
            cam_alpha: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "classes" => self.classes = list(value),
            "task" => self.task = value.parse()?,
            "image_size" => self.model.image_size = parse(key, value)?,
            "input_channels" | "initial_channels" | "block_sizes" | "growth_rate"
            | "compression" | "bn_momentum" | "bn_epsilon" => {
                self.model.set(key, value)?;
            }
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "adam_epsilon" => self.train.adam_epsilon = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "plateau_delta" => self.train.plateau_delta = parse(key, value)?,
            "plateau_patience_epochs" => self.train.plateau_patience_epochs = parse(key, value)?,
            "decay_factor" => self.train.decay_factor = parse(key, value)?,
            "min_lr" => self.train.min_lr = parse(key, value)?,
            "flip_probability" => self.train.flip_probability = parse(key, value)?,
            "num_images" => self.synth.num_images = parse(key, value)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, value)?,
            "blob_radius_min" => self.synth.blob_radius_range.0 = parse(key, value)?,
            "blob_radius_max" => self.synth.blob_radius_range.1 = parse(key, value)?,
            "train_fraction" => self.split_fractions.0 = parse(key, value)?,
            "validation_fraction" => self.split_fractions.1 = parse(key, value)?,
            "test_fraction" => self.split_fractions.2 = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "bootstrap_samples" => self.bootstrap_samples = parse(key, value)?,
            "threshold" => {
                self.threshold = if value == "optimal" {
                    Threshold::Optimal
                } else {
                    Threshold::Fixed(parse(key, value)?)
                }
            }
            "raters" => self.raters = Some(PathBuf::from(value)),
            "predictions" => self.predictions = Some(PathBuf::from(value)),
            "model_rater" => self.model_rater = value.to_string(),
            "eval_class" => self.eval_class = Some(value.to_string()),
            "cam_class" => self.cam_class = Some(value.to_string()),
            "cam_images" => self.cam_images = list(value),
            "cam_alpha" => self.cam_alpha = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The value of `key` in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let nums = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data_dir" => return path(&self.data_dir),
            "checkpoint" => return path(&self.checkpoint),
            "classes" => self.classes.join(","),
            "task" => match self.task {
                Task::Pneumonia => "pneumonia".into(),
                Task::Multilabel => "multilabel".into(),
            },
            "image_size" => self.model.image_size.to_string(),
            "input_channels" => self.model.input_channels.to_string(),
            "initial_channels" => self.model.initial_channels.to_string(),
            "block_sizes" => nums(&self.model.block_sizes),
            "growth_rate" => self.model.growth_rate.to_string(),
            "compression" => self.model.compression.to_string(),
            "bn_momentum" => self.model.bn_momentum.to_string(),
            "bn_epsilon" => self.model.bn_epsilon.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "adam_epsilon" => self.train.adam_epsilon.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "plateau_delta" => self.train.plateau_delta.to_string(),
            "plateau_patience_epochs" => self.train.plateau_patience_epochs.to_string(),
            "decay_factor" => self.train.decay_factor.to_string(),
            "min_lr" => self.train.min_lr.to_string(),
            "flip_probability" => self.train.flip_probability.to_string(),
            "num_images" => self.synth.num_images.to_string(),
            "noise_sigma" => self.synth.noise_sigma.to_string(),
            "blob_radius_min" => self.synth.blob_radius_range.0.to_string(),
            "blob_radius_max" => self.synth.blob_radius_range.1.to_string(),
            "train_fraction" => self.split_fractions.0.to_string(),
            "validation_fraction" => self.split_fractions.1.to_string(),
            "test_fraction" => self.split_fractions.2.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "bootstrap_samples" => self.bootstrap_samples.to_string(),
            "threshold" => match self.threshold {
                Threshold::Fixed(t) => t.to_string(),
                Threshold::Optimal => "optimal".into(),
            },
            "raters" => return path(&self.raters),
            "predictions" => return path(&self.predictions),
            "model_rater" => self.model_rater.clone(),
            "eval_class" => return self.eval_class.clone(),
            "cam_class" => return self.cam_class.clone(),
            "cam_images" => self.cam_images.join(","),
            "cam_alpha" => self.cam_alpha.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's settings in order.
    pub fn apply_file(&mut self, text: &str, source: &str) -> Result<()> {
        for (key, value, line) in parse_config_text(text, source)? {
            self.set(&key, &value).map_err(|e| match e {
                Error::Config(msg) => Error::malformed(source, line, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults, then the file at `file` (if any), then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_file(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Propagates shared settings and validates the combination.
    pub fn finish(&mut self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(
                "classes must name at least one pathology".into(),
            ));
        }
        let mut canonical = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let i = pathology_index(c).ok_or_else(|| {
                Error::Config(format!(
                    "unknown class {c:?}; valid classes are {}",
                    crate::data::PATHOLOGIES.join(", ")
                ))
            })?;
            canonical.push(crate::data::PATHOLOGIES[i].to_string());
        }
        self.classes = canonical;
        self.model.num_classes = self.classes.len();
        self.model.class_names = self.classes.clone();
        self.synth.classes = self.classes.clone();
        self.synth.image_size = self.model.image_size;
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        if self.task == Task::Pneumonia && self.classes.len() != 1 {
            return Err(Error::Config(format!(
                "task pneumonia trains a single output, but {} classes are configured",
                self.classes.len()
            )));
        }
        if let Threshold::Fixed(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "threshold must lie in (0, 1), got {t}"
                )));
            }
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.dcam"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.out.join("splits.csv")
    }
}

/// `(key, value, line)` triples from `key = value` lines. `#` starts a
/// comment; blank lines are skipped.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<(String, String, u64)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::malformed(
                source,
                line,
                format!("expected `key = value`, got {content:?}"),
            ));
        };
        let key = key.trim();
        if !RunConfig::is_key(key) {
            return Err(Error::malformed(
                source,
                line,
                format!("unknown config key {key:?}"),
            ));
        }
        out.push((key.to_string(), value.trim().to_string(), line));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_roundtrips_through_get() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            if let Some(v) = cfg.get(key) {
                let mut other = RunConfig::default();
                other.set(key, &v).unwrap();
                assert_eq!(other.get(key), Some(v), "{key}");
            }
        }
    }

    #[test]
    fn file_parsing() {
        let text = "# header\nseed = 7\n\nmax_epochs=3 # trailing\n";
        let mut cfg = RunConfig::default();
        cfg.apply_file(text, "f").unwrap();
        assert_eq!((cfg.seed, cfg.train.max_epochs), (7, 3));
        match cfg.apply_file("seed = 1\nbogus = 2\n", "f") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(cfg.apply_file("seed 3\n", "f").is_err());
        assert!(cfg.apply_file("seed = x\n", "f").is_err());
    }

    #[test]
    fn finish_rejects_bad_combinations() {
        let mut cfg = RunConfig::default();
        cfg.set("classes", "Mass,Nodule").unwrap();
        assert!(cfg.clone().finish().is_err());
        cfg.set("task", "multilabel").unwrap();
        cfg.finish().unwrap();
        assert_eq!(cfg.model.num_classes, 2);
        let mut bad = RunConfig::default();
        bad.set("classes", "Fracture").unwrap();
        assert!(bad
            .finish()
            .unwrap_err()
            .to_string()
            .contains("Pleural Thickening"));
    }
}
