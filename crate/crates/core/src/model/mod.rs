//! Dense-connectivity networks with a sigmoid head.
//!
//! Layer sequence: 3×3 stem convolution, then for each dense block a stack
//! of pre-activation layers (batchnorm → relu → 3×3 conv producing
//! `growth_rate` channels, concatenated onto the layer input), with a
//! transition (batchnorm → relu → 1×1 compressing conv → 2×2 average pool)
//! between consecutive blocks. The head is batchnorm → relu → global
//! average pool → linear → element-wise sigmoid. The post-relu maps that
//! feed the global pool are the network's final feature maps and the
//! input of class activation mapping.

mod checkpoint;
mod config;

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{BlockPlan, DenseConfig};

use crate::error::{Error, Result};
use crate::rng::{self, NS_INIT};
use crate::tensor::{BatchNormOptions, Graph, Mode, RunningStats, Tensor, Var};

/// A named, trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Per-channel affine normalization applied to raw images before they are
/// fed to the network. Stored with the model so inference reproduces the
/// training-time preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct UnitRef {
    bn: BnRef,
    conv: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem: usize,
    blocks: Vec<Vec<UnitRef>>,
    transitions: Vec<UnitRef>,
    head: BnRef,
    classifier_weight: usize,
    classifier_bias: usize,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `[B, num_classes]` independent sigmoid probabilities.
    pub probabilities: Tensor,
    /// `[B, K, h, w]` post-relu maps that the global pool averages.
    pub final_feature_maps: Tensor,
}

/// Graph handles produced by [`DenseModel::trace`].
pub struct Traced {
    pub probabilities: Var,
    pub features: Var,
    /// One handle per model parameter, in [`DenseModel::parameters`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    config: DenseConfig,
    params: Vec<Parameter>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    normalization: Normalization,
    layout: Layout,
}

/// Registers parameters and running stats in a fixed order; shared by
/// [`build_model`] and checkpoint loading so names and order always agree.
struct Builder<'a> {
    config: &'a DenseConfig,
    params: Vec<Parameter>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    init: &'a mut dyn FnMut(&[usize], usize) -> Vec<f64>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, dims: &[usize], fan_in: Option<usize>, fill: f64) -> usize {
        let values = match fan_in {
            Some(fan_in) => (self.init)(dims, fan_in),
            None => vec![fill; dims.iter().product()],
        };
        self.params.push(Parameter {
            name,
            value: Tensor::new(dims.to_vec(), values).expect("param dims"),
            grad: Tensor::zeros(dims),
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> usize {
        self.param(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            Some(cin * k * k),
            0.0,
        )
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnRef {
        let gamma = self.param(format!("{name}.gamma"), &[channels], None, 1.0);
        let beta = self.param(format!("{name}.beta"), &[channels], None, 0.0);
        self.stat_names.push(name.to_string());
        self.stats.push(RunningStats::new(channels));
        BnRef {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn build(mut self) -> (Vec<Parameter>, Vec<String>, Vec<RunningStats>, Layout) {
        let cfg = self.config;
        let stem = self.conv("stem.conv", cfg.initial_channels, cfg.input_channels, 3);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, plan) in cfg.block_plan().iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..plan.layers {
                let name = format!("block{}.layer{}", b + 1, l + 1);
                let channels = plan.in_channels + l * cfg.growth_rate;
                let bn = self.bn(&format!("{name}.bn"), channels);
                let conv = self.conv(&format!("{name}.conv"), cfg.growth_rate, channels, 3);
                layers.push(UnitRef { bn, conv });
            }
            blocks.push(layers);
            if let Some(t) = plan.transition_channels {
                let name = format!("transition{}", b + 1);
                let bn = self.bn(&format!("{name}.bn"), plan.out_channels);
                let conv = self.conv(&format!("{name}.conv"), t, plan.out_channels, 1);
                transitions.push(UnitRef { bn, conv });
            }
        }
        let features = cfg.feature_channels();
        let head = self.bn("head.bn", features);
        let classifier_weight = self.param(
            "classifier.weight".into(),
            &[cfg.num_classes, features],
            Some(features),
            0.0,
        );
        let classifier_bias = self.param("classifier.bias".into(), &[cfg.num_classes], None, 0.0);
        let layout = Layout {
            stem,
            blocks,
            transitions,
            head,
            classifier_weight,
            classifier_bias,
        };
        (self.params, self.stat_names, self.stats, layout)
    }
}

/// Builds a freshly initialized model. Convolution and linear weights are
/// drawn from `U(-1/√fan_in, 1/√fan_in)` using the `init` stream of `seed`;
/// batchnorm scales start at 1, shifts and biases at 0.
pub fn build_model(config: &DenseConfig, seed: u64) -> Result<DenseModel> {
    config.validate()?;
    let mut rng = rng::stream(seed, NS_INIT);
    let mut init = |dims: &[usize], fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-bound..bound))
            .collect()
    };
    DenseModel::assemble(config, &mut init)
}

impl DenseModel {
    fn assemble(
        config: &DenseConfig,
        init: &mut dyn FnMut(&[usize], usize) -> Vec<f64>,
    ) -> Result<Self> {
        let builder = Builder {
            config,
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
            init,
        };
        let (params, stat_names, stats, layout) = builder.build();
        Ok(DenseModel {
            config: config.clone(),
            params,
            stat_names,
            stats,
            normalization: Normalization::identity(config.input_channels),
            layout,
        })
    }

    pub fn config(&self) -> &DenseConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Batchnorm layer names paired with their running statistics.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, normalization: Normalization) -> Result<()> {
        let c = self.config.input_channels;
        if normalization.mean.len() != c || normalization.std.len() != c {
            return Err(Error::shape(format!(
                "normalization needs {c} channel entries"
            )));
        }
        self.normalization = normalization;
        Ok(())
    }

    /// Applies the stored per-channel normalization to raw images.
    pub fn normalize_input(&self, batch: Tensor) -> Result<Tensor> {
        let n = &self.normalization;
        if n.mean.iter().all(|m| *m == 0.0) && n.std.iter().all(|s| *s == 1.0) {
            return Ok(batch);
        }
        crate::data::normalize(&batch, &n.mean, &n.std)
    }

    /// `[num_classes, K]` classifier weights; row `c` weighs the final
    /// feature maps for class `c`.
    pub fn classifier_weights(&self) -> &Tensor {
        &self.params[self.layout.classifier_weight].value
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.config.class_names.iter().position(|c| c == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.values_mut().fill(0.0);
        }
    }

    /// Records a forward pass on `graph`. Parameters enter the graph as
    /// gradient-tracking leaves when `track_grads` is set. Train mode
    /// updates `stats`, a working copy of the running statistics, leaving
    /// the model itself untouched.
    pub fn trace(
        &self,
        graph: &mut Graph,
        batch: Tensor,
        mode: Mode,
        stats: &mut [RunningStats],
        track_grads: bool,
    ) -> Result<Traced> {
        let cfg = &self.config;
        let (_, c, h, w) = batch.dims4("model input")?;
        if c != cfg.input_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}] input, got {:?}",
                cfg.input_channels,
                cfg.image_size,
                cfg.image_size,
                batch.dims()
            )));
        }
        if stats.len() != self.stats.len() {
            return Err(Error::shape("running stats do not match the model"));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), track_grads))
            .collect();
        let opts = BatchNormOptions {
            mode,
            momentum: cfg.bn_momentum,
            epsilon: cfg.bn_epsilon,
        };
        let unit = |graph: &mut Graph, x: Var, bn: BnRef, stats: &mut [RunningStats]| {
            let y = graph.batchnorm(
                x,
                params[bn.gamma],
                params[bn.beta],
                &mut stats[bn.stats],
                opts,
            )?;
            Ok::<_, Error>(graph.relu(y))
        };
        let input = graph.constant(self.normalize_input(batch)?);
        let mut x = graph.conv2d(input, params[self.layout.stem], None, 1, 1)?;
        for (b, layers) in self.layout.blocks.iter().enumerate() {
            for layer in layers {
                let a = unit(graph, x, layer.bn, stats)?;
                let new = graph.conv2d(a, params[layer.conv], None, 1, 1)?;
                x = graph.concat_channels(x, new)?;
            }
            if let Some(t) = self.layout.transitions.get(b) {
                let a = unit(graph, x, t.bn, stats)?;
                let y = graph.conv2d(a, params[t.conv], None, 1, 0)?;
                x = graph.avg_pool2d(y, 2, 2)?;
            }
        }
        let features = unit(graph, x, self.layout.head, stats)?;
        let pooled = graph.global_avg_pool(features)?;
        let logits = graph.linear(
            pooled,
            params[self.layout.classifier_weight],
            params[self.layout.classifier_bias],
        )?;
        let probabilities = graph.sigmoid(logits);
        Ok(Traced {
            probabilities,
            features,
            params,
        })
    }

    pub fn running_stats_snapshot(&self) -> Vec<RunningStats> {
        self.stats.clone()
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.stats.len()
            || stats
                .iter()
                .zip(&self.stats)
                .any(|(a, b)| a.channels() != b.channels())
        {
            return Err(Error::shape("running stats do not match the model"));
        }
        self.stats = stats;
        Ok(())
    }

    /// Adds the gradients backprop left on `traced.params` to the model's
    /// parameter gradients.
    pub fn accumulate_grads(&mut self, graph: &Graph, traced: &Traced) {
        for (p, &v) in self.params.iter_mut().zip(&traced.params) {
            if let Some(g) = graph.grad(v) {
                p.grad
                    .values_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Forward pass. Train mode normalizes with batch statistics and
    /// updates the running statistics; eval mode uses the running
    /// statistics and leaves the model unchanged.
    pub fn forward(&mut self, batch: Tensor, mode: Mode) -> Result<ForwardResult> {
        let mut stats = self.stats.clone();
        let result = self.run(batch, mode, &mut stats)?;
        if mode == Mode::Train {
            self.stats = stats;
        }
        Ok(result)
    }

    /// Eval-mode forward pass through a shared reference.
    pub fn predict(&self, batch: Tensor) -> Result<ForwardResult> {
        let mut stats = self.stats.clone();
        self.run(batch, Mode::Eval, &mut stats)
    }

    fn run(&self, batch: Tensor, mode: Mode, stats: &mut [RunningStats]) -> Result<ForwardResult> {
        let mut graph = Graph::new();
        let traced = self.trace(&mut graph, batch, mode, stats, false)?;
        Ok(ForwardResult {
            probabilities: graph.value(traced.probabilities).clone(),
            final_feature_maps: graph.value(traced.features).clone(),
        })
    }
}
