//! Losses, optimizer, learning-rate schedule, augmentation and the
//! training loop with best-validation-loss model selection.

mod adam;
mod loss;
mod schedule;

use std::fmt::Write as _;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{class_weights, multilabel_bce, weighted_bce, weighted_bce_batch, ClassWeights};
pub use schedule::{lr_on_plateau, PlateauConfig, PlateauScheduler};

use crate::data::{channel_stats, flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::model::{DenseModel, Normalization, Parameter};
use crate::rng::{self, StreamRng, NS_TRAIN};
use crate::tensor::{Graph, Mode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_delta: f64,
    pub plateau_patience_epochs: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 16,
            max_epochs: 10,
            plateau_delta: 1e-4,
            plateau_patience_epochs: 1,
            decay_factor: 10.0,
            min_lr: 1e-6,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.plateau_patience_epochs == 0 {
            return Err(Error::Config(
                "batch_size and plateau_patience_epochs must be positive".into(),
            ));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must exceed 1, got {}",
                self.decay_factor
            )));
        }
        if !(self.plateau_delta >= 0.0) {
            return Err(Error::Config("plateau_delta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            delta: self.plateau_delta,
            patience: self.plateau_patience_epochs,
            decay_factor: self.decay_factor,
            min_lr: self.min_lr,
        }
    }
}

/// Which loss the loop optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Single output, BCE weighted by the training-split class balance.
    Pneumonia,
    /// One output per class, summed unweighted BCE.
    Multilabel,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pneumonia" => Ok(Task::Pneumonia),
            "multilabel" => Ok(Task::Multilabel),
            _ => Err(Error::Config(format!(
                "unknown task {s:?}, expected pneumonia or multilabel"
            ))),
        }
    }
}

/// Mirrors the width axis of a `[C, H, W]` image with probability `p`.
/// Exactly one uniform draw is consumed per call.
pub fn augment(image: &Tensor, p: f64, rng: &mut StreamRng) -> Result<Tensor> {
    let [_, _, w] = image.dims()[..] else {
        return Err(Error::shape(format!(
            "augment expects [C, H, W], got {:?}",
            image.dims()
        )));
    };
    let mut out = image.clone();
    if rng::uniform_f64(rng) < p {
        flip_horizontal(out.values_mut(), w);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate in effect during the epoch.
    pub lr: f64,
    /// Validation loss improved and the model was checkpointed.
    pub checkpointed: bool,
    /// The checkpoint returned by the loop.
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Validation loss of the model before the first update; `None` when
    /// no epoch ran.
    pub initial_val_loss: Option<f64>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.best)
    }

    /// `epoch,train_loss,val_loss,lr,checkpoint` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,checkpoint\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                u8::from(r.checkpointed)
            );
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: DenseModel,
    pub history: TrainHistory,
}

/// Sets the model's input normalization to the per-channel statistics of
/// the training images. Channels with zero spread keep unit scale.
pub fn fit_normalization(model: &mut DenseModel, train: &Dataset) -> Result<()> {
    let (mean, std) = channel_stats(&train.images)?;
    let std = std
        .into_iter()
        .map(|s| if s > 0.0 { s } else { 1.0 })
        .collect();
    model.set_normalization(Normalization { mean, std })
}

/// Per-term loss weights for `task` on `train`.
pub fn task_weights(task: Task, model: &DenseModel, train: &Dataset) -> Result<ClassWeights> {
    check_task(task, model, train)?;
    match task {
        Task::Pneumonia => class_weights(&train.column(0)),
        Task::Multilabel => Ok(ClassWeights::UNIT),
    }
}

fn check_task(task: Task, model: &DenseModel, data: &Dataset) -> Result<()> {
    let k = model.config().num_classes;
    if data.num_classes() != k {
        return Err(Error::shape(format!(
            "dataset has {} target columns, model has {k} outputs",
            data.num_classes()
        )));
    }
    if task == Task::Pneumonia && k != 1 {
        return Err(Error::Config(format!(
            "the pneumonia task needs a single-output model, got {k} outputs"
        )));
    }
    Ok(())
}

/// Eval-mode probabilities `[N, K]` for all images, in chunks of `batch`.
pub fn predict_dataset(model: &DenseModel, data: &Dataset, batch: usize) -> Result<Tensor> {
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(data.len() * k);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk);
        out.extend_from_slice(model.predict(images)?.probabilities.values());
    }
    Tensor::new(vec![data.len(), k], out)
}

/// Mean over examples of the per-example loss (summed over classes).
pub fn dataset_loss(
    model: &DenseModel,
    data: &Dataset,
    w: &ClassWeights,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::shape("loss over an empty dataset"));
    }
    let probs = predict_dataset(model, data, batch)?;
    let k = data.num_classes();
    let total: f64 = probs
        .values()
        .chunks(k)
        .zip(data.targets.values().chunks(k))
        .map(|(p, y)| {
            p.iter()
                .zip(y)
                .map(|(&p, &y)| weighted_bce(p, y, w))
                .sum::<f64>()
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// One optimizer step on a minibatch; returns the batch loss.
fn train_step(
    model: &mut DenseModel,
    images: Tensor,
    targets: &[f64],
    w: &ClassWeights,
    adam: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    model.zero_grad();
    let mut graph = Graph::new();
    let mut stats = model.running_stats_snapshot();
    let traced = model.trace(&mut graph, images, Mode::Train, &mut stats, true)?;
    let loss = graph.bce_loss(traced.probabilities, targets, w.w_plus, w.w_minus)?;
    let value = graph.value(loss).values()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    graph.backward(loss)?;
    model.accumulate_grads(&graph, &traced);
    model.set_running_stats(stats)?;
    let pairs = model.parameters_mut().iter_mut().map(|p| {
        let Parameter { value, grad, .. } = p;
        (value.values_mut(), grad.values())
    });
    adam::adam_update(pairs, adam, cfg)?;
    Ok(value)
}

/// [`train_loop_with`] without a per-epoch callback.
pub fn train_loop(
    model: DenseModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    task: Task,
) -> Result<TrainOutcome> {
    train_loop_with(model, train, val, cfg, task, |_, _| Ok(()))
}

/// Trains with Adam on shuffled, flip-augmented minibatches, decaying the
/// learning rate on validation plateaus, and returns the checkpoint with
/// the lowest validation loss. `on_epoch` sees every record, plus the
/// model whenever it was checkpointed.
pub fn train_loop_with(
    model: DenseModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    task: Task,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&DenseModel>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::shape(
            "training and validation sets must be non-empty",
        ));
    }
    check_task(task, &model, val)?;
    let w = task_weights(task, &model, train)?;
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome { model, history });
    }
    let eval_batch = cfg.batch_size.max(32);
    history.initial_val_loss = Some(dataset_loss(&model, val, &w, eval_batch)?);

    let mut model = model;
    let mut best: Option<(f64, DenseModel)> = None;
    let mut adam = AdamState::new(model.parameters().iter().map(|p| p.value.len()));
    let mut scheduler = PlateauScheduler::new(cfg.learning_rate, cfg.plateau());
    let [_, c, h, w_px] = train.images.dims()[..] else {
        return Err(Error::shape("training images must be [N, C, H, W]"));
    };
    let image_len = c * h * w_px;
    for epoch in 1..=cfg.max_epochs {
        let lr = scheduler.lr();
        let adam_cfg = cfg.adam(lr);
        let mut rng = rng::indexed_stream(cfg.seed, NS_TRAIN, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut rng, &mut order);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let (mut images, targets) = train.batch(rows);
            for img in images.values_mut().chunks_mut(image_len) {
                if rng::uniform_f64(&mut rng) < cfg.flip_probability {
                    flip_horizontal(img, w_px);
                }
            }
            let loss = train_step(&mut model, images, &targets, &w, &mut adam, &adam_cfg)?;
            total += loss * rows.len() as f64;
        }
        let val_loss = dataset_loss(&model, val, &w, eval_batch)?;
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            lr,
            checkpointed: improved,
            best: false,
        };
        on_epoch(&record, improved.then_some(&model))?;
        history.records.push(record);
        scheduler.observe(val_loss);
    }
    let (best_loss, best_model) = best.expect("at least one epoch ran");
    if let Some(r) = history
        .records
        .iter_mut()
        .rev()
        .find(|r| r.checkpointed && r.val_loss == best_loss)
    {
        r.best = true;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
    })
}
