//! Supervised training: AdamW, plateau halving, early stopping and best-checkpoint retention.

mod loss;
mod optim;
mod schedule;

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{cross_entropy, cross_entropy_f64, weighted_cross_entropy, Loss};
pub(crate) use loss::{check_batch, log_softmax};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{EarlyStopping, PlateauScheduler};

use crate::error::{Error, Result};
use crate::evaluation::{infer, report_from_logits};
use crate::graph::Graph;
use crate::loader::{mix_seed, Augment, Batch, ImageSet};
use crate::modelzoo::{save_checkpoint, CheckpointMeta, ModelHandle};
use crate::preprocess::{AugmentationPolicy, NormalizationStats};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience_epochs: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub scheduler: SchedulerConfig,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss.
    pub class_balanced: bool,
    pub augmentation: AugmentationPolicy,
    pub normalization: NormalizationStats,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            scheduler: SchedulerConfig::default(),
            early_stop_patience: 5,
            max_epochs: 50,
            seed: 0,
            class_balanced: false,
            augmentation: AugmentationPolicy::default(),
            normalization: NormalizationStats::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("scheduler.factor", self.scheduler.factor),
            ("scheduler.patience_epochs", self.scheduler.patience_epochs as f64),
            ("early_stop_patience", self.early_stop_patience as f64),
            ("max_epochs", self.max_epochs as f64),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.scheduler.factor >= 1.0 {
            return Err(Error::Parameter("scheduler.factor must be below 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} {b} outside [0, 1)")));
            }
        }
        self.augmentation.validate()?;
        self.normalization.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the retained weights.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Optional on-disk artifacts of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
    pub config_hash: String,
}

/// Per-batch training objective: returns the loss and its gradient with respect to the logits.
pub trait Objective {
    fn loss(&mut self, logits: &Tensor, batch: &Batch) -> Result<Loss>;
}

pub struct CrossEntropyObjective {
    pub smoothing: f64,
    pub class_weights: Option<[f64; 2]>,
}

impl Objective for CrossEntropyObjective {
    fn loss(&mut self, logits: &Tensor, batch: &Batch) -> Result<Loss> {
        weighted_cross_entropy(logits, &batch.labels, self.smoothing, self.class_weights.as_ref().map(|w| &w[..]))
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_loss", "val_acc", "val_f1", "lr"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn class_weights(set: &ImageSet) -> [f64; 2] {
    let labels = set.labels();
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    [n / (2.0 * (n - pos).max(1.0)), n / (2.0 * pos.max(1.0))]
}

fn check_sets(model: &ModelHandle, train: &ImageSet, val: &ImageSet) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    for set in [train, val] {
        if set.is_dual() != model.is_dual() {
            return Err(Error::Input("dataset kind (single/dual eye) does not match the model".into()));
        }
    }
    let labels = val.labels();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Metric("the validation set must contain both classes".into()));
    }
    Ok(())
}

/// Trains with label-smoothed cross-entropy.
pub fn train(
    model: &mut ModelHandle,
    train_set: &ImageSet,
    val_set: &ImageSet,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    let mut objective = CrossEntropyObjective {
        smoothing: config.label_smoothing,
        class_weights: config.class_balanced.then(|| class_weights(train_set)),
    };
    train_with_objective(model, train_set, val_set, config, outputs, &mut objective)
}

fn snapshot(model: &ModelHandle) -> Vec<(String, Tensor)> {
    model
        .store()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect()
}

fn restore(model: &mut ModelHandle, snap: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in snap {
        model.store_mut().assign(&name, t)?;
    }
    Ok(())
}

fn divergence(epoch: usize, loss: f64) -> Error {
    Error::Divergence { epoch, loss }
}

/// The shared loop. Validation loss is always plain smoothed cross-entropy.
pub fn train_with_objective(
    model: &mut ModelHandle,
    train_set: &ImageSet,
    val_set: &ImageSet,
    config: &TrainConfig,
    outputs: &TrainOutputs,
    objective: &mut dyn Objective,
) -> Result<TrainResult> {
    config.validate()?;
    check_sets(model, train_set, val_set)?;
    let stats = &config.normalization;
    let mut opt = AdamW::new(config.adamw());
    let mut sched = PlateauScheduler::new(config.learning_rate, config.scheduler.factor, config.scheduler.patience_epochs);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<Vec<(String, Tensor)>> = None;
    let mut stopped_early = false;
    let val_labels = val_set.labels();
    let name = model.display_name();

    for epoch in 1..=config.max_epochs {
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let augment = Augment {
                policy: &config.augmentation,
                seed: config.seed,
                epoch,
            };
            let batch = train_set.batch(chunk, Some(augment), stats)?;
            let mut g = Graph::new(true, mix_seed(&[config.seed, epoch as u64, step as u64, 0xD50]));
            let y = model.forward(&mut g, &batch.input)?;
            let loss = match objective.loss(g.value(y), &batch) {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(divergence(epoch, f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() {
                return Err(divergence(epoch, loss.value));
            }
            let grads = g.backward(y, loss.grad)?;
            let updates = g.take_buffer_updates();
            let param_grads = g.param_grads(&grads);
            drop(g);
            opt.step(model.store_mut(), &param_grads, lr);
            model.store_mut().apply_buffer_updates(updates);
            loss_sum += loss.value * chunk.len() as f64;
            step_losses.push(loss.value);
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let logits = match infer(model, val_set, config.batch_size, stats) {
            Err(Error::Numeric(_)) => return Err(divergence(epoch, f64::NAN)),
            other => other?,
        };
        if !logits.all_finite() {
            return Err(divergence(epoch, f64::NAN));
        }
        let val_loss = cross_entropy(&logits, &val_labels, config.label_smoothing)?.value;
        let report = report_from_logits(&logits, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc: report.accuracy,
            val_f1: report.f1,
            lr,
        };
        info!(
            "model={name} epoch={epoch} train_loss={train_loss:.6} val_loss={val_loss:.6} val_acc={:.6} val_f1={:.6} lr={lr:e}",
            report.accuracy, report.f1
        );
        history.push(record);
        if let Some(p) = &outputs.history_csv {
            write_history_csv(p, &history)?;
        }

        if stopper.observe(report.accuracy) {
            best = Some(snapshot(model));
            if let Some(p) = &outputs.checkpoint {
                let meta = CheckpointMeta {
                    spec: model.spec.clone(),
                    siamese: model.siamese.clone(),
                    normalization: config.normalization.clone(),
                    config_hash: outputs.config_hash.clone(),
                    epoch: Some(epoch),
                    val_accuracy: Some(report.accuracy),
                };
                save_checkpoint(model, &meta, p)?;
            }
        }
        sched.step(report.accuracy);
        if stopper.should_stop() {
            stopped_early = true;
            info!("model={name} early_stop_epoch={epoch} best_epoch={}", stopper.best_step());
            break;
        }
    }
    if let Some(snap) = best {
        restore(model, snap)?;
    }
    Ok(TrainResult {
        best_epoch: stopper.best_step(),
        best_val_accuracy: stopper.best().unwrap_or(0.0),
        best_checkpoint: outputs.checkpoint.clone(),
        stopped_early,
        history,
        step_losses,
    })
}
