//! Temperature-softened teacher/student distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loader::{Batch, ImageSet};
use crate::modelzoo::ModelHandle;
use crate::tensor::Tensor;
use crate::training::{
    check_batch, cross_entropy_f64, log_softmax, train_with_objective, Loss, Objective, TrainConfig, TrainOutputs,
    TrainResult,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(softmax(z_t/T) || softmax(z_s/T))`
    #[default]
    TeacherToStudent,
    /// `KL(softmax(z_s/T) || softmax(z_t/T))`
    StudentToTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub kl_direction: KlDirection,
    /// Smoothing of the hard-label term.
    pub label_smoothing: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 2.0,
            alpha: 0.7,
            kl_direction: KlDirection::TeacherToStudent,
            label_smoothing: 0.1,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Blended loss `alpha * KL * T^2 + (1 - alpha) * CE` on row-major `[B, classes]` logits,
/// batch-averaged, with the gradient with respect to the student logits.
pub fn kd_loss_f64(
    student: &[f64],
    teacher: &[f64],
    classes: usize,
    labels: &[usize],
    config: &KdConfig,
) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    check_batch(student, classes, labels)?;
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher logits ({}) and student logits ({}) differ in size",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite teacher logits".into()));
    }
    let t = config.temperature;
    let a = config.alpha;
    let b = labels.len() as f64;
    let (ce, ce_grad) = cross_entropy_f64(student, classes, labels, config.label_smoothing, None)?;
    let mut kl_sum = 0.0;
    let mut grad: Vec<f64> = ce_grad.iter().map(|g| (1.0 - a) * g).collect();
    for r in 0..labels.len() {
        let span = r * classes..(r + 1) * classes;
        let ls: Vec<f64> = log_softmax(&student[span.clone()].iter().map(|z| z / t).collect::<Vec<_>>());
        let lt: Vec<f64> = log_softmax(&teacher[span.clone()].iter().map(|z| z / t).collect::<Vec<_>>());
        match config.kl_direction {
            KlDirection::TeacherToStudent => {
                let kl: f64 = (0..classes).map(|c| lt[c].exp() * (lt[c] - ls[c])).sum();
                kl_sum += kl;
                for c in 0..classes {
                    grad[span.start + c] += a * t * (ls[c].exp() - lt[c].exp()) / b;
                }
            }
            KlDirection::StudentToTeacher => {
                let kl: f64 = (0..classes).map(|c| ls[c].exp() * (ls[c] - lt[c])).sum();
                kl_sum += kl;
                for c in 0..classes {
                    grad[span.start + c] += a * t * ls[c].exp() * (ls[c] - lt[c] - kl) / b;
                }
            }
        }
    }
    let value = a * t * t * kl_sum / b + (1.0 - a) * ce;
    Ok((value, grad))
}

pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], config: &KdConfig) -> Result<Loss> {
    if student.rank() != 2 || student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student {:?} and teacher {:?} logits must both be [B, C]",
            student.shape(),
            teacher.shape()
        )));
    }
    let zs: Vec<f64> = student.data().iter().map(|&v| v as f64).collect();
    let zt: Vec<f64> = teacher.data().iter().map(|&v| v as f64).collect();
    let (value, grad) = kd_loss_f64(&zs, &zt, student.dim(1), labels, config)?;
    Ok(Loss {
        value,
        grad: Tensor::new(student.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect()),
    })
}

struct KdObjective<'a> {
    teacher: &'a ModelHandle,
    config: &'a KdConfig,
}

impl Objective for KdObjective<'_> {
    fn loss(&mut self, logits: &Tensor, batch: &Batch) -> Result<Loss> {
        // same augmented batch the student saw, eval mode, no gradient
        let zt = self.teacher.predict(&batch.input)?;
        kd_loss(logits, &zt, &batch.labels, self.config)
    }
}

/// Trains `student` against a frozen `teacher`; validation, scheduling, early stopping and
/// checkpointing are those of plain training.
pub fn distill_train(
    teacher: &ModelHandle,
    student: &mut ModelHandle,
    train_set: &ImageSet,
    val_set: &ImageSet,
    kd: &KdConfig,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    kd.validate()?;
    if teacher.spec.num_classes != student.spec.num_classes {
        return Err(Error::Checkpoint(format!(
            "teacher has {} classes, student {}",
            teacher.spec.num_classes, student.spec.num_classes
        )));
    }
    if teacher.is_dual() || student.is_dual() {
        return Err(Error::Input("distillation runs on single-eye models".into()));
    }
    let mut objective = KdObjective { teacher, config: kd };
    train_with_objective(student, train_set, val_set, config, outputs, &mut objective)
}
