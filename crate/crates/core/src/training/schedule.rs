//! Plateau learning-rate halving and early stopping on a maximized metric.

use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once `patience` consecutive steps fail to
/// strictly exceed the best value seen, then resets its counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    best: Option<f64>,
    bad_steps: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            lr,
            best: None,
            bad_steps: 0,
            reductions: 0,
        }
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_steps = 0;
        } else {
            self.bad_steps += 1;
            if self.bad_steps >= self.patience {
                self.lr *= self.factor;
                self.reductions += 1;
                self.bad_steps = 0;
            }
        }
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }
}

/// Signals a stop after `patience` consecutive steps without strict improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_step: usize,
    bad_steps: usize,
    steps: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_step: 0,
            bad_steps: 0,
            steps: 0,
        }
    }

    /// Records a value; returns `true` when it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.steps += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_step = self.steps;
            self.bad_steps = 0;
            true
        } else {
            self.bad_steps += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_steps >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based index of the best step, 0 before any step.
    pub fn best_step(&self) -> usize {
        self.best_step
    }
}
