//! Self-distillation pre-training: EMA teacher, centering and sharpening,
//! masked-particle / cross-view `[CLS]` / KoLeo losses, schedules and the
//! training loop.

mod loss;
mod train;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::augment::AugmentError;
use crate::jetdata::DataError;
use crate::network::{ModelParams, NetworkError};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Float, TensorError};

pub use loss::{
    center_and_sharpen, loss_cls, loss_koleo, loss_particle, mean_entropy, row_mean,
    student_log_probs, total_loss, update_center, KOLEO_EPS, LOG_FLOOR,
};
pub use train::{
    pretrain, student_loss, teacher_forward, train_step, DistillTargets, LossTerms, PretrainOutput,
    StepMetrics, TeacherOutput, METRICS_HEADER,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSchedule {
    /// Cosine over total optimizer steps.
    PerStep,
    /// Cosine over epochs, constant within an epoch.
    PerEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then constant.
    Constant,
    /// Linear warmup, then cosine decay to zero.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub tau_center: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub ema_schedule: EmaSchedule,
    pub koleo_lambda: f64,
    /// Learning rate at batch size 256; the peak LR scales linearly with batch.
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Metrics row every `log_every` steps (the last step is always logged).
    pub log_every: u64,
    /// Intermediate checkpoints every `checkpoint_every` epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_teacher: 0.04,
            tau_student: 0.1,
            tau_center: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            ema_schedule: EmaSchedule::PerStep,
            koleo_lambda: 0.01,
            base_lr: 5e-4,
            warmup_epochs: 10.0,
            lr_schedule: LrSchedule::Constant,
            batch_size: 1024,
            epochs: 100,
            weight_decay: 1e-4,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.into()));
        if !(self.tau_teacher > 0.0 && self.tau_student > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(0.0..1.0).contains(&self.tau_center) {
            return bad("tau_center must lie in [0, 1)");
        }
        if !(0.0 <= self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0) {
            return bad("need 0 <= ema_start <= ema_end <= 1");
        }
        if self.koleo_lambda < 0.0 {
            return bad("koleo_lambda must be >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.base_lr > 0.0 && self.warmup_epochs >= 0.0 && self.weight_decay >= 0.0) {
            return bad("base_lr must be positive, warmup_epochs and weight_decay non-negative");
        }
        if self.epochs == 0 || self.log_every == 0 {
            return bad("epochs and log_every must be positive");
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Learning rate at `step` given the number of steps per epoch.
pub fn lr_at(step: u64, cfg: &DistillConfig, steps_per_epoch: u64) -> f64 {
    let peak = cfg.peak_lr();
    let warmup = cfg.warmup_epochs * steps_per_epoch as f64;
    let s = step as f64;
    if s < warmup {
        return peak * s / warmup;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let total = (cfg.epochs as u64 * steps_per_epoch) as f64;
            let span = (total - warmup).max(1.0);
            let frac = ((s - warmup) / span).min(1.0);
            peak * 0.5 * (1.0 + (PI * frac).cos())
        }
    }
}

/// Teacher momentum `end - (end - start) (cos(pi step / total) + 1) / 2`.
pub fn ema_momentum_at(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    end - (end - start) * ((PI * frac).cos() + 1.0) / 2.0
}

/// `theta_t <- tau theta_t + (1 - tau) theta_s` for every array.
pub fn ema_update<T: Float>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, tau: f64) {
    assert!(
        teacher.same_shapes(student),
        "teacher and student layouts differ"
    );
    let (a, b) = (T::of(tau), T::of(1.0 - tau));
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
}

/// Everything that evolves during pre-training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Float> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub center_cls: Vec<T>,
    pub center_part: Vec<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

impl<T: Float> TrainState<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ModelParams<T>, cfg: &DistillConfig, seed: u64) -> Self {
        let d = student.config.d_proj;
        Self {
            teacher: student.clone(),
            optimizer: AdamW::new(&student, cfg.adamw()),
            student,
            center_cls: vec![T::zero(); d],
            center_part: vec![T::zero(); d],
            step: 0,
            epoch: 0,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_schedule_endpoints() {
        assert!((ema_momentum_at(0, 1000, 0.996, 1.0) - 0.996).abs() < 1e-15);
        assert!((ema_momentum_at(1000, 1000, 0.996, 1.0) - 1.0).abs() < 1e-15);
        assert!((ema_momentum_at(500, 1000, 0.996, 1.0) - 0.998).abs() < 1e-12);
    }

    #[test]
    fn lr_warmup_and_scaling() {
        let cfg = DistillConfig {
            batch_size: 1024,
            ..Default::default()
        };
        assert!((cfg.peak_lr() - 2e-3).abs() < 1e-15);
        assert_eq!(lr_at(0, &cfg, 10), 0.0);
        assert!((lr_at(50, &cfg, 10) - 1e-3).abs() < 1e-15);
        assert!((lr_at(100, &cfg, 10) - 2e-3).abs() < 1e-15);
        assert!((lr_at(5000, &cfg, 10) - 2e-3).abs() < 1e-15);
        let cos = DistillConfig {
            lr_schedule: LrSchedule::Cosine,
            ..cfg
        };
        assert!(lr_at(999, &cos, 10) < 1e-6);
    }

    #[test]
    fn ema_update_arithmetic() {
        let cfg = crate::network::NetworkConfig::with_dims(4, 1, 2);
        let mut t = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let mut s = t.clone();
        for x in t.tensors.iter_mut() {
            x.data_mut().fill(2.0);
        }
        for x in s.tensors.iter_mut() {
            x.data_mut().fill(1.0);
        }
        let orig = t.clone();
        ema_update(&mut t, &s, 1.0);
        assert_eq!(t, orig);
        ema_update(&mut t, &s, 0.996);
        assert!(t
            .tensors
            .iter()
            .all(|x| x.data().iter().all(|&v| (v - 1.996).abs() < 1e-12)));
        ema_update(&mut t, &s, 0.0);
        assert_eq!(t.tensors, s.tensors);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let c = DistillConfig {
            tau_center: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = DistillConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
