//! Adam, gradient clipping, learning-rate schedules and early stopping.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm threshold used when gradient clipping is enabled.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescale all gradients uniformly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn grad_clip(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    None,
    LrStep,
    LossStep,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::None,
        ScheduleKind::LrStep,
        ScheduleKind::LossStep,
        ScheduleKind::Cosine,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScheduleKind::None => "None",
            ScheduleKind::LrStep => "LRStep",
            ScheduleKind::LossStep => "LossStep",
            ScheduleKind::Cosine => "Cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::None => "none",
            ScheduleKind::LrStep => "lrstep",
            ScheduleKind::LossStep => "lossstep",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ScheduleKind::None),
            "lrstep" => Ok(ScheduleKind::LrStep),
            "lossstep" => Ok(ScheduleKind::LossStep),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// A learning-rate schedule with its knobs already converted to iterations
/// where the schedule is iteration-driven.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub initial_lr: f64,
    /// Cosine period `T` in iterations.
    pub cosine_period: u64,
    pub step_interval_epochs: usize,
    pub step_factor: f64,
    pub loss_patience: usize,
    pub loss_factor: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.initial_lr > 0.0) {
            return bad(format!("initial LR must be positive, got {}", self.initial_lr));
        }
        if self.cosine_period < 1 {
            return bad("cosine period must be at least one iteration".into());
        }
        if self.step_interval_epochs < 1 || self.loss_patience < 1 {
            return bad("step interval and loss patience must be at least 1 epoch".into());
        }
        for f in [self.step_factor, self.loss_factor] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("decay factors must lie in (0, 1), got {f}"));
            }
        }
        Ok(())
    }
}

/// `½·η·(1 + cos(π·(t mod T)/T))`: a half cosine from `η` toward 0 that
/// jumps back to `η` at every multiple of `T`.
pub fn cosine_lr(t: u64, initial_lr: f64, period: u64) -> f64 {
    let phase = t % period;
    0.5 * initial_lr * (1.0 + (PI * phase as f64 / period as f64).cos())
}

/// `η·factor^⌊epoch/interval⌋`.
pub fn lrstep_lr(epoch: usize, initial_lr: f64, interval: usize, factor: f64) -> f64 {
    initial_lr * factor.powi((epoch / interval) as i32)
}

/// Learning rate after replaying completed-epoch training losses: the rate is
/// multiplied by `factor` each time the loss fails to improve on the best so
/// far for `patience` consecutive epochs.
pub fn lossstep_lr(epoch_losses: &[f64], initial_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut tracker = LossStepTracker::new(initial_lr, patience, factor);
    for &loss in epoch_losses {
        tracker.observe(loss);
    }
    tracker.lr
}

/// Incremental form of [`lossstep_lr`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossStepTracker {
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
    patience: usize,
    factor: f64,
}

impl LossStepTracker {
    pub fn new(initial_lr: f64, patience: usize, factor: f64) -> Self {
        LossStepTracker {
            lr: initial_lr,
            best: None,
            since_improvement: 0,
            patience,
            factor,
        }
    }

    pub fn observe(&mut self, loss: f64) {
        match self.best {
            Some(best) if !(loss < best) => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    self.lr *= self.factor;
                    self.since_improvement = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.since_improvement = 0;
            }
        }
    }
}

/// Stateful schedule driven once per minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrScheduler {
    spec: ScheduleSpec,
    iters_per_epoch: u64,
    loss_step: LossStepTracker,
}

impl LrScheduler {
    pub fn new(spec: ScheduleSpec, iters_per_epoch: u64) -> Self {
        LrScheduler {
            spec,
            iters_per_epoch: iters_per_epoch.max(1),
            loss_step: LossStepTracker::new(spec.initial_lr, spec.loss_patience, spec.loss_factor),
        }
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn loss_tracker(&self) -> &LossStepTracker {
        &self.loss_step
    }

    pub fn restore_loss_tracker(&mut self, tracker: LossStepTracker) {
        self.loss_step = tracker;
    }

    /// Learning rate for global minibatch `iteration`.
    pub fn lr(&self, iteration: u64) -> f64 {
        let s = &self.spec;
        match s.kind {
            ScheduleKind::None => s.initial_lr,
            ScheduleKind::Cosine => cosine_lr(iteration, s.initial_lr, s.cosine_period),
            ScheduleKind::LrStep => lrstep_lr(
                (iteration / self.iters_per_epoch) as usize,
                s.initial_lr,
                s.step_interval_epochs,
                s.step_factor,
            ),
            ScheduleKind::LossStep => self.loss_step.lr,
        }
    }

    /// Report a completed epoch's mean training loss.
    pub fn end_epoch(&mut self, train_loss: f64) {
        self.loss_step.observe(train_loss);
    }
}

/// Decision returned by [`EarlyStopping::update`].
#[derive(Debug, PartialEq)]
pub enum StopDecision {
    Continue,
    /// Patience exhausted; the caller should revert to the stored checkpoint.
    StopAndRevert,
}

/// Tracks the best metric (higher is better) and the checkpoint that
/// produced it.
#[derive(Clone, Debug)]
pub struct EarlyStopping<C> {
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    checkpoint: Option<C>,
    since_improvement: usize,
}

impl<C> EarlyStopping<C> {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: None,
            checkpoint: None,
            since_improvement: 0,
        }
    }

    pub fn restore(patience: usize, best: Option<(f64, usize, C)>, since_improvement: usize) -> Self {
        let (best, best_epoch, checkpoint) = match best {
            Some((m, e, c)) => (Some(m), Some(e), Some(c)),
            None => (None, None, None),
        };
        EarlyStopping {
            patience,
            best,
            best_epoch,
            checkpoint,
            since_improvement,
        }
    }

    /// `snapshot` is only invoked on improvement.
    pub fn update(&mut self, epoch: usize, metric: f64, snapshot: impl FnOnce() -> C) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.checkpoint = Some(snapshot());
            self.since_improvement = 0;
            return StopDecision::Continue;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::StopAndRevert
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn checkpoint(&self) -> Option<&C> {
        self.checkpoint.as_ref()
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn patience(&self) -> usize {
        self.patience
    }
}
