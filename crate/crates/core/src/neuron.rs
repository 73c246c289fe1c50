//! Leaky integrate-and-fire neurons with a fast-sigmoid surrogate gradient.
//!
//! At step `t` the spike is read from the current membrane first,
//! `z_t = 1 if u_t > θ`, and only then is the next membrane formed,
//! `u_{t+1} = β·u_t + I_t − z_t·θ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane decay per step, in `[0, 1]`.
    pub beta: f64,
    /// Firing threshold, `> 0`.
    pub theta: f64,
    /// Surrogate slope, `>= 0`. Zero degenerates to a straight-through estimator.
    pub slope: f64,
}

impl LifParams {
    pub fn new(beta: f64, theta: f64, slope: f64) -> Result<Self> {
        let p = LifParams { beta, theta, slope };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.theta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.slope >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slope k must be >= 0, got {}",
                self.slope
            )));
        }
        Ok(())
    }
}

/// How the spike nonlinearity is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside forward, surrogate backward. Used for training.
    Hard,
    /// Fast-sigmoid forward `(u−θ)/(1+k|u−θ|)` with its true derivative, so the
    /// whole network is smooth and finite differences are meaningful.
    Smoothed,
}

/// Membrane potentials of one layer at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Tensor,
    pub t: usize,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            membrane: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// `1 / (1 + k·|θ − u|)²`.
pub fn surrogate(u: f64, params: &LifParams) -> f64 {
    let d = 1.0 + params.slope * (params.theta - u).abs();
    1.0 / (d * d)
}

pub fn surrogate_grad(u: &Tensor, params: &LifParams) -> Tensor {
    u.map(|v| surrogate(v, params))
}

pub fn smoothed_spike(u: f64, params: &LifParams) -> f64 {
    let x = u - params.theta;
    x / (1.0 + params.slope * x.abs())
}

/// Record the spike nonlinearity of `membrane` on the tape.
pub fn spike(tape: &mut Tape, membrane: NodeId, params: &LifParams, mode: SpikeMode) -> Result<NodeId> {
    let p = *params;
    match mode {
        SpikeMode::Hard => tape.custom_grad(
            membrane,
            move |u| if u > p.theta { 1.0 } else { 0.0 },
            move |u| surrogate(u, &p),
        ),
        SpikeMode::Smoothed => tape.custom_grad(membrane, move |u| smoothed_spike(u, &p), move |u| surrogate(u, &p)),
    }
}

/// One LIF step on the tape. Returns `(spikes_t, membrane_{t+1})`.
pub fn lif_step_on_tape(
    tape: &mut Tape,
    membrane: NodeId,
    current: NodeId,
    params: &LifParams,
    mode: SpikeMode,
    detach_reset: bool,
) -> Result<(NodeId, NodeId)> {
    let (u, i) = (tape.value(membrane), tape.value(current));
    if u.shape() != i.shape() {
        return Err(Error::shape(
            "lif_step",
            format!("membrane {:?} vs input current {:?}", u.shape(), i.shape()),
        ));
    }
    let z = spike(tape, membrane, params, mode)?;
    let next = tape.lif_update(membrane, current, z, params.beta, params.theta, detach_reset)?;
    Ok((z, next))
}

/// Tape-free LIF step, for simulation and inspection.
pub fn lif_step(
    state: &LifState,
    input_current: &Tensor,
    params: &LifParams,
    mode: SpikeMode,
) -> Result<(Tensor, LifState)> {
    if state.membrane.shape() != input_current.shape() {
        return Err(Error::shape(
            "lif_step",
            format!(
                "membrane {:?} vs input current {:?}",
                state.membrane.shape(),
                input_current.shape()
            ),
        ));
    }
    if !state.membrane.all_finite() || !input_current.all_finite() {
        return Err(Error::NonFinite("lif_step".into()));
    }
    let spikes = match mode {
        SpikeMode::Hard => state.membrane.map(|u| if u > params.theta { 1.0 } else { 0.0 }),
        SpikeMode::Smoothed => state.membrane.map(|u| smoothed_spike(u, params)),
    };
    let data = state
        .membrane
        .data()
        .iter()
        .zip(input_current.data())
        .zip(spikes.data())
        .map(|((&u, &i), &z)| params.beta * u + i - z * params.theta)
        .collect();
    let membrane = Tensor::new(state.membrane.shape().to_vec(), data)?;
    if !membrane.all_finite() {
        return Err(Error::NonFinite("lif_step".into()));
    }
    Ok((
        spikes,
        LifState {
            membrane,
            t: state.t + 1,
        },
    ))
}
