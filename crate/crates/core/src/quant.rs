//! Uniform symmetric weight quantization for quantization-aware training.
//!
//! A `b`-bit spec maps a tensor onto the `2^b − 1` levels
//! `{−L·s, …, −s, 0, s, …, L·s}` with `L = 2^(b−1) − 1` and per-tensor scale
//! `s = max|w| / L`. Full-precision proxies are kept for the optimizer; the
//! quantized image is what the forward pass sees.

use serde::{Deserialize, Serialize};

use crate::autodiff::{LocalGrad, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bound applied to proxy weights when weight clipping is on.
pub const PROXY_CLIP_BOUND: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub enabled: bool,
    pub clip_proxy: bool,
}

impl QuantSpec {
    pub fn int4() -> Self {
        QuantSpec {
            bits: 4,
            enabled: true,
            clip_proxy: false,
        }
    }

    pub fn disabled() -> Self {
        QuantSpec {
            bits: 32,
            enabled: false,
            clip_proxy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(2..=31).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!(
                "quantizer bit width must be in 2..=31, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Largest code magnitude `L`.
    pub fn max_level(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn num_levels(&self) -> usize {
        (2 * self.max_level() + 1) as usize
    }
}

/// Scale `s` for `w`; `1` for an all-zero tensor.
pub fn scale_for(w: &Tensor, spec: &QuantSpec) -> f64 {
    let m = w.max_abs();
    if m == 0.0 {
        1.0
    } else {
        m / spec.max_level() as f64
    }
}

/// Quantize onto the symmetric codebook, rounding half away from zero.
///
/// The extreme codes reproduce `±max|w|` exactly. With `spec.enabled == false`
/// the tensor is returned unchanged.
pub fn quantize(w: &Tensor, spec: &QuantSpec) -> Tensor {
    if !spec.enabled {
        return w.clone();
    }
    let levels = spec.max_level();
    let max_abs = w.max_abs();
    if max_abs == 0.0 {
        return w.map(|_| 0.0);
    }
    let s = max_abs / levels as f64;
    w.map(|v| {
        let q = (v / s).round().clamp(-(levels as f64), levels as f64) as i64;
        code_value(q, levels, s, max_abs)
    })
}

fn code_value(q: i64, levels: i64, s: f64, max_abs: f64) -> f64 {
    if q == levels {
        max_abs
    } else if q == -levels {
        -max_abs
    } else {
        q as f64 * s
    }
}

/// Quantize on the tape with a straight-through backward (`∂w_q/∂w_r = 1`).
/// Disabled specs record an identity node.
pub fn quantize_ste(tape: &mut Tape, w: NodeId, spec: &QuantSpec) -> Result<NodeId> {
    let value = quantize(tape.value(w), spec);
    tape.custom_map(w, value, LocalGrad::Identity)
}

/// Clamp proxy weights to `[−1, 1]`.
pub fn clip_proxy(w: &Tensor) -> Tensor {
    w.map(|v| v.clamp(-PROXY_CLIP_BOUND, PROXY_CLIP_BOUND))
}

pub fn clip_proxy_in_place(w: &mut Tensor) {
    for v in w.data_mut() {
        *v = v.clamp(-PROXY_CLIP_BOUND, PROXY_CLIP_BOUND);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int4_has_fifteen_levels() {
        let spec = QuantSpec::int4();
        assert_eq!(spec.max_level(), 7);
        assert_eq!(spec.num_levels(), 15);
    }

    #[test]
    fn rounds_to_nearest_level() {
        let w = Tensor::from_vec(vec![0.7, 0.23, 0.0, -0.7]).unwrap();
        let q = quantize(&w, &QuantSpec::int4());
        assert!((q.data()[1] - 0.2).abs() < 1e-15);
        assert_eq!(q.data()[0], 0.7);
        assert_eq!(q.data()[3], -0.7);
        assert_eq!(q.data()[2], 0.0);
    }

    #[test]
    fn half_steps_round_away_from_zero() {
        // max 7 gives s = 1 exactly.
        let w = Tensor::from_vec(vec![7.0, 2.5, -2.5, 0.5, -0.5]).unwrap();
        let q = quantize(&w, &QuantSpec::int4());
        assert_eq!(q.data(), &[7.0, 3.0, -3.0, 1.0, -1.0]);
    }

    #[test]
    fn zero_tensor_stays_zero() {
        let q = quantize(&Tensor::zeros(&[3, 2]), &QuantSpec::int4());
        assert!(q.data().iter().all(|&v| v == 0.0));
        assert_eq!(scale_for(&Tensor::zeros(&[1]), &QuantSpec::int4()), 1.0);
    }

    #[test]
    fn disabled_is_identity() {
        let w = Tensor::from_vec(vec![0.123, -0.456]).unwrap();
        assert_eq!(quantize(&w, &QuantSpec::disabled()), w);
    }

    #[test]
    fn ste_passes_gradient_through() {
        for spec in [QuantSpec::int4(), QuantSpec::disabled()] {
            let mut tape = Tape::new();
            let w = tape
                .leaf(Tensor::from_vec(vec![0.31, -0.9, 0.02, 0.5]).unwrap())
                .unwrap();
            let q = quantize_ste(&mut tape, w, &spec).unwrap();
            let loss = tape.sum(q).unwrap();
            let g = tape.backward(loss).unwrap();
            assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
        }
    }

    #[test]
    fn proxy_clip() {
        let w = Tensor::from_vec(vec![1.5, -0.3, -2.0]).unwrap();
        assert_eq!(clip_proxy(&w).data(), &[1.0, -0.3, -1.0]);
    }
}
