//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qsnn::autodiff::Tape;
use qsnn::model::{parse_architecture, ForwardMode, Network, NetworkOptions};
use qsnn::neuron::{LifParams, SpikeMode};
use qsnn::objective::{batch_targets, spike_count_loss_on_tape, TargetSpec};
use qsnn::quant::QuantSpec;
use qsnn::rng::{stream, Stream};
use qsnn::{Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Valid, stride-1 cross-correlation written as the textbook nested sum.
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    Tensor::from_fn(&[n, cout, oh, ow], |i| {
        let ox = i % ow;
        let oy = (i / ow) % oh;
        let co = (i / (ow * oh)) % cout;
        let s = i / (ow * oh * cout);
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    acc += x.get(&[s, ci, oy + ky, ox + kx]) * k.get(&[co, ci, ky, kx]);
                }
            }
        }
        acc
    })
}

/// Nearest entry of the explicit 4-bit codebook `{q·max/7 : q = −7..7}`,
/// preferring the larger magnitude on exact ties.
pub fn quantize_oracle(w: &[f64]) -> Vec<f64> {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; w.len()];
    }
    let codebook: Vec<f64> = (-7i32..=7)
        .map(|q| match q {
            7 => max,
            -7 => -max,
            _ => q as f64 * (max / 7.0),
        })
        .collect();
    w.iter()
        .map(|&v| {
            let mut best = codebook[0];
            for &c in &codebook[1..] {
                let (d, db) = ((v - c).abs(), (v - best).abs());
                if d < db || (d == db && c.abs() > best.abs()) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Spike-count loss of `net` on a batch, evaluated without dropout.
pub fn loss_of(net: &mut Network, x: &Tensor, labels: &[usize], steps: usize) -> f64 {
    let mut tape = Tape::new();
    let out = net.forward_sequence(&mut tape, x, steps, ForwardMode::Eval).unwrap();
    let targets = batch_targets(labels, &TargetSpec::new(net.architecture().classes(), steps)).unwrap();
    let loss = spike_count_loss_on_tape(&mut tape, &out.spikes, &targets).unwrap();
    tape.value(loss).data()[0]
}

/// Autodiff gradients of [`loss_of`] with respect to every parameter.
pub fn grads_of(net: &mut Network, x: &Tensor, labels: &[usize], steps: usize) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let out = net.forward_sequence(&mut tape, x, steps, ForwardMode::Eval).unwrap();
    let targets = batch_targets(labels, &TargetSpec::new(net.architecture().classes(), steps)).unwrap();
    let loss = spike_count_loss_on_tape(&mut tape, &out.spikes, &targets).unwrap();
    let g = tape.backward(loss).unwrap();
    out.params
        .iter()
        .zip(net.params())
        .map(|(&id, p)| g.get_or_zeros(id, p))
        .collect()
}

/// Central finite differences of [`loss_of`] for every parameter element.
pub fn finite_difference(net: &mut Network, x: &Tensor, labels: &[usize], steps: usize, h: f64) -> Vec<Tensor> {
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut out = vec![];
    for (pi, shape) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(shape);
        for j in 0..g.len() {
            let orig = net.params()[pi].data()[j];
            net.params_mut()[pi].data_mut()[j] = orig + h;
            let up = loss_of(net, x, labels, steps);
            net.params_mut()[pi].data_mut()[j] = orig - h;
            let down = loss_of(net, x, labels, steps);
            net.params_mut()[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all elements.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// A desk preset with dataset paths made absolute.
pub fn desk_preset(name: &str) -> TrainConfig {
    let mut cfg = TrainConfig::preset(name).unwrap();
    cfg.resolve_paths(&repo_root());
    cfg
}

/// A small, fast configuration on the desk MNIST files.
pub fn tiny_config(precision: &str) -> TrainConfig {
    let mut cfg = desk_preset(&format!("desk-{precision}"));
    cfg.name = format!("tiny-{precision}");
    cfg.architecture = "4Conv5-AP4-Dense10".into();
    cfg.time_steps = 5;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.train_subset = Some(96);
    cfg.validation_subset = Some(32);
    cfg.test_subset = Some(64);
    cfg.eval_batch_size = 64;
    cfg.curve_window = 4;
    cfg
}

/// Small smoothed-mode network (under 200 parameters) for gradient checks.
pub fn smoothed_net(seed: u64, batchnorm: bool) -> Network {
    let arch = parse_architecture("2Conv3-AP2-3Conv2-Dense3", &[1, 8, 8]).unwrap();
    let opts = NetworkOptions {
        lif: LifParams::new(0.9, 1.0, 2.0).unwrap(),
        quant: QuantSpec::disabled(),
        batchnorm,
        dropout: 0.0,
        detach_reset: false,
        spike_mode: SpikeMode::Smoothed,
    };
    let mut net = Network::new(arch, opts, &mut stream(seed, Stream::Init, 0)).unwrap();
    // Wider weights than the default init keep every layer well driven.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for i in net.weight_indices() {
        let shape = net.params()[i].shape().to_vec();
        net.params_mut()[i] = random_tensor(&shape, 1.5, &mut rng);
    }
    net
}
