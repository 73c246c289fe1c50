//! Architecture strings, parameter initialization and the time-unrolled
//! spiking forward pass.
//!
//! An architecture is a `-`-joined list of `{C}Conv{k}`, `AP{w}` and
//! `{F}Dense{out}` tokens (the `{F}` fan-in is optional and checked when
//! given), e.g. `16Conv5-AP2-64Conv5-AP2-1024Dense10`. Convolutions are valid
//! and stride 1. Each convolution, with its optional batch norm and pooling,
//! drives one LIF layer; so does each dense layer. Pooling is applied to the
//! convolution output before it is integrated, which by linearity is the same
//! drive as pooling the membrane.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::neuron::{lif_step_on_tape, LifParams, SpikeMode};
use crate::quant::{clip_proxy_in_place, quantize, quantize_ste, QuantSpec};
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    AvgPool {
        window: usize,
    },
    Dense {
        in_features: Option<usize>,
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { out_channels, kernel } => write!(f, "{out_channels}Conv{kernel}"),
            LayerSpec::AvgPool { window } => write!(f, "AP{window}"),
            LayerSpec::Dense {
                in_features: Some(i),
                out_features,
            } => write!(f, "{i}Dense{out_features}"),
            LayerSpec::Dense {
                in_features: None,
                out_features,
            } => write!(f, "Dense{out_features}"),
        }
    }
}

/// One LIF-driving block, with shapes resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pool: Option<usize>,
        /// `[C, H, W]` of the current fed to the LIF layer.
        out_shape: [usize; 3],
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl Stage {
    fn neuron_shape(&self) -> Vec<usize> {
        match *self {
            Stage::Conv { out_shape, .. } => out_shape.to_vec(),
            Stage::Dense { out_features, .. } => vec![out_features],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    /// Per-sample output shape after each entry of `layers`.
    pub shapes: Vec<Vec<usize>>,
    pub stages: Vec<Stage>,
}

impl Architecture {
    pub fn classes(&self) -> usize {
        match self.stages.last() {
            Some(Stage::Dense { out_features, .. }) => *out_features,
            _ => unreachable!("parse guarantees a trailing dense layer"),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

fn parse_token(token: &str) -> Result<LayerSpec> {
    let err = |reason: &str| Error::Architecture {
        token: token.to_string(),
        reason: reason.to_string(),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 && s.bytes().all(|b| b.is_ascii_digit()) => Ok(v),
            _ => Err(err(&format!("expected a positive integer {what}, got `{s}`"))),
        }
    };
    if let Some(rest) = token.strip_prefix("AP") {
        return Ok(LayerSpec::AvgPool {
            window: num(rest, "pool window")?,
        });
    }
    if let Some((c, k)) = token.split_once("Conv") {
        return Ok(LayerSpec::Conv {
            out_channels: num(c, "channel count")?,
            kernel: num(k, "kernel size")?,
        });
    }
    if let Some((i, o)) = token.split_once("Dense") {
        let in_features = if i.is_empty() { None } else { Some(num(i, "fan-in")?) };
        return Ok(LayerSpec::Dense {
            in_features,
            out_features: num(o, "output size")?,
        });
    }
    Err(err("expected `{C}Conv{k}`, `AP{w}` or `{F}Dense{out}`"))
}

/// Parse an architecture string against a per-sample input shape (`[C, H, W]`,
/// or any shape when the network is dense-only).
pub fn parse_architecture(spec: &str, input_shape: &[usize]) -> Result<Architecture> {
    let tokens: Vec<&str> = spec.split('-').map(str::trim).collect();
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(Error::Architecture {
            token: spec.to_string(),
            reason: "empty token".into(),
        });
    }
    let mut layers = Vec::new();
    let mut shapes = Vec::new();
    let mut stages: Vec<Stage> = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut prev: Option<LayerSpec> = None;

    for token in tokens {
        let layer = parse_token(token)?;
        let err = |reason: String| Error::Architecture {
            token: token.to_string(),
            reason,
        };
        match layer {
            LayerSpec::Conv { out_channels, kernel } => {
                if matches!(prev, Some(LayerSpec::Dense { .. })) {
                    return Err(err("convolution after a dense layer".into()));
                }
                if shape.len() != 3 {
                    return Err(err(format!("convolution needs a [C, H, W] input, got {shape:?}")));
                }
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                if kernel > h || kernel > w {
                    return Err(err(format!("kernel {kernel} larger than {h}x{w} input")));
                }
                shape = vec![out_channels, h - kernel + 1, w - kernel + 1];
                stages.push(Stage::Conv {
                    in_channels: c,
                    out_channels,
                    kernel,
                    pool: None,
                    out_shape: [shape[0], shape[1], shape[2]],
                });
            }
            LayerSpec::AvgPool { window } => {
                let Some(LayerSpec::Conv { .. }) = prev else {
                    return Err(err("pooling must directly follow a convolution".into()));
                };
                let (h, w) = (shape[1], shape[2]);
                if h % window != 0 || w % window != 0 {
                    return Err(err(format!("{h}x{w} not divisible by pool window {window}")));
                }
                shape = vec![shape[0], h / window, w / window];
                if let Some(Stage::Conv { pool, out_shape, .. }) = stages.last_mut() {
                    *pool = Some(window);
                    *out_shape = [shape[0], shape[1], shape[2]];
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let flat: usize = shape.iter().product();
                if let Some(declared) = in_features {
                    if declared != flat {
                        return Err(err(format!(
                            "declared fan-in {declared} but the preceding layers produce {flat} features"
                        )));
                    }
                }
                shape = vec![out_features];
                stages.push(Stage::Dense {
                    in_features: flat,
                    out_features,
                });
            }
        }
        layers.push(layer);
        shapes.push(shape.clone());
        prev = Some(layer);
    }
    if !matches!(stages.last(), Some(Stage::Dense { .. })) {
        return Err(Error::Architecture {
            token: spec.to_string(),
            reason: "architecture must end with a dense layer".into(),
        });
    }
    Ok(Architecture {
        layers,
        input_shape: input_shape.to_vec(),
        shapes,
        stages,
    })
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Dense weights `[N_in, out]` and bias `[out]`, both `U(−√a, √a)` with `a = 1/N_in`.
pub fn init_dense(n_in: usize, out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = dense_init_bound(n_in);
    (uniform(&[n_in, out], bound, rng), uniform(&[out], bound, rng))
}

pub fn dense_init_bound(n_in: usize) -> f64 {
    (1.0 / n_in as f64).sqrt()
}

/// Conv kernel `[C_out, C_in, N_x, N_y]` and bias `[C_out]`, `U(−√a, √a)` with
/// `a = 1/(C_in·N_x·N_y)`.
pub fn init_conv(c_in: usize, n_x: usize, n_y: usize, c_out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = conv_init_bound(c_in, n_x, n_y);
    (
        uniform(&[c_out, c_in, n_x, n_y], bound, rng),
        uniform(&[c_out], bound, rng),
    )
}

pub fn conv_init_bound(c_in: usize, n_x: usize, n_y: usize) -> f64 {
    (1.0 / (c_in * n_x * n_y) as f64).sqrt()
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(
        shape,
        |_| if rng.gen::<f64>() < p { 0.0 } else { keep },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkOptions {
    pub lif: LifParams,
    pub quant: QuantSpec,
    pub batchnorm: bool,
    pub dropout: f64,
    pub detach_reset: bool,
    pub spike_mode: SpikeMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct StageParams {
    weight: usize,
    bias: usize,
    /// `(gamma, shift)` parameter indices and the running-stat buffer slot.
    bn: Option<(usize, usize, usize)>,
}

pub enum ForwardMode<'a> {
    /// Batch statistics, running-stat updates and dropout.
    Train {
        dropout_rng: &'a mut ChaCha8Rng,
    },
    Eval,
}

impl ForwardMode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

/// Nodes produced by [`Network::forward_sequence`].
pub struct SequenceOutput {
    /// Output-layer spikes, one `[N, classes]` node per time step.
    pub spikes: Vec<NodeId>,
    /// Leaf nodes of the full-precision parameters, in [`Network::params`] order.
    pub params: Vec<NodeId>,
}

impl SequenceOutput {
    /// Output spikes as a `[T, N, classes]` record.
    pub fn record(&self, tape: &Tape) -> Result<Tensor> {
        let first = tape.value(self.spikes[0]);
        let mut shape = vec![self.spikes.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * self.spikes.len());
        for &s in &self.spikes {
            data.extend_from_slice(tape.value(s).data());
        }
        Tensor::new(shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    options: NetworkOptions,
    names: Vec<String>,
    params: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
    layout: Vec<StageParams>,
}

impl Network {
    pub fn new(arch: Architecture, options: NetworkOptions, rng: &mut ChaCha8Rng) -> Result<Self> {
        options.lif.validate()?;
        options.quant.validate()?;
        if !(0.0..1.0).contains(&options.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {}",
                options.dropout
            )));
        }
        let mut net = Network {
            arch,
            options,
            names: vec![],
            params: vec![],
            buffer_names: vec![],
            buffers: vec![],
            layout: vec![],
        };
        let (mut conv_i, mut dense_i) = (0, 0);
        for stage in net.arch.stages.clone() {
            let (prefix, (w, b)) = match stage {
                Stage::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    conv_i += 1;
                    (
                        format!("conv{}", conv_i - 1),
                        init_conv(in_channels, kernel, kernel, out_channels, rng),
                    )
                }
                Stage::Dense {
                    in_features,
                    out_features,
                } => {
                    dense_i += 1;
                    (
                        format!("dense{}", dense_i - 1),
                        init_dense(in_features, out_features, rng),
                    )
                }
            };
            let weight = net.push_param(format!("{prefix}.weight"), w);
            let bias = net.push_param(format!("{prefix}.bias"), b);
            let bn = match stage {
                Stage::Conv { out_channels, .. } if options.batchnorm => {
                    let bn_prefix = format!("bn{}", conv_i - 1);
                    let g = net.push_param(format!("{bn_prefix}.weight"), Tensor::ones(&[out_channels]));
                    let s = net.push_param(format!("{bn_prefix}.bias"), Tensor::zeros(&[out_channels]));
                    let slot = net.buffers.len();
                    net.buffer_names.push(format!("{bn_prefix}.running_mean"));
                    net.buffers.push(Tensor::zeros(&[out_channels]));
                    net.buffer_names.push(format!("{bn_prefix}.running_var"));
                    net.buffers.push(Tensor::ones(&[out_channels]));
                    Some((g, s, slot))
                }
                _ => None,
            };
            net.layout.push(StageParams { weight, bias, bn });
        }
        Ok(net)
    }

    fn push_param(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn options(&self) -> &NetworkOptions {
        &self.options
    }

    pub fn set_spike_mode(&mut self, mode: SpikeMode) {
        self.options.spike_mode = mode;
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    /// Indices into [`Network::params`] of the conv/dense weights (the
    /// tensors that are quantized and clipped).
    pub fn weight_indices(&self) -> Vec<usize> {
        self.layout.iter().map(|s| s.weight).collect()
    }

    /// Weights exactly as the forward pass sees them.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.weight_indices()
            .into_iter()
            .map(|i| quantize(&self.params[i], &self.options.quant))
            .collect()
    }

    pub fn clip_weights(&mut self) {
        for i in self.weight_indices() {
            clip_proxy_in_place(&mut self.params[i]);
        }
    }

    /// Round parameters and buffers to single precision, the storage format
    /// of checkpoints.
    pub fn round_to_storage(&mut self) {
        for t in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            round_f32(t);
        }
    }

    /// All named parameters followed by all named buffers.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.params)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Overwrite parameters and buffers from `(name, tensor)` pairs. Every
    /// tensor must be present with a matching shape; nothing is modified on
    /// error.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str, like: &Tensor| -> Result<Tensor> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        let params = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| lookup(n, p))
            .collect::<Result<Vec<_>>>()?;
        let buffers = self
            .buffer_names
            .iter()
            .zip(&self.buffers)
            .map(|(n, b)| lookup(n, b))
            .collect::<Result<Vec<_>>>()?;
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    /// Unroll the network over `steps` time steps with the input presented
    /// unchanged at every step.
    ///
    /// `input` is `[N, ...input_shape]`. In train mode batch-norm uses batch
    /// statistics and updates its running statistics once per step, and
    /// dropout masks at every dense input are resampled per step.
    pub fn forward_sequence(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        steps: usize,
        mut mode: ForwardMode<'_>,
    ) -> Result<SequenceOutput> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "forward_sequence needs at least one time step".into(),
            ));
        }
        let n = input.shape()[0];
        if input.shape()[1..] != self.arch.input_shape[..] {
            return Err(Error::shape(
                "forward_sequence",
                format!(
                    "layer `{}` expects per-sample input {:?}, got {:?}",
                    self.arch.layers[0],
                    self.arch.input_shape,
                    &input.shape()[1..]
                ),
            ));
        }
        let opts = self.options;
        let train = mode.is_train();

        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let weights: Vec<NodeId> = self
            .layout
            .iter()
            .map(|s| quantize_ste(tape, params[s.weight], &opts.quant))
            .collect::<Result<_>>()?;
        let x0 = tape.leaf(input.clone())?;

        let mut membranes: Vec<NodeId> = self
            .arch
            .stages
            .iter()
            .map(|st| {
                let mut shape = vec![n];
                shape.extend(st.neuron_shape());
                tape.leaf(Tensor::zeros(&shape))
            })
            .collect::<Result<_>>()?;

        // The input is identical at every step, so a leading convolution
        // block produces the same current each step.
        let cached_first = match self.arch.stages[0] {
            Stage::Conv { .. } => Some(self.conv_block(tape, 0, x0, &params, weights[0], train, steps)?),
            Stage::Dense { .. } => None,
        };

        let mut out_spikes = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut x = x0;
            for si in 0..self.arch.stages.len() {
                let current = match (si, cached_first) {
                    (0, Some(c)) => c,
                    _ => match self.arch.stages[si] {
                        Stage::Conv { .. } => self.conv_block(tape, si, x, &params, weights[si], train, 1)?,
                        Stage::Dense { in_features, .. } => {
                            let mut flat = x;
                            if tape.value(x).shape() != [n, in_features] {
                                flat = tape.reshape(x, &[n, in_features])?;
                            }
                            if let ForwardMode::Train { dropout_rng } = &mut mode {
                                if opts.dropout > 0.0 {
                                    let mask = dropout_mask(&[n, in_features], opts.dropout, dropout_rng)?;
                                    flat = tape.mask_mul(flat, mask)?;
                                }
                            }
                            tape.dense(flat, weights[si], params[self.layout[si].bias])
                                .map_err(|e| self.layer_error(si, e))?
                        }
                    },
                };
                let (z, next) = lif_step_on_tape(
                    tape,
                    membranes[si],
                    current,
                    &opts.lif,
                    opts.spike_mode,
                    opts.detach_reset,
                )
                .map_err(|e| self.layer_error(si, e))?;
                membranes[si] = next;
                x = z;
            }
            out_spikes.push(x);
        }
        Ok(SequenceOutput {
            spikes: out_spikes,
            params,
        })
    }

    fn layer_error(&self, stage: usize, e: Error) -> Error {
        match e {
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("stage {stage}: {detail}"),
            },
            other => other,
        }
    }

    /// Conv → [batch norm] → [pool] for stage `si`. `stat_updates` is the
    /// number of running-stat updates the result stands for.
    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &mut self,
        tape: &mut Tape,
        si: usize,
        x: NodeId,
        params: &[NodeId],
        weight: NodeId,
        train: bool,
        stat_updates: usize,
    ) -> Result<NodeId> {
        let sp = self.layout[si];
        let mut y = tape
            .conv2d(x, weight, params[sp.bias])
            .map_err(|e| self.layer_error(si, e))?;
        if let Some((g, s, slot)) = sp.bn {
            if train {
                let (out, mean, var) = tape.batchnorm(y, params[g], params[s], BATCHNORM_EPS, None)?;
                let shape = tape.value(y).shape();
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for _ in 0..stat_updates {
                    for (r, m) in self.buffers[slot].data_mut().iter_mut().zip(&mean) {
                        *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * m;
                    }
                    for (r, v) in self.buffers[slot + 1].data_mut().iter_mut().zip(&var) {
                        *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * v * unbias;
                    }
                }
                y = out;
            } else {
                let mean = self.buffers[slot].data().to_vec();
                let var = self.buffers[slot + 1].data().to_vec();
                y = tape
                    .batchnorm(y, params[g], params[s], BATCHNORM_EPS, Some((&mean, &var)))?
                    .0;
            }
        }
        if let Stage::Conv { pool: Some(w), .. } = self.arch.stages[si] {
            y = tape.avgpool2d(y, w).map_err(|e| self.layer_error(si, e))?;
        }
        Ok(y)
    }
}

pub(crate) fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}
