//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a [`Node`] whose inputs already live on the tape, so
//! node ids are a topological order and the reverse sweep is a single pass in
//! decreasing id order. Non-differentiable forward maps (spikes, quantization)
//! are recorded through [`Tape::custom_grad`] / [`Tape::custom_map`], which pair
//! an arbitrary forward value with a caller-chosen local gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise local derivative attached to a custom node.
#[derive(Clone, Debug)]
pub enum LocalGrad {
    /// Pass the upstream gradient through unchanged.
    Identity,
    /// Multiply the upstream gradient elementwise by this tensor.
    Elementwise(Tensor),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MaskMul(NodeId, Tensor),
    AddN(Vec<NodeId>),
    Sum(NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    AvgPool2d {
        input: NodeId,
        window: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Custom {
        input: NodeId,
        local: LocalGrad,
    },
    Lif {
        membrane: NodeId,
        current: NodeId,
        spikes: NodeId,
        beta: f64,
        theta: f64,
        detach_reset: bool,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SquaredError {
        input: NodeId,
        target: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MaskMul(..) => "mask_mul",
            Op::AddN(..) => "add_n",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::Dense { .. } => "dense",
            Op::Custom { .. } => "custom_grad",
            Op::Lif { .. } => "lif",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    id: NodeId,
    op: Op,
    value: Tensor,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`'s output, or `None` if the
    /// loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but returns zeros shaped like `like` when the
    /// node received no gradient.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, value });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mask_mul(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let value = self.value(a).zip_map(&mask, |x, m| x * m)?;
        self.push(Op::MaskMul(a, mask), value)
    }

    /// Sum of several same-shaped nodes, accumulated left to right.
    pub fn add_n(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = inputs
            .split_first()
            .ok_or_else(|| Error::shape("add_n", "needs at least one input"))?;
        let mut acc = self.value(first).clone();
        for &id in rest {
            let v = self.value(id);
            acc.expect_same_shape(v, "add_n")?;
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        self.push(Op::AddN(inputs.to_vec()), acc)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Valid (unpadded) stride-1 cross-correlation.
    ///
    /// `input` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        self.push(Op::Conv2d { input, kernel, bias }, value)
    }

    /// Non-overlapping average pooling over `window × window` tiles.
    pub fn avgpool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let value = avgpool2d_forward(self.value(input), window)?;
        self.push(Op::AvgPool2d { input, window }, value)
    }

    /// `input · weight + bias` for `input [N, F]`, `weight [F, M]`, `bias [M]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.push(Op::Dense { input, weight, bias }, value)
    }

    /// Elementwise node whose forward value is `forward(x)` and whose backward
    /// multiplies the upstream gradient by `local_grad(x)`. The local rule is
    /// not required to be the derivative of `forward`.
    pub fn custom_grad(
        &mut self,
        input: NodeId,
        forward: impl Fn(f64) -> f64,
        local_grad: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let value = x.map(forward);
        let local = x.map(local_grad);
        self.push(
            Op::Custom {
                input,
                local: LocalGrad::Elementwise(local),
            },
            value,
        )
    }

    /// Custom node with a precomputed forward value, for forward maps that are
    /// not elementwise (the per-tensor quantizer).
    pub fn custom_map(&mut self, input: NodeId, value: Tensor, local: LocalGrad) -> Result<NodeId> {
        self.value(input).expect_same_shape(&value, "custom_map")?;
        if let LocalGrad::Elementwise(g) = &local {
            value.expect_same_shape(g, "custom_map")?;
        }
        self.push(Op::Custom { input, local }, value)
    }

    /// Membrane update `beta·u + I − theta·z`. With `detach_reset` the reset
    /// term contributes no gradient to the spikes.
    pub fn lif_update(
        &mut self,
        membrane: NodeId,
        current: NodeId,
        spikes: NodeId,
        beta: f64,
        theta: f64,
        detach_reset: bool,
    ) -> Result<NodeId> {
        let u = self.value(membrane);
        let i = self.value(current);
        let z = self.value(spikes);
        u.expect_same_shape(i, "lif")?;
        u.expect_same_shape(z, "lif")?;
        let data = u
            .data()
            .iter()
            .zip(i.data())
            .zip(z.data())
            .map(|((&u, &i), &z)| beta * u + i - z * theta)
            .collect();
        let value = Tensor::new(u.shape().to_vec(), data)?;
        self.push(
            Op::Lif {
                membrane,
                current,
                spikes,
                beta,
                theta,
                detach_reset,
            },
            value,
        )
    }

    /// Per-channel normalization of a `[N, C, H, W]` node followed by the
    /// learnable affine `gamma · x̂ + shift`.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// gradients flow through them; they are returned so the caller can update
    /// running statistics. With `stats = Some((mean, var))` those are treated
    /// as constants.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let x = self.value(input);
        x.expect_rank(4, "batchnorm", "input")?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let g = self.value(gamma);
        let b = self.value(shift);
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("scale/shift must be [{c}], got {:?} / {:?}", g.shape(), b.shape()),
            ));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics length mismatch"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let xd = x.data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_idx in 0..n {
                        let base = (s_idx * c + ch) * plane;
                        s += xd[base..base + plane].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for s_idx in 0..n {
                        let base = (s_idx * c + ch) * plane;
                        ss += xd[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        {
            let gd = g.data();
            let bd = b.data();
            let nd = normalized.data_mut();
            let od = out.data_mut();
            for s_idx in 0..n {
                for ch in 0..c {
                    let base = (s_idx * c + ch) * plane;
                    for k in base..base + plane {
                        let xh = (nd[k] - mean[ch]) * inv_std[ch];
                        nd[k] = xh;
                        od[k] = gd[ch] * xh + bd[ch];
                    }
                }
            }
        }
        let id = self.push(
            Op::BatchNorm {
                input,
                gamma,
                shift,
                normalized,
                inv_std,
                batch_stats: stats.is_none(),
            },
            out,
        )?;
        Ok((id, mean, var))
    }

    /// `mean over rows of Σ_j (x[row, j] − target[row, j])²` for a `[N, M]` input.
    pub fn squared_error(&mut self, input: NodeId, target: Tensor) -> Result<NodeId> {
        let x = self.value(input);
        x.expect_same_shape(&target, "squared_error")?;
        x.expect_rank(2, "squared_error", "input")?;
        let rows = x.shape()[0] as f64;
        let total: f64 = x.data().iter().zip(target.data()).map(|(a, c)| (c - a) * (c - a)).sum();
        self.push(Op::SquaredError { input, target }, Tensor::scalar(total / rows))
    }

    /// Reverse sweep from a scalar `loss` node, seeding its gradient with 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(seed.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |dst| add_into(dst, gd));
                accumulate(grads, self, *b, |dst| add_into(dst, gd));
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |dst| add_into(dst, gd));
                accumulate(grads, self, *b, |dst| {
                    for (d, g) in dst.iter_mut().zip(gd) {
                        *d -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                accumulate(grads, self, *a, |dst| {
                    for ((d, g), y) in dst.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                accumulate(grads, self, *b, |dst| {
                    for ((d, g), x) in dst.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, factor) => accumulate(grads, self, *a, |dst| {
                for (d, g) in dst.iter_mut().zip(gd) {
                    *d += g * factor;
                }
            }),
            Op::MaskMul(a, mask) => accumulate(grads, self, *a, |dst| {
                for ((d, g), m) in dst.iter_mut().zip(gd).zip(mask.data()) {
                    *d += g * m;
                }
            }),
            Op::AddN(inputs) => {
                for &a in inputs {
                    accumulate(grads, self, a, |dst| add_into(dst, gd));
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                accumulate(grads, self, *a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::Reshape(a) => accumulate(grads, self, *a, |dst| add_into(dst, gd)),
            Op::Conv2d { input, kernel, bias } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let dims = ConvDims::new(x, k)?;
                accumulate(grads, self, *bias, |dst| conv2d_backward_bias(&dims, gd, dst));
                accumulate(grads, self, *kernel, |dst| {
                    conv2d_backward_kernel(&dims, x.data(), gd, dst)
                });
                accumulate(grads, self, *input, |dst| {
                    conv2d_backward_input(&dims, k.data(), gd, dst)
                });
            }
            Op::AvgPool2d { input, window } => {
                let x = self.value(*input);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f64;
                accumulate(grads, self, *input, |dst| {
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[(plane * oh + oy) * ow + ox] * inv;
                                for dy in 0..*window {
                                    let row = (plane * h + oy * window + dy) * w + ox * window;
                                    for d in &mut dst[row..row + window] {
                                        *d += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let m = wt.shape()[1];
                let xd = x.data();
                let wd = wt.data();
                accumulate(grads, self, *bias, |dst| {
                    for row in gd.chunks_exact(m) {
                        add_into(dst, row);
                    }
                });
                accumulate(grads, self, *weight, |dst| {
                    for s in 0..n {
                        let grow = &gd[s * m..(s + 1) * m];
                        for fi in 0..f {
                            let xv = xd[s * f + fi];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, g) in dst[fi * m..(fi + 1) * m].iter_mut().zip(grow) {
                                *d += xv * g;
                            }
                        }
                    }
                });
                accumulate(grads, self, *input, |dst| {
                    for s in 0..n {
                        let grow = &gd[s * m..(s + 1) * m];
                        for fi in 0..f {
                            let wrow = &wd[fi * m..(fi + 1) * m];
                            dst[s * f + fi] += wrow.iter().zip(grow).map(|(w, g)| w * g).sum::<f64>();
                        }
                    }
                });
            }
            Op::Custom { input, local } => accumulate(grads, self, *input, |dst| match local {
                LocalGrad::Identity => add_into(dst, gd),
                LocalGrad::Elementwise(l) => {
                    for ((d, g), l) in dst.iter_mut().zip(gd).zip(l.data()) {
                        *d += g * l;
                    }
                }
            }),
            Op::Lif {
                membrane,
                current,
                spikes,
                beta,
                theta,
                detach_reset,
            } => {
                accumulate(grads, self, *membrane, |dst| {
                    for (d, g) in dst.iter_mut().zip(gd) {
                        *d += beta * g;
                    }
                });
                accumulate(grads, self, *current, |dst| add_into(dst, gd));
                if !detach_reset {
                    accumulate(grads, self, *spikes, |dst| {
                        for (d, g) in dst.iter_mut().zip(gd) {
                            *d -= theta * g;
                        }
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                shift,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let plane = x.shape()[2] * x.shape()[3];
                let count = (n * plane) as f64;
                let xh = normalized.data();
                let gam = self.value(*gamma).data();
                // Per-channel Σg and Σg·x̂ feed the scale/shift gradients and
                // the batch-statistics correction of the input gradient.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for k in base..base + plane {
                            sum_g[ch] += gd[k];
                            sum_gx[ch] += gd[k] * xh[k];
                        }
                    }
                }
                accumulate(grads, self, *shift, |dst| add_into(dst, &sum_g));
                accumulate(grads, self, *gamma, |dst| add_into(dst, &sum_gx));
                accumulate(grads, self, *input, |dst| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let a = gam[ch] * inv_std[ch];
                            for k in base..base + plane {
                                dst[k] += if *batch_stats {
                                    a * (gd[k] - sum_g[ch] / count - xh[k] * sum_gx[ch] / count)
                                } else {
                                    a * gd[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::SquaredError { input, target } => {
                let x = self.value(*input);
                let rows = x.shape()[0] as f64;
                let s = gd[0] * 2.0 / rows;
                accumulate(grads, self, *input, |dst| {
                    for ((d, a), c) in dst.iter_mut().zip(x.data()).zip(target.data()) {
                        *d += s * (a - c);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Run `f` on the (lazily zero-initialized) gradient buffer of `id`.
fn accumulate(grads: &mut [Option<Tensor>], tape: &Tape, id: NodeId, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[id.0];
    let buf = slot.get_or_insert_with(|| Tensor::zeros(tape.value(id).shape()));
    f(buf.data_mut());
}

pub(crate) struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(input: &Tensor, kernel: &Tensor) -> Result<Self> {
        input.expect_rank(4, "conv2d", "input")?;
        kernel.expect_rank(4, "conv2d", "kernel")?;
        let (n, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (cout, kcin, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = ConvDims::new(input, kernel)?;
    if bias.shape() != [d.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{}], got {:?}", d.cout, bias.shape()),
        ));
    }
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let out_plane = d.oh * d.ow;
    let mut out = vec![0.0; d.n * d.cout * out_plane];
    for s in 0..d.n {
        for (co, &bias_co) in b.iter().enumerate() {
            let obase = (s * d.cout + co) * out_plane;
            let oplane = &mut out[obase..obase + out_plane];
            oplane.iter_mut().for_each(|o| *o = bias_co);
            for ci in 0..d.cin {
                let xbase = (s * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let kv = k[kbase + ky * d.kw + kx];
                        for oy in 0..d.oh {
                            let xrow = &x[xbase + (oy + ky) * d.w + kx..][..d.ow];
                            let orow = &mut oplane[oy * d.ow..(oy + 1) * d.ow];
                            for (o, xv) in orow.iter_mut().zip(xrow) {
                                *o += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

fn conv2d_backward_bias(d: &ConvDims, g: &[f64], dst: &mut [f64]) {
    let plane = d.oh * d.ow;
    for s in 0..d.n {
        for (co, db) in dst.iter_mut().enumerate() {
            let base = (s * d.cout + co) * plane;
            *db += g[base..base + plane].iter().sum::<f64>();
        }
    }
}

fn conv2d_backward_kernel(d: &ConvDims, x: &[f64], g: &[f64], dst: &mut [f64]) {
    let plane = d.oh * d.ow;
    for s in 0..d.n {
        for co in 0..d.cout {
            let gplane = &g[(s * d.cout + co) * plane..][..plane];
            for ci in 0..d.cin {
                let xbase = (s * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let xrow = &x[xbase + (oy + ky) * d.w + kx..][..d.ow];
                            let grow = &gplane[oy * d.ow..(oy + 1) * d.ow];
                            acc += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dst[kbase + ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(d: &ConvDims, k: &[f64], g: &[f64], dst: &mut [f64]) {
    let plane = d.oh * d.ow;
    for s in 0..d.n {
        for co in 0..d.cout {
            let gplane = &g[(s * d.cout + co) * plane..][..plane];
            for ci in 0..d.cin {
                let xbase = (s * d.cin + ci) * d.h * d.w;
                let kbase = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let kv = k[kbase + ky * d.kw + kx];
                        for oy in 0..d.oh {
                            let drow = &mut dst[xbase + (oy + ky) * d.w + kx..][..d.ow];
                            let grow = &gplane[oy * d.ow..(oy + 1) * d.ow];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn avgpool2d_forward(input: &Tensor, window: usize) -> Result<Tensor> {
    input.expect_rank(4, "avgpool2d", "input")?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "avgpool2d",
            format!("{h}x{w} extent not divisible by window {window}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let inv = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..window {
                    let row = (plane * h + oy * window + dy) * w + ox * window;
                    acc += x[row..row + window].iter().sum::<f64>();
                }
                out[(plane * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank(2, "dense", "input")?;
    weight.expect_rank(2, "dense", "weight")?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let (wf, m) = (weight.shape()[0], weight.shape()[1]);
    if wf != f {
        return Err(Error::shape(
            "dense",
            format!("input has {f} features but weight expects {wf}"),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "dense",
            format!("bias must be [{m}], got {:?}", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * m);
    for s in 0..n {
        let mut row = bias.data().to_vec();
        for fi in 0..f {
            let xv = x[s * f + fi];
            if xv == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(&w[fi * m..(fi + 1) * m]) {
                *o += xv * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Tensor::new(vec![n, m], out)
}
