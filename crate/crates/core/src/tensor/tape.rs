//! Tape-based reverse-mode differentiation.
//!
//! Every operation pushes a node holding its output value plus whatever
//! context its vector-Jacobian product needs. Node indices are handed out
//! as [`Var`]s; since an op can only consume previously created vars, the
//! creation order is already a topological order and the backward pass is
//! a single reverse sweep. Gradients accumulate additively at fan-out.

use super::conv;
use super::Tensor;
use crate::error::{Error, Result};

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f32 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Clamp bound applied before logarithms in the loss ops.
const LOG_EPS: f32 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel running mean/variance owned by the caller (the tape never
/// differentiates through these).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    SoftmaxChannels {
        input: Var,
        tau: f32,
    },
    PixelDot {
        a: Var,
        b: Var,
    },
    CosineDist {
        a: Var,
        b: Var,
    },
    EuclidDist {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f32,
    },
    ClampOpen {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    BceLoss {
        pred: Var,
        target: Tensor,
    },
    MaskedNegLogMean {
        input: Var,
        mask: Tensor,
        channel: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Exact value for scalar reductions (their sums run in f64).
    scalar64: Option<f64>,
}

/// Record of a forward computation, replayable in reverse for gradients.
///
/// A tape covers one forward/backward cycle: after [`Tape::backward`] it no
/// longer accepts new operations, and the trainer drops it once gradients
/// have been copied out.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    finished: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor, taking ownership.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Record a parameter tensor by copy.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// First element of a scalar node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// Scalar value at f64 precision where the op computed one.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.nodes[v.0]
            .scalar64
            .unwrap_or(self.nodes[v.0].value.data()[0] as f64)
    }

    fn push(&mut self, value: Tensor, op: Op, scalar64: Option<f64>) -> Var {
        assert!(
            !self.finished,
            "tape already consumed by backward; start a new tape"
        );
        self.nodes.push(Node {
            value,
            op,
            scalar64,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    // ── network ops ─────────────────────────────────────────────────

    /// 2-d cross-correlation of `input [N,Cin,H,W]` with
    /// `weight [Cout,Cin,kH,kW]` plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let shape = conv::conv_shape(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let out = conv::conv2d_forward(self.value(input), self.value(weight), self.value(bias), &shape);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            None,
        ))
    }

    /// 2x2 max pooling, stride 2. Requires even spatial extents; gradient
    /// routes to the first maximal element of each block.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = conv::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, None))
    }

    /// Nearest-neighbour 2x upsampling; gradient sums the 2x2 children.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = conv::upsample2_forward(self.value(input))?;
        Ok(self.push(out, Op::Upsample2 { input }, None))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("relu shape");
        self.push(out, Op::Relu { input }, None)
    }

    /// Concatenate along the channel axis; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb {
            return Err(Error::dim("concat_channels", "batch", na, nb));
        }
        if ha != hb {
            return Err(Error::dim("concat_channels", "height", ha, hb));
        }
        if wa != wb {
            return Err(Error::dim("concat_channels", "width", wa, wb));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity((ca + cb) * na * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let t = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::ConcatChannels { a, b }, None))
    }

    /// Batch normalization over `[N,*,H,W]` per channel.
    ///
    /// Training mode normalizes with batch statistics (and folds them into
    /// `running` with momentum [`BN_MOMENTUM`]); inference mode uses the
    /// running averages and leaves them untouched.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).numel() != c {
            return Err(Error::dim("batchnorm", "gamma length", c, self.value(gamma).numel()));
        }
        if self.value(beta).numel() != c {
            return Err(Error::dim("batchnorm", "beta length", c, self.value(beta).numel()));
        }
        if running.mean.len() != c {
            return Err(Error::dim("batchnorm", "running stats length", c, running.mean.len()));
        }
        let m = n * h * w;
        let plane = h * w;

        let (mean, inv_std) = if training {
            if m <= 1 {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("training mode needs more than one element per channel, got {m}"),
                ));
            }
            let data = self.value(input).data();
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &data[base..base + plane] {
                        acc += *v as f64;
                    }
                }
                let mu = acc / m as f64;
                let mut acc2 = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &data[base..base + plane] {
                        let d = *v as f64 - mu;
                        acc2 += d * d;
                    }
                }
                mean[ch] = mu as f32;
                var[ch] = (acc2 / m as f64) as f32;
            }
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            for ch in 0..c {
                let unbiased = var[ch] * m as f32 / (m as f32 - 1.0);
                running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * unbiased;
            }
            (mean, inv_std)
        } else {
            let inv_std: Vec<f32> = running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (running.mean.clone(), inv_std)
        };

        let data = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0f32; data.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + plane {
                    out[i] = ga * (data[i] - mu) * is + be;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            None,
        ))
    }

    // ── distance / head ops ─────────────────────────────────────────

    /// Tempered softmax along the channel axis (axis 1 for rank >= 2,
    /// axis 0 for rank 1): `s_i = exp((p_i - max)/tau) / sum_j ...`.
    pub fn softmax_tau(&mut self, input: Var, tau: f32) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid(
                "softmax_tau",
                format!("temperature must be positive, got {tau}"),
            ));
        }
        let x = self.value(input);
        let (outer, c, inner) = x.channel_view();
        let data = x.data();
        let mut out = vec![0.0f32; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| data[(o * c + ch) * inner + i];
                let mut max = f32::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(at(ch));
                }
                let mut denom = 0.0f32;
                for ch in 0..c {
                    let e = ((at(ch) - max) / tau).exp();
                    out[(o * c + ch) * inner + i] = e;
                    denom += e;
                }
                for ch in 0..c {
                    out[(o * c + ch) * inner + i] /= denom;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SoftmaxChannels { input, tau }, None))
    }

    /// Per-pixel inner product over channels: `[.., C, ..] x2 -> [.., 1, ..]`.
    pub fn pixel_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("pixel_dot", a, b)?;
        let (outer, c, inner) = self.value(a).channel_view();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f32;
                for ch in 0..c {
                    acc += da[(o * c + ch) * inner + i] * db[(o * c + ch) * inner + i];
                }
                out[o * inner + i] = acc;
            }
        }
        let t = Tensor::new(self.value(a).channel_reduced_shape(), out)?;
        Ok(self.push(t, Op::PixelDot { a, b }, None))
    }

    /// Per-pixel cosine distance `(1 - cos) / 2` over channels. A zero
    /// vector on either side yields 0.5 with zero gradient.
    pub fn cosine_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("cosine_dist", a, b)?;
        let (outer, c, inner) = self.value(a).channel_view();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut na2 = 0.0f64;
                let mut nb2 = 0.0f64;
                let mut dot = 0.0f64;
                for ch in 0..c {
                    let x = da[(o * c + ch) * inner + i] as f64;
                    let y = db[(o * c + ch) * inner + i] as f64;
                    na2 += x * x;
                    nb2 += y * y;
                    dot += x * y;
                }
                out[o * inner + i] = if na2 < ZERO_NORM2 || nb2 < ZERO_NORM2 {
                    0.5
                } else {
                    let cos = dot / (na2.sqrt() * nb2.sqrt());
                    ((1.0 - cos) / 2.0) as f32
                };
            }
        }
        let t = Tensor::new(self.value(a).channel_reduced_shape(), out)?;
        Ok(self.push(t, Op::CosineDist { a, b }, None))
    }

    /// Per-pixel squashed Euclidean distance `1 - exp(-||a - b||_2)`.
    pub fn euclid_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("euclid_dist", a, b)?;
        let (outer, c, inner) = self.value(a).channel_view();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for ch in 0..c {
                    let d = (da[(o * c + ch) * inner + i] - db[(o * c + ch) * inner + i]) as f64;
                    acc += d * d;
                }
                out[o * inner + i] = (1.0 - (-acc.sqrt()).exp()) as f32;
            }
        }
        let t = Tensor::new(self.value(a).channel_reduced_shape(), out)?;
        Ok(self.push(t, Op::EuclidDist { a, b }, None))
    }

    // ── elementwise / reductions ────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub { a, b }, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, None))
    }

    /// Clamp values into the open unit interval: the smallest positive
    /// normal up to the largest float below one. Keeps softmatch outputs
    /// strictly inside (0,1) even when the inner product under- or
    /// overflows the f32 grid; gradient is zero where clamping engaged
    /// (the true gradient there is below f32 resolution anyway).
    pub fn clamp_open(&mut self, input: Var) -> Var {
        let upper = 1.0f32.next_down();
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|v| v.clamp(f32::MIN_POSITIVE, upper))
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("clamp shape");
        self.push(t, Op::ClampOpen { input }, None)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("affine shape");
        self.push(t, Op::Affine { input, scale }, None)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let acc: f64 = self.value(input).data().iter().map(|v| *v as f64).sum();
        self.push(Tensor::scalar(acc as f32), Op::Sum { input }, Some(acc))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let acc: f64 =
            self.value(input).data().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        self.push(Tensor::scalar(acc as f32), Op::Mean { input }, Some(acc))
    }

    /// Mean binary cross-entropy of a map in (0,1) against {0,1} targets.
    /// Predictions are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim(
                "bce_loss",
                "target numel",
                p.numel(),
                target.numel(),
            ));
        }
        if let Some(bad) = target.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::invalid(
                "bce_loss",
                format!("labels must be exactly 0 or 1, found {bad}"),
            ));
        }
        let mut acc = 0.0f64;
        for (d, y) in p.data().iter().zip(target.data()) {
            let d = d.clamp(LOG_EPS, 1.0 - LOG_EPS) as f64;
            acc -= if *y == 1.0 { d.ln() } else { (1.0 - d).ln() };
        }
        let acc = acc / p.numel() as f64;
        Ok(self.push(
            Tensor::scalar(acc as f32),
            Op::BceLoss {
                pred,
                target: target.clone(),
            },
            Some(acc),
        ))
    }

    /// Mean of `-ln(s[channel])` over pixels where `mask == 1`, averaged
    /// per sample and then over the batch. Samples with an empty mask
    /// contribute zero.
    pub fn masked_neg_log_mean(&mut self, input: Var, mask: &Tensor, channel: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (mn, mc, mh, mw) = mask.dims4()?;
        if (mn, mh, mw) != (n, h, w) || mc != 1 {
            return Err(Error::invalid(
                "masked_neg_log_mean",
                format!("mask shape {:?} does not match input [{n},1,{h},{w}]", mask.shape()),
            ));
        }
        if channel >= c {
            return Err(Error::dim("masked_neg_log_mean", "channel", c - 1, channel));
        }
        if let Some(bad) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::invalid(
                "masked_neg_log_mean",
                format!("mask must be exactly 0 or 1, found {bad}"),
            ));
        }
        let plane = h * w;
        let data = self.value(input).data();
        let mut total = 0.0f64;
        for s in 0..n {
            let mvals = &mask.data()[s * plane..(s + 1) * plane];
            let cnt = mvals.iter().filter(|v| **v == 1.0).count();
            if cnt == 0 {
                continue;
            }
            let base = (s * c + channel) * plane;
            let mut acc = 0.0f64;
            for (i, m) in mvals.iter().enumerate() {
                if *m == 1.0 {
                    acc -= (data[base + i].max(LOG_EPS) as f64).ln();
                }
            }
            total += acc / cnt as f64;
        }
        let total = total / n as f64;
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::MaskedNegLogMean {
                input,
                mask: mask.clone(),
                channel,
            },
            Some(total),
        ))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::invalid(
                op,
                format!("shape mismatch: {sa:?} vs {sb:?}"),
            ));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node the loss depends on and closes the tape for further recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got {} elements",
                    self.nodes[loss.0].value.numel()
                ),
            ));
        }
        self.finished = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, contribution: &[f32]) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
        for (a, b) in slot.iter_mut().zip(contribution) {
            *a += b;
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f32]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}

            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let shape = conv::conv_shape(
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    &nodes[bias.0].value,
                    *stride,
                    *padding,
                )
                .expect("conv shape validated at forward");
                let cg = conv::conv2d_backward(&nodes[input.0].value, &nodes[weight.0].value, g, &shape);
                Self::accum(grads, nodes, *input, &cg.input);
                Self::accum(grads, nodes, *weight, &cg.weight);
                Self::accum(grads, nodes, *bias, &cg.bias);
            }

            Op::MaxPool2 { input, argmax } => {
                let mut gin = vec![0.0f32; nodes[input.0].value.numel()];
                for (o, idx) in argmax.iter().enumerate() {
                    gin[*idx as usize] += g[o];
                }
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::Upsample2 { input } => {
                let (n, c, h, w) = nodes[input.0].value.dims4().expect("upsample input rank");
                let gin = conv::upsample2_backward(g, n, c, h, w);
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::Relu { input } => {
                let x = nodes[input.0].value.data();
                let gin: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = nodes[a.0].value.dims4().expect("concat lhs rank");
                let cb = nodes[b.0].value.shape()[1];
                let plane = h * w;
                let mut ga = vec![0.0f32; nodes[a.0].value.numel()];
                let mut gb = vec![0.0f32; nodes[b.0].value.numel()];
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga[s * ca * plane..(s + 1) * ca * plane]
                        .copy_from_slice(&g[base..base + ca * plane]);
                    gb[s * cb * plane..(s + 1) * cb * plane]
                        .copy_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                Self::accum(grads, nodes, *a, &ga);
                Self::accum(grads, nodes, *b, &gb);
            }

            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = nodes[input.0].value.dims4().expect("bn input rank");
                let plane = h * w;
                let m = (n * plane) as f64;
                let x = nodes[input.0].value.data();
                let gvals = nodes[gamma.0].value.data();

                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut gin = vec![0.0f32; x.len()];
                for ch in 0..c {
                    let (mu, is) = (mean[ch] as f64, inv_std[ch] as f64);
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for k in 0..plane {
                            let dy = g[base + k] as f64;
                            let xhat = (x[base + k] as f64 - mu) * is;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat as f32;
                    dbeta[ch] = sum_dy as f32;
                    let ga = gvals[ch] as f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for k in 0..plane {
                            let dy = g[base + k] as f64;
                            let xhat = (x[base + k] as f64 - mu) * is;
                            gin[base + k] =
                                (ga * is * (dy - sum_dy / m - xhat * sum_dy_xhat / m)) as f32;
                        }
                    }
                }
                Self::accum(grads, nodes, *input, &gin);
                Self::accum(grads, nodes, *gamma, &dgamma);
                Self::accum(grads, nodes, *beta, &dbeta);
            }

            Op::SoftmaxChannels { input, tau } => {
                let s = node.value.data();
                let (outer, c, inner) = node.value.channel_view();
                let mut gin = vec![0.0f32; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0f32;
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            dot += g[k] * s[k];
                        }
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            gin[k] = s[k] * (g[k] - dot) / tau;
                        }
                    }
                }
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::PixelDot { a, b } => {
                let (outer, c, inner) = nodes[a.0].value.channel_view();
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let mut ga = vec![0.0f32; da.len()];
                let mut gb = vec![0.0f32; db.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            ga[k] = gv * db[k];
                            gb[k] = gv * da[k];
                        }
                    }
                }
                Self::accum(grads, nodes, *a, &ga);
                Self::accum(grads, nodes, *b, &gb);
            }

            Op::CosineDist { a, b } => {
                let (outer, c, inner) = nodes[a.0].value.channel_view();
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let mut ga = vec![0.0f32; da.len()];
                let mut gb = vec![0.0f32; db.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i] as f64;
                        let mut na2 = 0.0f64;
                        let mut nb2 = 0.0f64;
                        let mut dot = 0.0f64;
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            let (x, y) = (da[k] as f64, db[k] as f64);
                            na2 += x * x;
                            nb2 += y * y;
                            dot += x * y;
                        }
                        if na2 < ZERO_NORM2 || nb2 < ZERO_NORM2 {
                            continue; // defined fallback: zero gradient
                        }
                        let (na, nb) = (na2.sqrt(), nb2.sqrt());
                        let cos = dot / (na * nb);
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            let (x, y) = (da[k] as f64, db[k] as f64);
                            // d = (1 - cos)/2
                            ga[k] = (-0.5 * gv * (y / (na * nb) - cos * x / na2)) as f32;
                            gb[k] = (-0.5 * gv * (x / (na * nb) - cos * y / nb2)) as f32;
                        }
                    }
                }
                Self::accum(grads, nodes, *a, &ga);
                Self::accum(grads, nodes, *b, &gb);
            }

            Op::EuclidDist { a, b } => {
                let (outer, c, inner) = nodes[a.0].value.channel_view();
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let mut ga = vec![0.0f32; da.len()];
                let mut gb = vec![0.0f32; db.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i] as f64;
                        let mut acc = 0.0f64;
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            let d = (da[k] - db[k]) as f64;
                            acc += d * d;
                        }
                        let r = acc.sqrt();
                        if r < 1e-12 {
                            continue; // distance minimum; zero (sub)gradient
                        }
                        let scale = gv * (-r).exp() / r;
                        for ch in 0..c {
                            let k = (o * c + ch) * inner + i;
                            let d = (da[k] - db[k]) as f64;
                            ga[k] = (scale * d) as f32;
                            gb[k] = (-scale * d) as f32;
                        }
                    }
                }
                Self::accum(grads, nodes, *a, &ga);
                Self::accum(grads, nodes, *b, &gb);
            }

            Op::Add { a, b } => {
                Self::accum(grads, nodes, *a, g);
                Self::accum(grads, nodes, *b, g);
            }

            Op::Sub { a, b } => {
                Self::accum(grads, nodes, *a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                Self::accum(grads, nodes, *b, &neg);
            }

            Op::Mul { a, b } => {
                let ga = zip_map(g, nodes[b.0].value.data(), |x, y| x * y);
                let gb = zip_map(g, nodes[a.0].value.data(), |x, y| x * y);
                Self::accum(grads, nodes, *a, &ga);
                Self::accum(grads, nodes, *b, &gb);
            }

            Op::Affine { input, scale } => {
                let gin: Vec<f32> = g.iter().map(|v| scale * v).collect();
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::ClampOpen { input } => {
                let upper = 1.0f32.next_down();
                let x = nodes[input.0].value.data();
                let gin: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| {
                        if *xv >= f32::MIN_POSITIVE && *xv <= upper {
                            *gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::Sum { input } => {
                let gin = vec![g[0]; nodes[input.0].value.numel()];
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::Mean { input } => {
                let n = nodes[input.0].value.numel();
                let gin = vec![g[0] / n as f32; n];
                Self::accum(grads, nodes, *input, &gin);
            }

            Op::BceLoss { pred, target } => {
                let p = nodes[pred.0].value.data();
                let m = p.len() as f32;
                let gv = g[0];
                let gin: Vec<f32> = p
                    .iter()
                    .zip(target.data())
                    .map(|(d, y)| {
                        if *d < LOG_EPS || *d > 1.0 - LOG_EPS {
                            0.0 // clamped: flat region
                        } else {
                            gv * (d - y) / (d * (1.0 - d)) / m
                        }
                    })
                    .collect();
                Self::accum(grads, nodes, *pred, &gin);
            }

            Op::MaskedNegLogMean {
                input,
                mask,
                channel,
            } => {
                let (n, c, h, w) = nodes[input.0].value.dims4().expect("mnlm input rank");
                let plane = h * w;
                let data = nodes[input.0].value.data();
                let gv = g[0];
                let mut gin = vec![0.0f32; data.len()];
                for s in 0..n {
                    let mvals = &mask.data()[s * plane..(s + 1) * plane];
                    let cnt = mvals.iter().filter(|v| **v == 1.0).count();
                    if cnt == 0 {
                        continue;
                    }
                    let base = (s * c + channel) * plane;
                    let scale = gv / (n as f32 * cnt as f32);
                    for (i, m) in mvals.iter().enumerate() {
                        if *m == 1.0 && data[base + i] >= LOG_EPS {
                            gin[base + i] = -scale / data[base + i];
                        }
                    }
                }
                Self::accum(grads, nodes, *input, &gin);
            }
        }
    }
}

/// Squared-norm threshold below which a pixel vector counts as zero for
/// the cosine fallback.
const ZERO_NORM2: f64 = 1e-30;

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}
