//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Each operation computes its value eagerly and records a node; the tape
//! is therefore always topologically ordered and the backward pass visits
//! every node exactly once, in reverse. The op set is sized for small
//! convolutional classifiers over (channel, time) layouts: grouped 2-D
//! convolution (covers depthwise/separable), temporal mean/max pooling,
//! batch normalization with train/eval modes, ELU/square/log activations,
//! linear layers, dropout, and softmax cross-entropy.
//!
//! A tape is single-threaded; distinct tapes over shared read-only
//! parameter tensors may run concurrently.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch-norm node, needed by
/// the caller to maintain running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    /// Number of values reduced per feature.
    pub count: usize,
}

enum Op {
    Leaf {
        differentiable: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    /// Row-broadcast bias add: x is (rows, n), bias is (n).
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        pad: (usize, usize),
    },
    AvgPool {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        training: bool,
        inv_std: Vec<f64>,
        normalized: Vec<f64>,
    },
    Elu {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    SafeLog {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    differentiable: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to the given node.
    ///
    /// Errors if the node is a non-differentiable leaf (or otherwise
    /// excluded from gradient propagation).
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor> {
        if !self.differentiable[id.0] {
            return Err(Error::NonDifferentiable(id.0));
        }
        self.grads[id.0]
            .as_ref()
            .ok_or(Error::NonDifferentiable(id.0))
    }
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const BN_EPS: f64 = 1e-5;
const SAFE_LOG_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { differentiable } => *differentiable,
            _ => self.op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add { a, b } => vec![*a, *b],
            Op::Scale { a, .. } => vec![*a],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::AvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Elu { x }
            | Op::Square { x }
            | Op::SafeLog { x }
            | Op::Dropout { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, value: Tensor, differentiable: bool) -> NodeId {
        self.push(Op::Leaf { differentiable }, value)
    }

    fn shape_err(op: &'static str, expected: String, actual: String) -> Error {
        Error::ShapeMismatch {
            op,
            expected,
            actual,
        }
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale { a, factor }, value))
    }

    /// `x + bias` where x is (rows, n) and bias is (n), broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.rank() != 1 || vx.shape()[1] != vb.shape()[0] {
            return Err(Self::shape_err(
                "add_bias",
                "(rows, n) plus (n)".into(),
                format!("{:?} plus {:?}", vx.shape(), vb.shape()),
            ));
        }
        let n = vb.shape()[0];
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data()[i % n];
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias { x, bias }, value))
    }

    /// Matrix product of (m,k) and (k,n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Self::shape_err(
                "matmul",
                "(m,k) x (k,n)".into(),
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data()[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &vb.data()[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value))
    }

    /// Grouped 2-D convolution, stride 1, symmetric zero padding.
    ///
    /// x: (B, Cin, H, W), w: (Cout, Cin/groups, KH, KW), bias: (Cout).
    /// Output: (B, Cout, H + 2*pad.0 - KH + 1, W + 2*pad.1 - KW + 1).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        pad: (usize, usize),
    ) -> Result<NodeId> {
        if x == w {
            return Err(Error::InvalidConfig(
                "conv2d input and weight must be distinct nodes".into(),
            ));
        }
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 {
            return Err(Self::shape_err(
                "conv2d",
                "rank-4 input and weight".into(),
                format!("{:?} and {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (b_sz, cin, h, w_in) = (
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
        );
        let (cout, cig, kh, kw) = (
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
        );
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return Err(Self::shape_err(
                "conv2d",
                format!("groups dividing in/out channels, weight in-dim {}", cin / groups.max(1)),
                format!("groups={groups}, cin={cin}, cout={cout}, weight={:?}", vw.shape()),
            ));
        }
        if let Some(bid) = bias {
            let vb = self.value(bid);
            if vb.shape() != [cout] {
                return Err(Self::shape_err(
                    "conv2d",
                    format!("bias ({cout})"),
                    format!("{:?}", vb.shape()),
                ));
            }
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w_in + 2 * pw < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel ({kh},{kw}) fitting padded input ({},{})", h + 2 * ph, w_in + 2 * pw),
                "kernel larger than input".into(),
            ));
        }
        let ho = h + 2 * ph - kh + 1;
        let wo = w_in + 2 * pw - kw + 1;
        let copg = cout / groups;

        let mut out = vec![0.0; b_sz * cout * ho * wo];
        {
            let xd = vx.data();
            let wd = vw.data();
            let bd = bias.map(|bid| self.value(bid).data().to_vec());
            for b in 0..b_sz {
                for co in 0..cout {
                    let g = co / copg;
                    let base_bias = bd.as_ref().map_or(0.0, |v| v[co]);
                    for oh in 0..ho {
                        let out_row =
                            &mut out[((b * cout + co) * ho + oh) * wo..((b * cout + co) * ho + oh + 1) * wo];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let mut acc = base_bias;
                            for cg in 0..cig {
                                let ci = g * cig + cg;
                                for ki in 0..kh {
                                    let ih = oh + ki;
                                    if ih < ph || ih >= h + ph {
                                        continue;
                                    }
                                    let ih = ih - ph;
                                    // valid kernel-column range for this ow
                                    let k_lo = pw.saturating_sub(ow);
                                    let k_hi = kw.min(w_in + pw - ow);
                                    if k_lo >= k_hi {
                                        continue;
                                    }
                                    let xrow = &xd[((b * cin + ci) * h + ih) * w_in..];
                                    let wrow = &wd[((co * cig + cg) * kh + ki) * kw..];
                                    let x_off = ow + k_lo - pw;
                                    let len = k_hi - k_lo;
                                    let xs = &xrow[x_off..x_off + len];
                                    let ws = &wrow[k_lo..k_lo + len];
                                    let mut dot = 0.0;
                                    for (xv, wv) in xs.iter().zip(ws) {
                                        dot += xv * wv;
                                    }
                                    acc += dot;
                                }
                            }
                            *o = acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b_sz, cout, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                groups,
                pad,
            },
            value,
        ))
    }

    fn pool_check(
        &self,
        op: &'static str,
        x: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Self::shape_err(
                op,
                "rank-4 input".into(),
                format!("{:?}", vx.shape()),
            ));
        }
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        if kernel == 0 || stride == 0 || kernel > w {
            return Err(Self::shape_err(
                op,
                format!("kernel in 1..={w} and stride >= 1"),
                format!("kernel {kernel}, stride {stride}"),
            ));
        }
        let wo = (w - kernel) / stride + 1;
        Ok((b, c, h, w, wo))
    }

    /// Mean pooling along the last (time) axis with kernel (1,k).
    pub fn avg_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (b, c, h, w, wo) = self.pool_check("avg_pool", x, kernel, stride)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * h * wo];
        let inv = 1.0 / kernel as f64;
        for row in 0..b * c * h {
            let xrow = &xd[row * w..(row + 1) * w];
            let orow = &mut out[row * wo..(row + 1) * wo];
            for (ow, o) in orow.iter_mut().enumerate() {
                let start = ow * stride;
                *o = xrow[start..start + kernel].iter().sum::<f64>() * inv;
            }
        }
        let value = Tensor::new(vec![b, c, h, wo], out)?;
        Ok(self.push(Op::AvgPool { x, kernel, stride }, value))
    }

    /// Max pooling along the last (time) axis with kernel (1,k).
    pub fn max_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (b, c, h, w, wo) = self.pool_check("max_pool", x, kernel, stride)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * h * wo];
        let mut argmax = vec![0usize; b * c * h * wo];
        for row in 0..b * c * h {
            let xrow = &xd[row * w..(row + 1) * w];
            for ow in 0..wo {
                let start = ow * stride;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = start;
                for (i, &v) in xrow[start..start + kernel].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = start + i;
                    }
                }
                out[row * wo + ow] = best;
                argmax[row * wo + ow] = row * w + best_i;
            }
        }
        let value = Tensor::new(vec![b, c, h, wo], out)?;
        Ok(self.push(Op::MaxPool { x, argmax }, value))
    }

    /// Batch normalization over the feature axis of (B, F, H, W).
    ///
    /// In training mode, batch statistics are computed from `x` and
    /// returned so the caller can update running statistics. In eval
    /// mode, `running` supplies the (mean, var) used for normalization.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        training: bool,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Self::shape_err(
                "batch_norm",
                "rank-4 input".into(),
                format!("{:?}", vx.shape()),
            ));
        }
        let (b, f, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let per_feat = b * h * w;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [f] || vb.shape() != [f] {
            return Err(Self::shape_err(
                "batch_norm",
                format!("gamma/beta ({f})"),
                format!("{:?}/{:?}", vg.shape(), vb.shape()),
            ));
        }
        let (mean, var) = if training {
            let xd = vx.data();
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for fi in 0..f {
                let mut s = 0.0;
                for bi in 0..b {
                    let base = ((bi * f + fi) * h) * w;
                    s += xd[base..base + h * w].iter().sum::<f64>();
                }
                mean[fi] = s / per_feat as f64;
                let m = mean[fi];
                let mut sq = 0.0;
                for bi in 0..b {
                    let base = ((bi * f + fi) * h) * w;
                    for &v in &xd[base..base + h * w] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                var[fi] = sq / per_feat as f64;
            }
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::InvalidConfig("eval-mode batch_norm requires running statistics".into())
            })?;
            if rm.len() != f || rv.len() != f {
                return Err(Self::shape_err(
                    "batch_norm",
                    format!("running stats of length {f}"),
                    format!("{}/{}", rm.len(), rv.len()),
                ));
            }
            (rm.to_vec(), rv.to_vec())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = vx.data();
        let gd = vg.data().to_vec();
        let bd = vb.data().to_vec();
        let mut normalized = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for fi in 0..f {
                let base = ((bi * f + fi) * h) * w;
                let (m, is, g, be) = (mean[fi], inv_std[fi], gd[fi], bd[fi]);
                for i in base..base + h * w {
                    let n = (xd[i] - m) * is;
                    normalized[i] = n;
                    out[i] = g * n + be;
                }
            }
        }
        let stats = training.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: per_feat,
        });
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                training,
                inv_std,
                normalized,
            },
            value,
        );
        Ok((id, stats))
    }

    /// ELU activation with alpha = 1.
    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::Elu { x }, value))
    }

    /// Elementwise square.
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::Square { x }, value))
    }

    /// ln(max(x, 1e-6)); the clamp keeps pooled squares away from -inf.
    pub fn safe_log(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(SAFE_LOG_EPS).ln()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::SafeLog { x }, value))
    }

    /// Inverted dropout with keep-probability 1-p; mask drawn from `rng`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout rate {p} not in [0,1)")));
        }
        let vx = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..vx.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        let value = vx.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s: f64 = vx.data().iter().sum();
        let value = Tensor::new(vec![1], vec![s])?;
        Ok(self.push(Op::Sum { x }, value))
    }

    /// Mean softmax cross-entropy of logits (B, K) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Self::shape_err(
                "softmax_cross_entropy",
                "(batch, classes) logits".into(),
                format!("{:?}", vl.shape()),
            ));
        }
        let (b, k) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != b {
            return Err(Self::shape_err(
                "softmax_cross_entropy",
                format!("{b} labels"),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = vl.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &ld[bi * k..(bi + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            for (ki, &v) in row.iter().enumerate() {
                probs[bi * k + ki] = (v - lse).exp();
            }
            loss += lse - row[labels[bi]];
        }
        loss /= b as f64;
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Reverse pass from a scalar output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Self::shape_err(
                "backward",
                "scalar output".into(),
                format!("{:?}", self.value(output).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            // re-store: callers may request gradients of interior nodes
            grads[idx] = Some(gout);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(n);
        let mut differentiable = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            differentiable.push(node.requires_grad);
            if node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.push(Some(Tensor::new(node.value.shape().to_vec(), g).map_err(
                    |_| Error::GradientNotFinite(format!("node {i}")),
                )?));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients {
            grads: out,
            differentiable,
        })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, node: &Node, id: NodeId) -> *mut Vec<f64> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; node.value.numel()]);
        }
        grads[id.0].as_mut().unwrap() as *mut Vec<f64>
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        grads[id.0].as_mut()
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(g) = self.grad_buf(grads, id) {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * factor;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.nodes[bias.0].value.numel();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *bias) {
                    for (i, go) in gout.iter().enumerate() {
                        g[i % n] += go;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dY . B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &bd[kk * n..(kk + 1) * n];
                            for (go, bv) in grow.iter().zip(brow) {
                                s += go * bv;
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    // dB = A^T . dY
                    for kk in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &mut gb[kk * n..(kk + 1) * n];
                            for (gbv, go) in brow.iter_mut().zip(grow) {
                                *gbv += av * go;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                groups,
                pad,
            } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (b_sz, cin, h, w_in) = (
                    vx.shape()[0],
                    vx.shape()[1],
                    vx.shape()[2],
                    vx.shape()[3],
                );
                let (cout, cig, kh, kw) = (
                    vw.shape()[0],
                    vw.shape()[1],
                    vw.shape()[2],
                    vw.shape()[3],
                );
                let (ph, pw) = *pad;
                let ho = h + 2 * ph - kh + 1;
                let wo = w_in + 2 * pw - kw + 1;
                let copg = cout / groups;
                let xd = vx.data().to_vec();
                let wd = vw.data().to_vec();

                let want_x = self.nodes[x.0].requires_grad;
                let want_w = self.nodes[w.0].requires_grad;
                // Split mutable borrows via raw pointers scoped to this call.
                let gx_ptr = want_x.then(|| Self::add_into(grads, &self.nodes[x.0], *x));
                let gw_ptr = want_w.then(|| Self::add_into(grads, &self.nodes[w.0], *w));
                let gx = gx_ptr.map(|p| unsafe { &mut *p });
                let gw = gw_ptr.map(|p| unsafe { &mut *p });
                let (mut gx, mut gw) = (gx, gw);

                for b in 0..b_sz {
                    for co in 0..cout {
                        let g = co / copg;
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let go = gout[((b * cout + co) * ho + oh) * wo + ow];
                                if go == 0.0 {
                                    continue;
                                }
                                for cg in 0..cig {
                                    let ci = g * cig + cg;
                                    for ki in 0..kh {
                                        let ih = oh + ki;
                                        if ih < ph || ih >= h + ph {
                                            continue;
                                        }
                                        let ih = ih - ph;
                                        let k_lo = pw.saturating_sub(ow);
                                        let k_hi = kw.min(w_in + pw - ow);
                                        if k_lo >= k_hi {
                                            continue;
                                        }
                                        let x_base = ((b * cin + ci) * h + ih) * w_in + ow + k_lo
                                            - pw;
                                        let w_base = ((co * cig + cg) * kh + ki) * kw + k_lo;
                                        let len = k_hi - k_lo;
                                        if let Some(gx) = gx.as_deref_mut() {
                                            let ws = &wd[w_base..w_base + len];
                                            let gxs = &mut gx[x_base..x_base + len];
                                            for (gxv, wv) in gxs.iter_mut().zip(ws) {
                                                *gxv += go * wv;
                                            }
                                        }
                                        if let Some(gw) = gw.as_deref_mut() {
                                            let xs = &xd[x_base..x_base + len];
                                            let gws = &mut gw[w_base..w_base + len];
                                            for (gwv, xv) in gws.iter_mut().zip(xs) {
                                                *gwv += go * xv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(bid) = bias {
                    if let Some(gb) = self.grad_buf(grads, *bid) {
                        for b in 0..b_sz {
                            for co in 0..cout {
                                let base = ((b * cout + co) * ho) * wo;
                                gb[co] += gout[base..base + ho * wo].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, kernel, stride } => {
                let vx = &self.nodes[x.0].value;
                let w = vx.shape()[3];
                let rows = vx.numel() / w;
                let wo = (w - kernel) / stride + 1;
                let inv = 1.0 / *kernel as f64;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for row in 0..rows {
                        for ow in 0..wo {
                            let go = gout[row * wo + ow] * inv;
                            let start = row * w + ow * stride;
                            for v in &mut gx[start..start + kernel] {
                                *v += go;
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gout[o];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                training,
                inv_std,
                normalized,
            } => {
                let vx = &self.nodes[x.0].value;
                let (b, f, h, w) = (
                    vx.shape()[0],
                    vx.shape()[1],
                    vx.shape()[2],
                    vx.shape()[3],
                );
                let per_feat = (b * h * w) as f64;
                let gd = self.nodes[gamma.0].value.data().to_vec();

                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for bi in 0..b {
                        for fi in 0..f {
                            let base = ((bi * f + fi) * h) * w;
                            let mut s = 0.0;
                            for i in base..base + h * w {
                                s += gout[i] * normalized[i];
                            }
                            gg[fi] += s;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for bi in 0..b {
                        for fi in 0..f {
                            let base = ((bi * f + fi) * h) * w;
                            gb[fi] += gout[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    if *training {
                        // dx = inv_std * gamma * (g - mean(g) - xhat * mean(g*xhat))
                        for fi in 0..f {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for bi in 0..b {
                                let base = ((bi * f + fi) * h) * w;
                                for i in base..base + h * w {
                                    sum_g += gout[i];
                                    sum_gx += gout[i] * normalized[i];
                                }
                            }
                            let mg = sum_g / per_feat;
                            let mgx = sum_gx / per_feat;
                            let scale = gd[fi] * inv_std[fi];
                            for bi in 0..b {
                                let base = ((bi * f + fi) * h) * w;
                                for i in base..base + h * w {
                                    gx[i] += scale * (gout[i] - mg - normalized[i] * mgx);
                                }
                            }
                        }
                    } else {
                        for fi in 0..f {
                            let scale = gd[fi] * inv_std[fi];
                            for bi in 0..b {
                                let base = ((bi * f + fi) * h) * w;
                                for i in base..base + h * w {
                                    gx[i] += scale * gout[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Elu { x } => {
                let y = node.value.data().to_vec();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, go) in gout.iter().enumerate() {
                        let d = if y[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                        gx[i] += go * d;
                    }
                }
            }
            Op::Square { x } => {
                let xd = self.nodes[x.0].value.data().to_vec();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, go) in gout.iter().enumerate() {
                        gx[i] += go * 2.0 * xd[i];
                    }
                }
            }
            Op::SafeLog { x } => {
                let xd = self.nodes[x.0].value.data().to_vec();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, go) in gout.iter().enumerate() {
                        if xd[i] > SAFE_LOG_EPS {
                            gx[i] += go / xd[i];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, go) in gout.iter().enumerate() {
                        gx[i] += go * mask[i];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (gi, go) in gx.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for gi in gx.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    let scale = gout[0] / b as f64;
                    for (bi, &y) in labels.iter().enumerate() {
                        for ki in 0..k {
                            let onehot = if ki == y { 1.0 } else { 0.0 };
                            gl[bi * k + ki] += scale * (probs[bi * k + ki] - onehot);
                        }
                    }
                }
            }
        }
    }
}
