//! Architecture builders for the three CNN families, at configurable
//! width, over (channel, time) inputs.
//!
//! Layer hyperparameters are frozen constants chosen so that the
//! paper-width builds on a (C=22, T=1000, K=4) input hit the published
//! parameter counts exactly: EEGNet 1,676; DeepCNN 94,079; ShallowCNN
//! 57,804. Width multipliers scale per-block kernel counts; explicit
//! per-block counts can be supplied instead for capacity sweeps.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Trial;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Eegnet,
    Shallow,
    Deep,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Eegnet => "eegnet",
            Family::Shallow => "shallow",
            Family::Deep => "deep",
        };
        f.write_str(s)
    }
}

/// Architecture specification; (family, shape, widths, seed) fully
/// determine the parameter set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    pub channels: usize,
    pub timepoints: usize,
    pub classes: usize,
    /// Scales the per-block kernel counts; 1.0 reproduces paper widths.
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    /// Explicit per-block kernel counts, overriding `width_mult`:
    /// eegnet [F1, D, F2]; deep [n1, n2, n3]; shallow [n].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    pub seed: u64,
}

fn default_width_mult() -> f64 {
    1.0
}

impl ArchSpec {
    pub fn new(family: Family, channels: usize, timepoints: usize, classes: usize) -> Self {
        ArchSpec {
            family,
            channels,
            timepoints,
            classes,
            width_mult: 1.0,
            widths: None,
            seed: 0,
        }
    }

    /// Resolved per-block kernel counts.
    pub fn block_widths(&self) -> Result<Vec<usize>> {
        let expected = match self.family {
            Family::Eegnet | Family::Deep => 3,
            Family::Shallow => 1,
        };
        if let Some(w) = &self.widths {
            if w.len() != expected || w.iter().any(|&x| x == 0) {
                return Err(Error::InvalidConfig(format!(
                    "{} expects {expected} positive per-block widths, got {w:?}",
                    self.family
                )));
            }
            return Ok(w.clone());
        }
        if !(self.width_mult > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "width_mult must be positive, got {}",
                self.width_mult
            )));
        }
        let scale = |base: usize| ((base as f64 * self.width_mult).round() as usize).max(1);
        Ok(match self.family {
            Family::Eegnet => {
                let f1 = scale(4);
                let d = 2;
                vec![f1, d, f1 * d]
            }
            Family::Deep => vec![scale(25), scale(50), scale(100)],
            Family::Shallow => vec![scale(40)],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ParamDef {
    name: String,
    shape: Vec<usize>,
    /// Fan-in for uniform init; zero means constant init (batch norm).
    fan_in: usize,
    init_const: f64,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        w: usize,
        b: Option<usize>,
        groups: usize,
        pad: (usize, usize),
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        state: usize,
    },
    Elu,
    Square,
    SafeLog,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Linear {
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone)]
struct LayerPlan {
    layers: Vec<Layer>,
    params: Vec<ParamDef>,
    /// Base name per batch-norm state, in layer order.
    bn_names: Vec<String>,
    bn_features: Vec<usize>,
    feature_dim: usize,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone)]
struct BnRunning {
    name: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// A parameterized differentiable classifier: architecture descriptor,
/// named parameter tensors, and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub arch: ArchSpec,
    plan: LayerPlan,
    params: Vec<Tensor>,
    running: Vec<BnRunning>,
    mode: Mode,
}

/// Node handles returned by a forward pass.
pub struct ForwardIds {
    pub input: NodeId,
    pub logits: NodeId,
    /// One id per parameter tensor, in parameter order.
    pub params: Vec<NodeId>,
}

const BN_MOMENTUM: f64 = 0.1;

struct PlanBuilder {
    layers: Vec<Layer>,
    params: Vec<ParamDef>,
    bn_names: Vec<String>,
    bn_features: Vec<usize>,
    maps: usize,
    h: usize,
    w: usize,
}

impl PlanBuilder {
    fn new(channels: usize, timepoints: usize) -> Self {
        PlanBuilder {
            layers: Vec::new(),
            params: Vec::new(),
            bn_names: Vec::new(),
            bn_features: Vec::new(),
            maps: 1,
            h: channels,
            w: timepoints,
        }
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, fan_in: usize, init_const: f64) -> usize {
        self.params.push(ParamDef {
            name,
            shape,
            fan_in,
            init_const,
        });
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        out_maps: usize,
        kernel: (usize, usize),
        groups: usize,
        pad: (usize, usize),
        bias: bool,
    ) -> Result<()> {
        let (kh, kw) = kernel;
        if self.maps % groups != 0 || out_maps % groups != 0 {
            return Err(Error::ArchMismatch(format!(
                "{name}: groups {groups} incompatible with {} -> {out_maps} maps",
                self.maps
            )));
        }
        if self.h + 2 * pad.0 < kh || self.w + 2 * pad.1 < kw {
            return Err(Error::ArchMismatch(format!(
                "{name}: kernel ({kh},{kw}) does not fit input ({},{}); input too small for this layer chain",
                self.h, self.w
            )));
        }
        let cig = self.maps / groups;
        let fan_in = cig * kh * kw;
        let w = self.add_param(
            format!("{name}.weight"),
            vec![out_maps, cig, kh, kw],
            fan_in,
            0.0,
        );
        let b = bias.then(|| self.add_param(format!("{name}.bias"), vec![out_maps], fan_in, 0.0));
        self.layers.push(Layer::Conv { w, b, groups, pad });
        self.maps = out_maps;
        self.h = self.h + 2 * pad.0 - kh + 1;
        self.w = self.w + 2 * pad.1 - kw + 1;
        Ok(())
    }

    fn batch_norm(&mut self, name: &str) {
        let gamma = self.add_param(format!("{name}.gamma"), vec![self.maps], 0, 1.0);
        let beta = self.add_param(format!("{name}.beta"), vec![self.maps], 0, 0.0);
        self.bn_names.push(name.to_string());
        self.bn_features.push(self.maps);
        let state = self.bn_features.len() - 1;
        self.layers.push(Layer::BatchNorm { gamma, beta, state });
    }

    fn pool(&mut self, name: &str, kernel: usize, stride: usize, max: bool) -> Result<()> {
        if self.w < kernel {
            return Err(Error::ArchMismatch(format!(
                "{name}: pool kernel {kernel} does not fit width {}; input too small for this layer chain",
                self.w
            )));
        }
        self.layers.push(if max {
            Layer::MaxPool { kernel, stride }
        } else {
            Layer::AvgPool { kernel, stride }
        });
        self.w = (self.w - kernel) / stride + 1;
        Ok(())
    }

    fn finish(mut self, classes: usize) -> LayerPlan {
        self.layers.push(Layer::Flatten);
        let feature_dim = self.maps * self.h * self.w;
        let w = self.add_param(
            "classifier.weight".into(),
            vec![feature_dim, classes],
            feature_dim,
            0.0,
        );
        let b = self.add_param("classifier.bias".into(), vec![classes], feature_dim, 0.0);
        self.layers.push(Layer::Linear { w, b });
        LayerPlan {
            layers: self.layers,
            params: self.params,
            bn_names: self.bn_names,
            bn_features: self.bn_features,
            feature_dim,
        }
    }
}

fn build_plan(spec: &ArchSpec) -> Result<LayerPlan> {
    let widths = spec.block_widths()?;
    let c = spec.channels;
    let mut p = PlanBuilder::new(c, spec.timepoints);
    match spec.family {
        Family::Eegnet => {
            let (f1, d, f2) = (widths[0], widths[1], widths[2]);
            p.conv("block1.conv_time", f1, (1, 64), 1, (0, 32), false)?;
            p.batch_norm("block1.bn_time");
            p.conv("block1.conv_spatial", f1 * d, (c, 1), f1, (0, 0), false)?;
            p.batch_norm("block1.bn_spatial");
            p.layers.push(Layer::Elu);
            p.pool("block1.pool", 4, 4, false)?;
            p.layers.push(Layer::Dropout { p: 0.25 });
            p.conv("block2.conv_sep_depth", f1 * d, (1, 16), f1 * d, (0, 8), true)?;
            p.conv("block2.conv_sep_point", f2, (1, 1), 1, (0, 0), true)?;
            p.batch_norm("block2.bn");
            p.layers.push(Layer::Elu);
            p.pool("block2.pool", 8, 8, false)?;
            p.layers.push(Layer::Dropout { p: 0.25 });
        }
        Family::Deep => {
            let (n1, n2, n3) = (widths[0], widths[1], widths[2]);
            p.conv("block1.conv_time", n1, (1, 5), 1, (0, 0), true)?;
            p.conv("block1.conv_spatial", n1, (c, 1), 1, (0, 0), true)?;
            p.batch_norm("block1.bn");
            p.layers.push(Layer::Elu);
            p.pool("block1.pool", 2, 2, true)?;
            p.layers.push(Layer::Dropout { p: 0.5 });
            p.conv("block2.conv", n2, (1, 5), 1, (0, 0), true)?;
            p.batch_norm("block2.bn");
            p.layers.push(Layer::Elu);
            p.pool("block2.pool", 2, 2, true)?;
            p.layers.push(Layer::Dropout { p: 0.5 });
            p.conv("block3.conv", n3, (1, 5), 1, (0, 0), true)?;
            p.batch_norm("block3.bn");
            p.layers.push(Layer::Elu);
            p.pool("block3.pool", 2, 2, true)?;
            p.layers.push(Layer::Dropout { p: 0.5 });
        }
        Family::Shallow => {
            let n = widths[0];
            p.conv("conv_time", n, (1, 13), 1, (0, 0), true)?;
            p.conv("conv_spatial", n, (c, 1), 1, (0, 0), true)?;
            p.batch_norm("bn");
            p.layers.push(Layer::Square);
            p.pool("pool", 35, 7, false)?;
            p.layers.push(Layer::SafeLog);
            p.layers.push(Layer::Dropout { p: 0.5 });
        }
    }
    Ok(p.finish(spec.classes))
}

/// Build and initialize a model; seeded init is bit-reproducible.
pub fn build(spec: &ArchSpec) -> Result<ModelGraph> {
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    let plan = build_plan(spec)?;
    let mut init_rng = rng::stream(spec.seed, &[0x1417, spec.family as u64]);
    let params = plan
        .params
        .iter()
        .map(|def| {
            let numel: usize = def.shape.iter().product();
            let data: Vec<f64> = if def.fan_in == 0 {
                vec![def.init_const; numel]
            } else {
                let bound = 1.0 / (def.fan_in as f64).sqrt();
                (0..numel)
                    .map(|_| init_rng.gen::<f64>() * 2.0 * bound - bound)
                    .collect()
            };
            Tensor::new(def.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let running = plan
        .bn_names
        .iter()
        .zip(&plan.bn_features)
        .map(|(name, &f)| BnRunning {
            name: name.clone(),
            mean: vec![0.0; f],
            var: vec![1.0; f],
        })
        .collect();
    Ok(ModelGraph {
        arch: spec.clone(),
        plan,
        params,
        running,
        mode: Mode::Eval,
    })
}

impl ModelGraph {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.feature_dim
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.plan.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Overwrite one parameter tensor (same shape required).
    pub fn set_param(&mut self, index: usize, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.params[index].shape() {
            return Err(Error::ArchMismatch(format!(
                "parameter {} shape {:?} != {:?}",
                self.plan.params[index].name,
                tensor.shape(),
                self.params[index].shape()
            )));
        }
        self.params[index] = tensor;
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.arch.channels || s[3] != self.arch.timepoints {
            return Err(Error::ShapeMismatch {
                op: "ModelGraph::forward",
                expected: format!("(B, 1, {}, {})", self.arch.channels, self.arch.timepoints),
                actual: format!("{s:?}"),
            });
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        input: &Tensor,
        input_grad: bool,
        training: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        mut stats_sink: Option<&mut Vec<(usize, crate::graph::BatchStats)>>,
    ) -> Result<(Tape, ForwardIds)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        let input_id = tape.leaf(input.clone(), input_grad);

        let mut cur = input_id;
        for layer in &self.plan.layers {
            cur = match layer {
                Layer::Conv { w, b, groups, pad } => {
                    tape.conv2d(cur, params[*w], b.map(|i| params[i]), *groups, *pad)?
                }
                Layer::BatchNorm { gamma, beta, state } => {
                    let running = &self.running[*state];
                    let (id, stats) = tape.batch_norm(
                        cur,
                        params[*gamma],
                        params[*beta],
                        (!training).then_some((running.mean.as_slice(), running.var.as_slice())),
                        training,
                    )?;
                    if let (Some(sink), Some(stats)) = (stats_sink.as_deref_mut(), stats) {
                        sink.push((*state, stats));
                    }
                    id
                }
                Layer::Elu => tape.elu(cur)?,
                Layer::Square => tape.square(cur)?,
                Layer::SafeLog => tape.safe_log(cur)?,
                Layer::AvgPool { kernel, stride } => tape.avg_pool(cur, *kernel, *stride)?,
                Layer::MaxPool { kernel, stride } => tape.max_pool(cur, *kernel, *stride)?,
                Layer::Dropout { p } => {
                    if training {
                        let rng = dropout_rng.as_deref_mut().ok_or_else(|| {
                            Error::InvalidConfig("training forward requires a dropout rng".into())
                        })?;
                        tape.dropout(cur, *p, rng)?
                    } else {
                        cur
                    }
                }
                Layer::Flatten => {
                    let batch = tape.value(cur).shape()[0];
                    let feat = tape.value(cur).numel() / batch;
                    tape.reshape(cur, vec![batch, feat])?
                }
                Layer::Linear { w, b } => {
                    let h = tape.matmul(cur, params[*w])?;
                    tape.add_bias(h, params[*b])?
                }
            };
        }
        Ok((
            tape,
            ForwardIds {
                input: input_id,
                logits: cur,
                params,
            },
        ))
    }

    /// Eval-mode forward pass (running statistics, no dropout).
    ///
    /// Safe to call concurrently on a shared model; set `input_grad` to
    /// make the input a differentiable leaf for attack gradients.
    pub fn forward_eval(&self, input: &Tensor, input_grad: bool) -> Result<(Tape, ForwardIds)> {
        self.forward_inner(input, input_grad, false, None, None)
    }

    /// Train-mode forward pass: batch statistics, dropout, and running
    /// statistics updated in place.
    pub fn forward_train(
        &mut self,
        input: &Tensor,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(Tape, ForwardIds)> {
        let mut stats = Vec::new();
        let (tape, ids) =
            self.forward_inner(input, false, true, Some(dropout_rng), Some(&mut stats))?;
        for (state, s) in stats {
            let r = &mut self.running[state];
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count as f64 - 1.0)
            } else {
                1.0
            };
            for (rm, &m) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, &v) in r.var.iter_mut().zip(&s.var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
            }
        }
        Ok((tape, ids))
    }

    /// Deployment-path prediction: logits for a (B, 1, C, T) batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        if self.mode == Mode::Train {
            return Err(Error::TrainModePredict);
        }
        let (tape, ids) = self.forward_eval(batch, false)?;
        Ok(tape.value(ids.logits).clone())
    }

    /// Predicted class per trial, batching internally (eval mode).
    pub fn predict_trials(&self, trials: &[Trial]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(trials.len());
        for chunk in trials.chunks(64) {
            let refs: Vec<&Trial> = chunk.iter().collect();
            let batch = batch_from_trials(&refs)?;
            let logits = self.predict(&batch)?;
            let k = self.arch.classes;
            for row in 0..chunk.len() {
                out.push(argmax(&logits.data()[row * k..(row + 1) * k]) as u32);
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stack trials into a (B, 1, C, T) input tensor.
pub fn batch_from_trials(trials: &[&Trial]) -> Result<Tensor> {
    let first = trials.first().ok_or(Error::EmptyInput("batch_from_trials"))?;
    let (c, t) = (first.channels(), first.samples());
    let mut data = Vec::with_capacity(trials.len() * c * t);
    for tr in trials {
        if tr.channels() != c || tr.samples() != t {
            return Err(Error::ShapeMismatch {
                op: "batch_from_trials",
                expected: format!("{c}x{t}"),
                actual: format!("{}x{}", tr.channels(), tr.samples()),
            });
        }
        data.extend_from_slice(tr.data());
    }
    Tensor::new(vec![trials.len(), 1, c, t], data)
}

// ---------------------------------------------------------------------
// Checkpoint format: magic "ABATMDL", version u32, JSON arch header
// (length u32 + bytes), then named blobs: name length u32, name bytes,
// rank u32, dims u32 x rank, f32 little-endian values. Parameters and
// batch-norm running statistics are all stored as named blobs.
// ---------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 7] = b"ABATMDL";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    version: u32,
    arch: ArchSpec,
}

fn write_blob(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl ModelGraph {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            format: "ABATMDL".into(),
            version: CKPT_VERSION,
            arch: self.arch.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (def, tensor) in self.plan.params.iter().zip(&self.params) {
            write_blob(&mut buf, &def.name, tensor.shape(), tensor.data());
        }
        for r in &self.running {
            write_blob(
                &mut buf,
                &format!("{}.running_mean", r.name),
                &[r.mean.len()],
                &r.mean,
            );
            write_blob(
                &mut buf,
                &format!("{}.running_var", r.name),
                &[r.var.len()],
                &r.var,
            );
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelGraph> {
        let bytes = fs::read(path)?;
        let mut r: &[u8] = &bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint: truncated magic".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "checkpoint: bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format("checkpoint: truncated version".into()))?;
        let version = u32::from_le_bytes(u32buf);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format("checkpoint: truncated header length".into()))?;
        let hlen = u32::from_le_bytes(u32buf) as usize;
        if r.len() < hlen {
            return Err(Error::Format("checkpoint: truncated header".into()));
        }
        let header: CkptHeader = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        if header.format != "ABATMDL" {
            return Err(Error::Format(format!(
                "checkpoint: unexpected header format {:?}",
                header.format
            )));
        }

        let mut model = build(&header.arch)?;
        let mut blobs: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> =
            std::collections::HashMap::new();
        fn take_u32(r: &mut &[u8], what: &str) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format(format!("checkpoint: truncated {what}")))?;
            Ok(u32::from_le_bytes(b))
        }
        while !r.is_empty() {
            let nlen = take_u32(&mut r, "blob name length")? as usize;
            if r.len() < nlen {
                return Err(Error::Format("checkpoint: truncated blob name".into()));
            }
            let name = String::from_utf8(r[..nlen].to_vec())
                .map_err(|_| Error::Format("checkpoint: blob name is not utf-8".into()))?;
            r = &r[nlen..];
            let rank = take_u32(&mut r, "blob rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u32(&mut r, "blob dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if r.len() < numel * 4 {
                return Err(Error::Format(format!(
                    "checkpoint: truncated data for {name}"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let v = f32::from_le_bytes([r[i * 4], r[i * 4 + 1], r[i * 4 + 2], r[i * 4 + 3]]);
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "checkpoint: non-finite value in {name}"
                    )));
                }
                data.push(v as f64);
            }
            r = &r[numel * 4..];
            blobs.insert(name, (shape, data));
        }

        let defs = model.plan.params.clone();
        for (i, def) in defs.iter().enumerate() {
            let (shape, data) = blobs.remove(&def.name).ok_or_else(|| {
                Error::ArchMismatch(format!("checkpoint missing parameter {}", def.name))
            })?;
            if shape != def.shape {
                return Err(Error::ArchMismatch(format!(
                    "checkpoint parameter {} has shape {shape:?}, expected {:?}",
                    def.name, def.shape
                )));
            }
            model.params[i] = Tensor::new(shape, data)?;
        }
        for ri in 0..model.running.len() {
            let base = model.running[ri].name.clone();
            for mean_part in [true, false] {
                let key = format!(
                    "{base}.{}",
                    if mean_part { "running_mean" } else { "running_var" }
                );
                let (shape, data) = blobs
                    .remove(&key)
                    .ok_or_else(|| Error::ArchMismatch(format!("checkpoint missing {key}")))?;
                let want = model.running[ri].mean.len();
                if shape != [want] {
                    return Err(Error::ArchMismatch(format!(
                        "checkpoint {key} has shape {shape:?}, expected [{want}]"
                    )));
                }
                if mean_part {
                    model.running[ri].mean = data;
                } else {
                    model.running[ri].var = data;
                }
            }
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::ArchMismatch(format!(
                "checkpoint has unexpected blob {extra}"
            )));
        }
        Ok(model)
    }
}
