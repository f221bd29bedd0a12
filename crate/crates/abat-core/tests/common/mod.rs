//! Shared test harness: random micro-networks with a central
//! finite-difference gradient oracle, independent of the autodiff path.

use abat_core::graph::{NodeId, Tape};
use abat_core::rng::stream;
use abat_core::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub enum MicroLayer {
    /// weight leaf index, optional bias leaf index
    Conv {
        w: usize,
        b: Option<usize>,
        groups: usize,
        pad: (usize, usize),
    },
    /// train-mode batch norm: gamma/beta leaf indices
    BatchNorm { gamma: usize, beta: usize },
    Elu,
    Square,
    SafeLog,
    AvgPool { kernel: usize, stride: usize },
    MaxPool { kernel: usize, stride: usize },
}

/// A small randomized conv net ending in softmax cross-entropy, with
/// every leaf differentiable. The description is data, so the same net
/// can be re-evaluated at perturbed leaves for finite differences.
pub struct MicroNet {
    pub leaves: Vec<Tensor>,
    pub layers: Vec<MicroLayer>,
    pub linear_w: usize,
    pub linear_b: usize,
    pub labels: Vec<usize>,
}

impl MicroNet {
    pub fn random(seed: u64) -> MicroNet {
        let mut rng = stream(seed, &[0x6e37]);
        let batch = rng.gen_range(1..=2usize);
        let cin = rng.gen_range(1..=2usize);
        let h = rng.gen_range(1..=3usize);
        let w = rng.gen_range(8..=14usize);
        let classes = rng.gen_range(2..=3usize);

        let mut leaves = Vec::new();
        let mut layers = Vec::new();

        let input = Tensor::new(
            vec![batch, cin, h, w],
            (0..batch * cin * h * w)
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap();
        leaves.push(input);

        // conv: sometimes depthwise, sometimes dense, sometimes padded
        let depthwise = cin > 1 && rng.gen::<bool>();
        let groups = if depthwise { cin } else { 1 };
        let cout = if depthwise {
            cin * rng.gen_range(1..=2usize)
        } else {
            rng.gen_range(1..=3usize)
        };
        let kh = rng.gen_range(1..=h);
        let kw = rng.gen_range(2..=3usize);
        let pad_w = rng.gen_range(0..=1usize);
        let wt = Tensor::new(
            vec![cout, cin / groups, kh, kw],
            (0..cout * (cin / groups) * kh * kw)
                .map(|_| rng.gen::<f64>() * 1.4 - 0.7)
                .collect(),
        )
        .unwrap();
        leaves.push(wt);
        let w_idx = leaves.len() - 1;
        let bias = rng.gen::<bool>();
        let b_idx = bias.then(|| {
            leaves.push(
                Tensor::new(
                    vec![cout],
                    (0..cout).map(|_| rng.gen::<f64>() * 0.4 - 0.2).collect(),
                )
                .unwrap(),
            );
            leaves.len() - 1
        });
        layers.push(MicroLayer::Conv {
            w: w_idx,
            b: b_idx,
            groups,
            pad: (0, pad_w),
        });
        let cur_h = h - kh + 1;
        let mut cur_w = w + 2 * pad_w - kw + 1;

        if rng.gen::<bool>() {
            let gamma = Tensor::new(
                vec![cout],
                (0..cout).map(|_| 0.8 + rng.gen::<f64>() * 0.4).collect(),
            )
            .unwrap();
            let beta = Tensor::new(
                vec![cout],
                (0..cout).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect(),
            )
            .unwrap();
            leaves.push(gamma);
            let g_idx = leaves.len() - 1;
            leaves.push(beta);
            let b_idx = leaves.len() - 1;
            layers.push(MicroLayer::BatchNorm {
                gamma: g_idx,
                beta: b_idx,
            });
        }

        // activation; square may be followed by a pooled safe-log
        let squared = rng.gen::<bool>();
        if squared {
            layers.push(MicroLayer::Square);
        } else {
            layers.push(MicroLayer::Elu);
        }

        let kernel = 2usize;
        let stride = rng.gen_range(1..=2usize);
        if cur_w >= kernel {
            if rng.gen::<bool>() {
                layers.push(MicroLayer::AvgPool { kernel, stride });
            } else {
                layers.push(MicroLayer::MaxPool { kernel, stride });
            }
            cur_w = (cur_w - kernel) / stride + 1;
        }
        if squared && rng.gen::<bool>() {
            layers.push(MicroLayer::SafeLog);
        }

        let feat = cout * cur_h * cur_w;
        let lin_w = Tensor::new(
            vec![feat, classes],
            (0..feat * classes)
                .map(|_| rng.gen::<f64>() * 1.0 - 0.5)
                .collect(),
        )
        .unwrap();
        leaves.push(lin_w);
        let linear_w = leaves.len() - 1;
        let lin_b = Tensor::new(
            vec![classes],
            (0..classes).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect(),
        )
        .unwrap();
        leaves.push(lin_b);
        let linear_b = leaves.len() - 1;

        let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        MicroNet {
            leaves,
            layers,
            linear_w,
            linear_b,
            labels,
        }
    }

    fn forward(&self, tape: &mut Tape, ids: &[NodeId]) -> NodeId {
        let mut cur = ids[0];
        for layer in &self.layers {
            cur = match layer {
                MicroLayer::Conv { w, b, groups, pad } => tape
                    .conv2d(cur, ids[*w], b.map(|i| ids[i]), *groups, *pad)
                    .unwrap(),
                MicroLayer::BatchNorm { gamma, beta } => {
                    tape.batch_norm(cur, ids[*gamma], ids[*beta], None, true)
                        .unwrap()
                        .0
                }
                MicroLayer::Elu => tape.elu(cur).unwrap(),
                MicroLayer::Square => tape.square(cur).unwrap(),
                MicroLayer::SafeLog => tape.safe_log(cur).unwrap(),
                MicroLayer::AvgPool { kernel, stride } => {
                    tape.avg_pool(cur, *kernel, *stride).unwrap()
                }
                MicroLayer::MaxPool { kernel, stride } => {
                    tape.max_pool(cur, *kernel, *stride).unwrap()
                }
            };
        }
        let batch = tape.value(cur).shape()[0];
        let feat = tape.value(cur).numel() / batch;
        let flat = tape.reshape(cur, vec![batch, feat]).unwrap();
        let lin = tape.matmul(flat, ids[self.linear_w]).unwrap();
        let logits = tape.add_bias(lin, ids[self.linear_b]).unwrap();
        tape.softmax_cross_entropy(logits, &self.labels).unwrap()
    }

    pub fn loss_at(&self, leaves: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = self.forward(&mut tape, &ids);
        tape.value(loss).scalar().unwrap()
    }

    pub fn autodiff_grads(&self) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self
            .leaves
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = self.forward(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        ids.iter()
            .map(|&id| grads.wrt(id).unwrap().data().to_vec())
            .collect()
    }
}

/// Max relative error between autodiff and central finite differences
/// over every leaf coordinate with |grad| above `grad_floor`.
pub fn gradcheck(net: &MicroNet, h: f64, grad_floor: f64) -> (f64, usize) {
    let analytic = net.autodiff_grads();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in net.leaves.iter().enumerate() {
        for ci in 0..leaf.numel() {
            let ad = analytic[li][ci];
            if ad.abs() <= grad_floor {
                continue;
            }
            let mut plus = net.leaves.clone();
            let mut d = plus[li].data().to_vec();
            d[ci] += h;
            plus[li] = Tensor::new(leaf.shape().to_vec(), d).unwrap();
            let mut minus = net.leaves.clone();
            let mut d = minus[li].data().to_vec();
            d[ci] -= h;
            minus[li] = Tensor::new(leaf.shape().to_vec(), d).unwrap();
            let fd = (net.loss_at(&plus) - net.loss_at(&minus)) / (2.0 * h);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    (max_rel, checked)
}
