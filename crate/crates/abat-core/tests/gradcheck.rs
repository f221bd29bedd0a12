//! Gradient correctness against the finite-difference oracle, plus a
//! hand-unrolled forward oracle for a fixed micro-net.

mod common;

use abat_core::graph::Tape;
use abat_core::rng::stream;
use abat_core::tensor::Tensor;
use common::{gradcheck, MicroNet};
use rand::Rng;

#[test]
fn random_micro_nets_match_finite_differences() {
    let mut worst = 0.0f64;
    let mut total_checked = 0usize;
    for seed in 0..25 {
        let net = MicroNet::random(seed);
        let (max_rel, checked) = gradcheck(&net, 1e-5, 1e-6);
        assert!(
            max_rel < 1e-4,
            "seed {seed}: max relative error {max_rel} over {checked} coords"
        );
        worst = worst.max(max_rel);
        total_checked += checked;
    }
    assert!(total_checked > 500, "oracle barely exercised: {total_checked}");
    eprintln!("gradcheck worst relative error: {worst:.3e} over {total_checked} coordinates");
}

#[test]
fn fixed_micro_net_matches_hand_unrolled_forward() {
    // conv1d (k=3, 1 channel) + mean pool (2) + linear, on seed-0 input;
    // oracle is a straight-line reimplementation below.
    let mut rng = stream(0, &[0xF1D0]);
    let t_len = 10usize;
    let x: Vec<f64> = (0..t_len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let k: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
    let classes = 2usize;
    let conv_len = t_len - 3 + 1; // 8
    let pooled_len = conv_len / 2; // 4
    let w: Vec<f64> = (0..pooled_len * classes)
        .map(|_| rng.gen::<f64>() - 0.5)
        .collect();
    let b: Vec<f64> = (0..classes).map(|_| rng.gen::<f64>() - 0.5).collect();

    let mut tape = Tape::new();
    let xid = tape.leaf(Tensor::new(vec![1, 1, 1, t_len], x.clone()).unwrap(), true);
    let kid = tape.leaf(Tensor::new(vec![1, 1, 1, 3], k.clone()).unwrap(), true);
    let conv = tape.conv2d(xid, kid, None, 1, (0, 0)).unwrap();
    let pool = tape.avg_pool(conv, 2, 2).unwrap();
    let flat = tape.reshape(pool, vec![1, pooled_len]).unwrap();
    let wid = tape.leaf(Tensor::new(vec![pooled_len, classes], w.clone()).unwrap(), true);
    let bid = tape.leaf(Tensor::new(vec![classes], b.clone()).unwrap(), true);
    let mm = tape.matmul(flat, wid).unwrap();
    let logits = tape.add_bias(mm, bid).unwrap();
    let engine: Vec<f64> = tape.value(logits).data().to_vec();

    // straight-line oracle
    let mut conv_o = vec![0.0; conv_len];
    for i in 0..conv_len {
        conv_o[i] = x[i] * k[0] + x[i + 1] * k[1] + x[i + 2] * k[2];
    }
    let mut pool_o = vec![0.0; pooled_len];
    for i in 0..pooled_len {
        pool_o[i] = (conv_o[2 * i] + conv_o[2 * i + 1]) / 2.0;
    }
    let mut logits_o = vec![0.0; classes];
    for c in 0..classes {
        let mut s = b[c];
        for i in 0..pooled_len {
            s += pool_o[i] * w[i * classes + c];
        }
        logits_o[c] = s;
    }

    for (a, o) in engine.iter().zip(&logits_o) {
        assert!((a - o).abs() < 1e-12, "{a} vs {o}");
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let net = MicroNet::random(7);
    let l1 = net.loss_at(&net.leaves);
    let l2 = net.loss_at(&net.leaves);
    assert_eq!(l1.to_bits(), l2.to_bits());
    let g1 = net.autodiff_grads();
    let g2 = net.autodiff_grads();
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
