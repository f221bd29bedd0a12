//! Scratch calibration harness (ignored by default): measures the
//! benign/robust BCA landscape and wall times on the default corpus.
//! Knobs via env: CAL_NOISE, CAL_SHIFT, CAL_WIDTH, CAL_EPOCHS, CAL_SEEDS.

use std::time::Instant;

use abat_core::attacks::{AttackConfig, EpsilonScale};
use abat_core::datagen::{generate, GenSpec};
use abat_core::evaluation::robustness_test;
use abat_core::models::{ArchSpec, Family};
use abat_core::training::{train, AtMode, TrainConfig};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn calibrate_default_task() {
    let mut spec = GenSpec::default_desk();
    spec.noise_level = envf("CAL_NOISE", spec.noise_level);
    spec.domain_shift = envf("CAL_SHIFT", spec.domain_shift);
    let width = envf("CAL_WIDTH", 0.25);
    let epochs = envf("CAL_EPOCHS", 100.0) as usize;
    let n_seeds = envf("CAL_SEEDS", 3.0) as u64;

    let corpus = generate(&spec).unwrap();
    let train_data = corpus[..2].to_vec();
    let test_data = corpus[2..].to_vec();
    let mut arch = ArchSpec::new(Family::Eegnet, spec.channels, spec.timepoints, spec.classes);
    arch.width_mult = width;

    let grid = vec![
        AttackConfig::fgsm(0.03),
        AttackConfig::fgsm(0.05),
        AttackConfig::pgd_eval(0.01),
        AttackConfig::pgd_eval(0.03),
        AttackConfig::pgd_eval(0.05),
    ];

    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; grid.len() + 1]; 3];
    for seed in 0..n_seeds {
        for (mi, (name, mode, align, inner)) in [
            ("BT", AtMode::Bt, false, None),
            ("BT-EA", AtMode::Bt, true, None),
            ("ABAT-PGD0.01", AtMode::Abat, true, Some(AttackConfig::pgd_train(0.01))),
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = TrainConfig {
                epochs,
                lr_drop_epoch: epochs / 2,
                at_mode: mode,
                align,
                inner_attack: inner,
                seed,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let (model, log) = train(&train_data, &cfg, &arch).unwrap();
            let train_secs = t0.elapsed().as_secs_f64();
            let sigma = log.sigma.unwrap_or_else(|| {
                let view = if align {
                    abat_core::alignment::align_corpus(&train_data).unwrap()
                } else {
                    train_data.clone()
                };
                let pooled: Vec<_> = view.into_iter().flat_map(|d| d.trials).collect();
                abat_core::attacks::compute_sigma(&pooled).unwrap().sigma
            });
            let cells =
                robustness_test(&model, &test_data, &grid, &EpsilonScale { sigma }, align, 7)
                    .unwrap();
            let summary: Vec<String> = cells
                .iter()
                .map(|c| format!("{} {:.2}={:.3}", c.attack, c.eps_rel, c.bca))
                .collect();
            for (ci, c) in cells.iter().enumerate() {
                sums[mi][ci] += c.bca;
            }
            eprintln!(
                "seed{seed} {name}: train {train_secs:.1}s trainBCA {:.3} | {}",
                log.epochs.last().unwrap().benign_bca,
                summary.join(" ")
            );
        }
    }
    let n = n_seeds as f64;
    eprintln!("--- means over {n_seeds} seeds (noise {}, shift {}, width {width}, epochs {epochs})",
        spec.noise_level, spec.domain_shift);
    for (mi, name) in ["BT", "BT-EA", "ABAT-PGD0.01"].iter().enumerate() {
        let cells: Vec<String> = sums[mi].iter().map(|s| format!("{:.3}", s / n)).collect();
        eprintln!("{name}: benign {} | fgsm03 {} fgsm05 {} pgd01 {} pgd03 {} pgd05 {}",
            cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]);
    }
}
