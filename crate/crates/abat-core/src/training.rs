//! Benign training (BT), adversarial training (AT), and alignment-based
//! adversarial training (ABAT), plus pre-train + fine-tune.
//!
//! AT/ABAT follow the min-max recipe: each batch is replaced by its
//! adversarial counterpart generated against the current parameters
//! (eval-mode gradients, matching the deployment threat model), then one
//! optimizer step minimizes the loss on those adversarial examples only.
//! ABAT is AT after per-domain Euclidean alignment. The optimizer is
//! Adam with the step-drop learning-rate schedule; swap
//! [`TrainConfig::lr_initial`]/[`TrainConfig::lr_drop`] for ablations.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_corpus, Trial};
use crate::attacks::{self, AttackConfig, AttackOp, EpsilonScale};
use crate::datagen::DomainDataset;
use crate::error::{Error, Result};
use crate::models::{self, batch_from_trials, ArchSpec, Mode, ModelGraph};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtMode {
    Bt,
    At,
    Abat,
}

impl std::fmt::Display for AtMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AtMode::Bt => "BT",
            AtMode::At => "AT",
            AtMode::Abat => "ABAT",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_drop: f64,
    /// Last epoch (1-based) trained at the initial rate.
    pub lr_drop_epoch: usize,
    pub at_mode: AtMode,
    /// Inner attack for AT/ABAT. A zero budget degenerates to benign
    /// training on the (aligned) data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_attack: Option<AttackConfig>,
    pub align: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_initial: 0.01,
            lr_drop: 0.001,
            lr_drop_epoch: 50,
            at_mode: AtMode::Bt,
            inner_attack: None,
            align: false,
            seed: 0,
            pretrained_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn bt(align: bool, seed: u64) -> Self {
        TrainConfig {
            align,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn abat(inner: AttackConfig, seed: u64) -> Self {
        TrainConfig {
            at_mode: AtMode::Abat,
            inner_attack: Some(inner),
            align: true,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn at(inner: AttackConfig, seed: u64) -> Self {
        TrainConfig {
            at_mode: AtMode::At,
            inner_attack: Some(inner),
            align: false,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Default ABAT inner attack: PGD, 10 iterations, step eps/5.
    pub fn default_inner_pgd(epsilon_rel: f64) -> AttackConfig {
        AttackConfig::pgd_train(epsilon_rel)
    }

    /// Inner FGSM without random start.
    pub fn inner_fgsm(epsilon_rel: f64) -> AttackConfig {
        AttackConfig::fgsm(epsilon_rel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr_initial <= 0.0 || self.lr_drop <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        match self.at_mode {
            AtMode::Bt => {
                if self.inner_attack.is_some() {
                    return Err(Error::InvalidConfig(
                        "benign training takes no inner attack".into(),
                    ));
                }
            }
            AtMode::At | AtMode::Abat => {
                let inner = self.inner_attack.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("adversarial training requires an inner attack".into())
                })?;
                inner.validate_with(true)?;
            }
        }
        // naming contract mirroring the BT/AT/ABAT table columns
        if self.at_mode == AtMode::Abat && !self.align {
            return Err(Error::InvalidConfig("abat requires align=true".into()));
        }
        if self.at_mode == AtMode::At && self.align {
            return Err(Error::InvalidConfig(
                "at means adversarial training without alignment; use abat".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Balanced accuracy on the (aligned-or-raw) training pool, eval mode.
    pub benign_bca: f64,
    pub wall_ms: u64,
    pub rng_fingerprint: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Sigma used for relative-to-absolute budget conversion (AT/ABAT).
    pub sigma: Option<f64>,
    pub total_wall_ms: u64,
}

/// Adam with bias correction; the learning rate is supplied per step so
/// the schedule lives in the training loop.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [crate::tensor::Tensor], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn pooled_trials(domains: &[DomainDataset]) -> Vec<Trial> {
    domains.iter().flat_map(|d| d.trials.iter().cloned()).collect()
}

fn check_labels(trials: &[Trial], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    for t in trials {
        let label = t
            .label
            .ok_or_else(|| Error::InvalidConfig("training requires labeled trials".into()))?;
        if label as usize >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        seen[label as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass(missing as u32));
    }
    Ok(())
}

fn eval_bca(model: &ModelGraph, trials: &[Trial]) -> Result<f64> {
    let mut preds = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(64) {
        let refs: Vec<&Trial> = chunk.iter().collect();
        let batch = batch_from_trials(&refs)?;
        let (tape, ids) = model.forward_eval(&batch, false)?;
        let logits = tape.value(ids.logits);
        let k = model.arch.classes;
        for row in 0..chunk.len() {
            preds.push(models::argmax(&logits.data()[row * k..(row + 1) * k]) as u32);
        }
    }
    let labels: Vec<u32> = trials.iter().map(|t| t.label.unwrap()).collect();
    crate::evaluation::bca(&preds, &labels)
}

/// Generate the adversarial counterpart of one batch against the
/// current parameters (eval-mode gradients). Trial randomness derives
/// from (config seed, epoch, position in the epoch ordering).
fn adversarial_batch(
    model: &ModelGraph,
    batch: &[&Trial],
    eps_abs: f64,
    op: &AttackOp,
    seeds: &[u64],
) -> Result<Vec<Trial>> {
    match op {
        AttackOp::Fgsm => attacks::fgsm_batch(model, batch, eps_abs),
        AttackOp::Pgd {
            steps,
            alpha_abs,
            random_start,
        } => attacks::pgd_batch(model, batch, eps_abs, *alpha_abs, *steps, *random_start, seeds),
        other => batch
            .iter()
            .zip(seeds)
            .map(|(t, &s)| attacks::run_attack(model, *t, t.label.unwrap(), eps_abs, other, s))
            .collect(),
    }
}

fn train_from(
    mut model: ModelGraph,
    data: &[DomainDataset],
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let classes = model.arch.classes;

    let view: Vec<DomainDataset> = if cfg.align {
        align_corpus(data)?
    } else {
        data.to_vec()
    };
    let trials = pooled_trials(&view);
    if trials.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    check_labels(&trials, classes)?;

    let adversarial = cfg.at_mode != AtMode::Bt;
    let resolved: Option<(f64, AttackOp, f64)> = if adversarial {
        let inner = cfg.inner_attack.as_ref().expect("validated");
        let scale: EpsilonScale = attacks::compute_sigma(&trials)?;
        let (eps_abs, op) = inner.resolve(&scale);
        Some((eps_abs, op, scale.sigma))
    } else {
        None
    };

    let mut log = TrainLog {
        sigma: resolved.as_ref().map(|(_, _, s)| *s),
        ..TrainLog::default()
    };

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut shuffle_rng = rng::stream(cfg.seed, &[0x5348]);
    let mut dropout_rng = rng::stream(cfg.seed, &[0x4452]);

    model.set_mode(Mode::Train);
    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let lr = if epoch <= cfg.lr_drop_epoch {
            cfg.lr_initial
        } else {
            cfg.lr_drop
        };

        let mut perm: Vec<usize> = (0..trials.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let fingerprint = {
            let bytes: Vec<u8> = perm.iter().flat_map(|&i| (i as u32).to_le_bytes()).collect();
            rng::fnv1a(&bytes)
        };

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let batch_refs: Vec<&Trial> = chunk.iter().map(|&i| &trials[i]).collect();
            let labels: Vec<usize> = batch_refs
                .iter()
                .map(|t| t.label.unwrap() as usize)
                .collect();

            let train_input = if let Some((eps_abs, op, _)) = &resolved {
                let seeds: Vec<u64> = chunk
                    .iter()
                    .map(|&i| rng::derive(cfg.seed, &[0xA77, epoch as u64, i as u64]))
                    .collect();
                let adv = adversarial_batch(&model, &batch_refs, *eps_abs, op, &seeds)?;
                let adv_refs: Vec<&Trial> = adv.iter().collect();
                batch_from_trials(&adv_refs)?
            } else {
                batch_from_trials(&batch_refs)?
            };

            let (mut tape, ids) = model.forward_train(&train_input, &mut dropout_rng)?;
            let loss_id = tape.softmax_cross_entropy(ids.logits, &labels)?;
            let grads = tape.backward(loss_id)?;
            let grad_slices: Vec<&[f64]> = ids
                .params
                .iter()
                .map(|&id| grads.wrt(id).map(|t| t.data()))
                .collect::<Result<_>>()?;

            // the tape owns parameter copies; update the model's own
            let mut params: Vec<crate::tensor::Tensor> = model.params().to_vec();
            adam.step(&mut params, &grad_slices, lr);
            for (i, p) in params.into_iter().enumerate() {
                model.set_param(i, p)?;
            }

            loss_sum += tape.value(loss_id).scalar()? * chunk.len() as f64;
            seen += chunk.len();
        }

        let benign_bca = eval_bca(&model, &trials)?;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            benign_bca,
            wall_ms: epoch_start.elapsed().as_millis() as u64,
            rng_fingerprint: fingerprint,
        });
    }
    model.set_mode(Mode::Eval);
    log.total_wall_ms = start.elapsed().as_millis() as u64;
    Ok((model, log))
}

/// Train a model on the given domains per the configuration.
///
/// BT minimizes loss on benign batches of the (aligned-or-raw) pool;
/// AT/ABAT replace every batch with adversarial examples generated
/// against the current parameters and minimize the loss on those only.
pub fn train(
    data: &[DomainDataset],
    cfg: &TrainConfig,
    arch: &ArchSpec,
) -> Result<(ModelGraph, TrainLog)> {
    let initial = match &cfg.pretrained_checkpoint {
        Some(path) => {
            let loaded = ModelGraph::load(path)?;
            if loaded.arch != *arch {
                return Err(Error::ArchMismatch(format!(
                    "checkpoint arch {:?} does not match requested {:?}",
                    loaded.arch, arch
                )));
            }
            loaded
        }
        None => {
            // fresh init per training seed so repeated runs are
            // independent repetitions
            let mut eff = arch.clone();
            eff.seed = rng::derive(cfg.seed, &[arch.seed, 0x1a17]);
            let mut m = models::build(&eff)?;
            m.arch = arch.clone();
            m
        }
    };
    train_from(initial, data, cfg)
}

/// Pre-train on source domains, then fine-tune on target domains
/// starting from the pre-trained weights.
pub fn pretrain_finetune(
    source: &[DomainDataset],
    target: &[DomainDataset],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    arch: &ArchSpec,
) -> Result<(ModelGraph, TrainLog)> {
    let src_ids: std::collections::HashSet<u32> = source.iter().map(|d| d.id).collect();
    if target.iter().any(|d| src_ids.contains(&d.id)) {
        return Err(Error::InvalidConfig(
            "source and target domain ids must be disjoint".into(),
        ));
    }
    let (pretrained, _) = train(source, pretrain_cfg, arch)?;
    if finetune_cfg.epochs == 0 {
        // zero-epoch fine-tune: pre-trained weights pass through unchanged
        return Ok((pretrained, TrainLog::default()));
    }
    train_from(pretrained, target, finetune_cfg)
}
