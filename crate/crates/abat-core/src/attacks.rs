//! l-infinity adversarial example generation: FGSM, PGD, a black-box
//! square-style random search, and a worst-case ensemble.
//!
//! Perturbation budgets are specified relative to the signal standard
//! deviation (sigma) of the training corpus and converted to absolute
//! budgets once per experiment. All attacks keep their output inside the
//! closed l-infinity ball around the input, exactly, by projection.
//!
//! Attack generation is embarrassingly parallel across trials: every
//! trial's randomness comes from its own stream derived from (seed,
//! trial index), so results do not depend on batching or scheduling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Trial;
use crate::error::{Error, Result};
use crate::models::{batch_from_trials, ModelGraph};
use crate::rng;
use crate::tensor::Tensor;

/// Conversion factor from relative to absolute perturbation budgets:
/// the population standard deviation of all entries of the (aligned)
/// training-set trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonScale {
    pub sigma: f64,
}

/// Population standard deviation over all entries of all trials
/// (streaming Welford accumulation; the two-pass formula is the test
/// oracle).
pub fn compute_sigma(trials: &[Trial]) -> Result<EpsilonScale> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("compute_sigma"));
    }
    let mut count = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for t in trials {
        for &v in t.data() {
            count += 1;
            let d = v - mean;
            mean += d / count as f64;
            m2 += d * (v - mean);
        }
    }
    let sigma = (m2 / count as f64).sqrt();
    if sigma <= 0.0 {
        return Err(Error::InvalidConfig(
            "constant signal: standard deviation is zero".into(),
        ));
    }
    Ok(EpsilonScale { sigma })
}

/// sign with sign(0) = 0, so zero-gradient coordinates stay untouched.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Largest absolute coordinate difference between two trials.
pub fn linf_distance(a: &Trial, b: &Trial) -> f64 {
    a.max_abs_diff(b)
}

/// Anything attackable: exposes logits, and (for white-box attacks)
/// input gradients of the cross-entropy loss. Implemented by
/// [`ModelGraph`]; test oracles implement it for closed-form models.
pub trait AttackTarget {
    fn num_classes(&self) -> usize;
    /// Logits for a (B, 1, C, T) batch, eval semantics.
    fn batch_logits(&self, batch: &Tensor) -> Result<Tensor>;
    /// Mean cross-entropy loss and its gradient with respect to the batch.
    fn batch_loss_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

impl AttackTarget for ModelGraph {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn batch_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let (tape, ids) = self.forward_eval(batch, false)?;
        Ok(tape.value(ids.logits).clone())
    }

    fn batch_loss_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let (mut tape, ids) = self.forward_eval(batch, true)?;
        let loss = tape.softmax_cross_entropy(ids.logits, labels)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt(ids.input)?.clone();
        if !g.is_finite() {
            return Err(Error::GradientNotFinite("input gradient".into()));
        }
        Ok((tape.value(loss).scalar()?, g))
    }
}

/// Cross-entropy of one logits row against a label.
pub fn ce_loss(logits_row: &[f64], label: usize) -> f64 {
    let m = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits_row.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln() - logits_row[label]
}

fn labels_of(trials: &[&Trial]) -> Result<Vec<usize>> {
    trials
        .iter()
        .map(|t| {
            t.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::InvalidConfig("attack requires a labeled trial".into()))
        })
        .collect()
}

fn trials_from_batch(batch: &[f64], trials: &[&Trial]) -> Result<Vec<Trial>> {
    let per = trials.first().map_or(0, |t| t.data().len());
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| t.with_data(batch[i * per..(i + 1) * per].to_vec()))
        .collect()
}

/// Single-step sign-of-gradient attack on a batch of trials.
pub fn fgsm_batch<M: AttackTarget>(
    model: &M,
    trials: &[&Trial],
    eps_abs: f64,
) -> Result<Vec<Trial>> {
    if eps_abs < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be nonnegative".into()));
    }
    let labels = labels_of(trials)?;
    let batch = batch_from_trials(trials)?;
    let (_, grad) = model.batch_loss_grad(&batch, &labels)?;
    let adv: Vec<f64> = batch
        .data()
        .iter()
        .zip(grad.data())
        .map(|(x, g)| x + eps_abs * sign(*g))
        .collect();
    trials_from_batch(&adv, trials)
}

/// FGSM for a single trial; `label` overrides the trial's own label.
pub fn fgsm<M: AttackTarget>(model: &M, trial: &Trial, label: u32, eps_abs: f64) -> Result<Trial> {
    let mut t = trial.clone();
    t.label = Some(label);
    Ok(fgsm_batch(model, &[&t], eps_abs)?.remove(0))
}

/// Iterated projected-gradient attack on a batch; each trial's random
/// start is drawn from its own stream in `seeds`.
pub fn pgd_batch<M: AttackTarget>(
    model: &M,
    trials: &[&Trial],
    eps_abs: f64,
    alpha_abs: f64,
    steps: usize,
    random_start: bool,
    seeds: &[u64],
) -> Result<Vec<Trial>> {
    if eps_abs < 0.0 || alpha_abs < 0.0 {
        return Err(Error::InvalidConfig("budgets must be nonnegative".into()));
    }
    if alpha_abs > eps_abs {
        return Err(Error::InvalidConfig(format!(
            "pgd step size {alpha_abs} exceeds budget {eps_abs}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("pgd needs at least one step".into()));
    }
    if seeds.len() != trials.len() {
        return Err(Error::InvalidConfig(
            "one pgd seed per trial required".into(),
        ));
    }
    let labels = labels_of(trials)?;
    let origin = batch_from_trials(trials)?;
    let per = trials.first().map_or(0, |t| t.data().len());

    let mut current = origin.data().to_vec();
    if random_start && eps_abs > 0.0 {
        for (i, &seed) in seeds.iter().enumerate() {
            let mut noise_rng = rng::stream(seed, &[0x7064]);
            for v in current[i * per..(i + 1) * per].iter_mut() {
                *v += noise_rng.gen::<f64>() * 2.0 * eps_abs - eps_abs;
            }
        }
    }
    for _ in 0..steps {
        let batch = Tensor::new(origin.shape().to_vec(), current.clone())?;
        let (_, grad) = model.batch_loss_grad(&batch, &labels)?;
        for ((v, g), o) in current.iter_mut().zip(grad.data()).zip(origin.data()) {
            let stepped = *v + alpha_abs * sign(*g);
            *v = stepped.clamp(o - eps_abs, o + eps_abs);
        }
    }
    trials_from_batch(&current, trials)
}

/// PGD for a single trial.
#[allow(clippy::too_many_arguments)]
pub fn pgd<M: AttackTarget>(
    model: &M,
    trial: &Trial,
    label: u32,
    eps_abs: f64,
    alpha_abs: f64,
    steps: usize,
    random_start: bool,
    seed: u64,
) -> Result<Trial> {
    let mut t = trial.clone();
    t.label = Some(label);
    Ok(pgd_batch(model, &[&t], eps_abs, alpha_abs, steps, random_start, &[seed])?.remove(0))
}

/// Black-box random search adapted to (channel, time) layouts: proposals
/// set a (channel-subset x contiguous-time-window) rectangle of the
/// perturbation to +/- eps, with the rectangle size decaying
/// geometrically over the query budget. A proposal is accepted only if
/// the loss strictly increases, so the accepted-loss sequence is
/// nondecreasing. Uses logits only.
pub fn square_attack<M: AttackTarget>(
    model: &M,
    trial: &Trial,
    label: u32,
    eps_abs: f64,
    queries: usize,
    seed: u64,
) -> Result<Trial> {
    if eps_abs < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be nonnegative".into()));
    }
    if queries == 0 || eps_abs == 0.0 {
        return Ok(trial.clone());
    }
    let (c, t) = (trial.channels(), trial.samples());
    let label = label as usize;
    let loss_of = |data: &[f64]| -> Result<f64> {
        let candidate = trial.with_data(data.to_vec())?;
        let batch = batch_from_trials(&[&candidate])?;
        let logits = model.batch_logits(&batch)?;
        Ok(ce_loss(logits.data(), label))
    };

    let mut rng = rng::stream(seed, &[0x5154]);
    let mut delta = vec![0.0; c * t];
    let mut best = trial.data().to_vec();
    let mut best_loss = loss_of(&best)?;
    let mut used = 1usize;

    // full-budget random-sign start, kept only if it raises the loss
    if used < queries {
        let cand_delta: Vec<f64> = (0..c * t)
            .map(|_| if rng.gen::<bool>() { eps_abs } else { -eps_abs })
            .collect();
        let cand: Vec<f64> = trial
            .data()
            .iter()
            .zip(&cand_delta)
            .map(|(x, d)| x + d)
            .collect();
        let loss = loss_of(&cand)?;
        used += 1;
        if loss > best_loss {
            best_loss = loss;
            best = cand;
            delta = cand_delta;
        }
    }

    let p0: f64 = 0.5;
    let p_min: f64 = 1.0 / (c * t) as f64;
    let decay = (p_min / p0).powf(1.0 / queries as f64);
    let mut p = p0;

    while used < queries {
        p *= decay;
        let n_ch = ((p * c as f64).ceil() as usize).clamp(1, c);
        let win = ((p * t as f64).ceil() as usize).clamp(1, t);

        // distinct channels via partial Fisher-Yates
        let mut chans: Vec<usize> = (0..c).collect();
        for i in 0..n_ch {
            let j = rng.gen_range(i..c);
            chans.swap(i, j);
        }
        let offset = rng.gen_range(0..=t - win);

        let mut cand_delta = delta.clone();
        for &ch in &chans[..n_ch] {
            let s = if rng.gen::<bool>() { eps_abs } else { -eps_abs };
            for v in cand_delta[ch * t + offset..ch * t + offset + win].iter_mut() {
                *v = s;
            }
        }
        let cand: Vec<f64> = trial
            .data()
            .iter()
            .zip(&cand_delta)
            .map(|(x, d)| x + d)
            .collect();
        let loss = loss_of(&cand)?;
        used += 1;
        if loss > best_loss {
            best_loss = loss;
            best = cand;
            delta = cand_delta;
        }
    }
    trial.with_data(best)
}

/// Resolved attack operation with absolute budgets.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackOp {
    Fgsm,
    Pgd {
        steps: usize,
        alpha_abs: f64,
        random_start: bool,
    },
    Square {
        queries: usize,
    },
    Ensemble {
        members: Vec<AttackOp>,
    },
}

/// Run one attack on one trial; `seed` feeds all randomness.
pub fn run_attack<M: AttackTarget>(
    model: &M,
    trial: &Trial,
    label: u32,
    eps_abs: f64,
    op: &AttackOp,
    seed: u64,
) -> Result<Trial> {
    match op {
        AttackOp::Fgsm => fgsm(model, trial, label, eps_abs),
        AttackOp::Pgd {
            steps,
            alpha_abs,
            random_start,
        } => pgd(
            model,
            trial,
            label,
            eps_abs,
            *alpha_abs,
            *steps,
            *random_start,
            seed,
        ),
        AttackOp::Square { queries } => square_attack(model, trial, label, eps_abs, *queries, seed),
        AttackOp::Ensemble { members } => ensemble(model, trial, label, eps_abs, members, seed),
    }
}

/// Worst-case ensemble: runs every member and returns the member output
/// with maximal loss (ties break to the first member).
pub fn ensemble<M: AttackTarget>(
    model: &M,
    trial: &Trial,
    label: u32,
    eps_abs: f64,
    members: &[AttackOp],
    seed: u64,
) -> Result<Trial> {
    if members.is_empty() {
        return Err(Error::EmptyInput("ensemble members"));
    }
    let mut best: Option<(f64, Trial)> = None;
    for (i, member) in members.iter().enumerate() {
        let candidate = run_attack(
            model,
            trial,
            label,
            eps_abs,
            member,
            rng::derive(seed, &[i as u64]),
        )?;
        let logits = model.batch_logits(&batch_from_trials(&[&candidate])?)?;
        let loss = ce_loss(logits.data(), label as usize);
        let better = best.as_ref().map_or(true, |(b, _)| loss > *b);
        if better {
            best = Some((loss, candidate));
        }
    }
    Ok(best.expect("non-empty members").1)
}

/// Serializable attack configuration with relative budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Square,
    Ensemble,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Pgd => "PGD",
            AttackKind::Square => "Square",
            AttackKind::Ensemble => "Ensemble",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Budget as a multiple of the training-signal standard deviation.
    pub epsilon_rel: f64,
    /// Iterations for PGD; query budget is `10 * steps` for the square
    /// attack and its ensemble member.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Step size as a multiple of sigma; 0 selects epsilon/10.
    #[serde(default)]
    pub step_size_rel: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    20
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    /// Evaluation-protocol PGD: 20 iterations, step epsilon/10.
    pub fn pgd_eval(epsilon_rel: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon_rel,
            steps: 20,
            step_size_rel: epsilon_rel / 10.0,
            random_start: true,
            seed: 0,
        }
    }

    /// Training-protocol PGD: 10 iterations, step epsilon/5.
    pub fn pgd_train(epsilon_rel: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon_rel,
            steps: 10,
            step_size_rel: epsilon_rel / 5.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon_rel: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon_rel,
            steps: 1,
            step_size_rel: epsilon_rel,
            random_start: false,
            seed: 0,
        }
    }

    pub fn square(epsilon_rel: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Square,
            epsilon_rel,
            steps: 20,
            step_size_rel: epsilon_rel,
            random_start: false,
            seed: 0,
        }
    }

    /// Worst-case ensemble of FGSM, eval-protocol PGD, and the square
    /// attack.
    pub fn ensemble(epsilon_rel: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Ensemble,
            epsilon_rel,
            steps: 20,
            step_size_rel: epsilon_rel / 10.0,
            random_start: true,
            seed: 0,
        }
    }

    /// Strict validation for evaluation-grid configs.
    pub fn validate(&self) -> Result<()> {
        self.validate_with(false)
    }

    /// Training-side validation; a zero budget is the documented
    /// degenerate case that reduces adversarial training to benign
    /// training.
    pub fn validate_with(&self, allow_zero_eps: bool) -> Result<()> {
        if self.epsilon_rel < 0.0 || (!allow_zero_eps && self.epsilon_rel == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack epsilon must be positive, got {}",
                self.epsilon_rel
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack steps must be >= 1".into()));
        }
        if self.step_size_rel > self.epsilon_rel {
            return Err(Error::InvalidConfig(format!(
                "step size {} exceeds epsilon {}",
                self.step_size_rel, self.epsilon_rel
            )));
        }
        Ok(())
    }

    /// Effective PGD step size (relative).
    pub fn step_rel(&self) -> f64 {
        if self.step_size_rel > 0.0 {
            self.step_size_rel
        } else {
            self.epsilon_rel / 10.0
        }
    }

    /// Absolute budget and resolved operation for a given sigma.
    pub fn resolve(&self, scale: &EpsilonScale) -> (f64, AttackOp) {
        let eps_abs = self.epsilon_rel * scale.sigma;
        let alpha_abs = self.step_rel() * scale.sigma;
        let op = match self.kind {
            AttackKind::Fgsm => AttackOp::Fgsm,
            AttackKind::Pgd => AttackOp::Pgd {
                steps: self.steps,
                alpha_abs,
                random_start: self.random_start,
            },
            AttackKind::Square => AttackOp::Square {
                queries: 10 * self.steps,
            },
            AttackKind::Ensemble => AttackOp::Ensemble {
                members: vec![
                    AttackOp::Fgsm,
                    AttackOp::Pgd {
                        steps: self.steps,
                        alpha_abs,
                        random_start: self.random_start,
                    },
                    AttackOp::Square {
                        queries: 10 * self.steps,
                    },
                ],
            },
        };
        (eps_abs, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{argmax, build, ArchSpec, Family};
    use rand::Rng;

    /// Closed-form logistic model on a flattened input:
    /// logits = [w.x, -w.x], so class 0 is favored when w.x > 0.
    struct LinearModel {
        w: Vec<f64>,
    }

    impl AttackTarget for LinearModel {
        fn num_classes(&self) -> usize {
            2
        }

        fn batch_logits(&self, batch: &Tensor) -> Result<Tensor> {
            let b = batch.shape()[0];
            let d = batch.numel() / b;
            let mut out = Vec::with_capacity(b * 2);
            for i in 0..b {
                let x = &batch.data()[i * d..(i + 1) * d];
                let s: f64 = x.iter().zip(&self.w).map(|(a, b)| a * b).sum();
                out.push(s);
                out.push(-s);
            }
            Tensor::new(vec![b, 2], out)
        }

        fn batch_loss_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
            let logits = self.batch_logits(batch)?;
            let b = batch.shape()[0];
            let d = batch.numel() / b;
            let mut grad = vec![0.0; batch.numel()];
            let mut loss = 0.0;
            for i in 0..b {
                let row = &logits.data()[i * 2..(i + 1) * 2];
                loss += ce_loss(row, labels[i]);
                // loss depends on x only through s = w.x:
                // dl/ds = p0 - 1 for label 0, 1 - p1 = p0 for label 1,
                // and the margin doubles because logit 1 is -s.
                let p0 = 1.0 / (1.0 + (-2.0 * row[0]).exp());
                let dl_ds = if labels[i] == 0 { p0 - 1.0 } else { p0 };
                for (g, wv) in grad[i * d..(i + 1) * d].iter_mut().zip(&self.w) {
                    *g = 2.0 * dl_ds * wv / b as f64;
                }
            }
            Ok((loss / b as f64, Tensor::new(batch.shape().to_vec(), grad)?))
        }
    }

    fn trial_from(data: Vec<f64>, c: usize, t: usize, label: u32) -> Trial {
        Trial::new(c, t, data, Some(label), 0).unwrap()
    }

    #[test]
    fn sigma_of_symmetric_data_is_one() {
        let t1 = trial_from(vec![1.0, -1.0, 1.0, -1.0], 1, 4, 0);
        assert!((compute_sigma(&[t1]).unwrap().sigma - 1.0).abs() < 1e-12);

        let t2 = trial_from(vec![0.0, 0.0, 2.0, 2.0], 1, 4, 0);
        assert!((compute_sigma(&[t2]).unwrap().sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_matches_two_pass_oracle() {
        let mut rng = crate::rng::stream(6, &[12]);
        let trials: Vec<Trial> = (0..5)
            .map(|_| {
                let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
                trial_from(data, 2, 32, 0)
            })
            .collect();
        let sigma = compute_sigma(&trials).unwrap().sigma;
        // two-pass oracle
        let all: Vec<f64> = trials.iter().flat_map(|t| t.data().to_vec()).collect();
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 =
            all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        assert!((sigma - var.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn sigma_of_constant_data_is_an_error() {
        let t = trial_from(vec![3.0; 8], 2, 4, 0);
        assert!(compute_sigma(&[t]).is_err());
    }

    #[test]
    fn fgsm_on_logistic_model_matches_analytic_signs() {
        // w = [1, -2], x = [0.5, 0.5], true label 0 ("positive").
        // grad_x loss = 2 (p0-1) w with p0-1 < 0, so signs = (-1, +1)
        // -> x_adv = [0.4, 0.6] at eps 0.1
        let model = LinearModel { w: vec![1.0, -2.0] };
        let t = trial_from(vec![0.5, 0.5], 1, 2, 0);
        let adv = fgsm(&model, &t, 0, 0.1).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-12);
        assert!((adv.data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_gradient_leaves_input_unchanged() {
        let model = LinearModel { w: vec![0.0, 0.0] };
        let t = trial_from(vec![0.3, -0.4], 1, 2, 1);
        let adv = fgsm(&model, &t, 1, 0.2).unwrap();
        assert_eq!(adv.data(), t.data());
    }

    #[test]
    fn fgsm_perturbation_has_exact_magnitude_on_active_coords() {
        let model = LinearModel { w: vec![0.7, -0.1] };
        let t = trial_from(vec![0.1, 0.9], 1, 2, 0);
        let eps = 0.05;
        let adv = fgsm(&model, &t, 0, eps).unwrap();
        for (a, b) in adv.data().iter().zip(t.data()) {
            assert!(((a - b).abs() - eps).abs() < 1e-15);
        }
    }

    #[test]
    fn pgd_single_step_full_alpha_equals_fgsm() {
        let model = LinearModel { w: vec![0.9, -0.4] };
        let t = trial_from(vec![0.2, -0.3], 1, 2, 0);
        let eps = 0.07;
        let a = fgsm(&model, &t, 0, eps).unwrap();
        let b = pgd(&model, &t, 0, eps, eps, 1, false, 42).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn pgd_projection_clamps_to_ball() {
        // alpha = eps and several steps drive coordinates to the boundary,
        // never beyond
        let model = LinearModel { w: vec![1.0, 1.0] };
        let t = trial_from(vec![0.0, 0.0], 1, 2, 1);
        let eps = 0.02;
        let adv = pgd(&model, &t, 1, eps, eps, 5, false, 0).unwrap();
        assert!(linf_distance(&adv, &t) <= eps + 1e-12);
        assert!((adv.data()[0].abs() - eps).abs() < 1e-12);
    }

    #[test]
    fn pgd_random_start_is_seeded_and_in_ball() {
        let model = LinearModel { w: vec![0.5, 0.5] };
        let t = trial_from(vec![0.1, 0.2], 1, 2, 0);
        let a = pgd(&model, &t, 0, 0.1, 0.01, 3, true, 7).unwrap();
        let b = pgd(&model, &t, 0, 0.1, 0.01, 3, true, 7).unwrap();
        let c = pgd(&model, &t, 0, 0.1, 0.01, 3, true, 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(linf_distance(&a, &t) <= 0.1 + 1e-12);
    }

    #[test]
    fn pgd_batch_matches_per_trial() {
        let mut spec = ArchSpec::new(Family::Eegnet, 4, 128, 2);
        spec.width_mult = 0.25;
        let model = build(&spec).unwrap();
        let mut rng = crate::rng::stream(3, &[5]);
        let trials: Vec<Trial> = (0..3)
            .map(|i| {
                let data: Vec<f64> = (0..4 * 128).map(|_| rng.gen::<f64>() - 0.5).collect();
                trial_from(data, 4, 128, i % 2)
            })
            .collect();
        let refs: Vec<&Trial> = trials.iter().collect();
        let seeds = vec![11, 22, 33];
        let batch = pgd_batch(&model, &refs, 0.05, 0.01, 4, true, &seeds).unwrap();
        for (i, t) in trials.iter().enumerate() {
            let solo = pgd(&model, t, t.label.unwrap(), 0.05, 0.01, 4, true, seeds[i]).unwrap();
            assert_eq!(solo.data(), batch[i].data(), "trial {i}");
        }
    }

    #[test]
    fn square_attack_zero_budget_returns_input() {
        let model = LinearModel { w: vec![1.0, -1.0] };
        let t = trial_from(vec![0.5, 0.5], 1, 2, 0);
        let adv = square_attack(&model, &t, 0, 0.1, 0, 9).unwrap();
        assert_eq!(adv.data(), t.data());
    }

    #[test]
    fn square_attack_stays_in_ball_and_is_deterministic() {
        let model = LinearModel {
            w: (0..16).map(|i| ((i as f64) - 8.0) / 8.0).collect(),
        };
        let t = trial_from((0..16).map(|i| (i as f64) * 0.01).collect(), 2, 8, 0);
        let a = square_attack(&model, &t, 0, 0.05, 300, 4).unwrap();
        let b = square_attack(&model, &t, 0, 0.05, 300, 4).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(linf_distance(&a, &t) <= 0.05 + 1e-12);
    }

    #[test]
    fn square_attack_approaches_fgsm_corner_on_linear_model() {
        // on a linear model FGSM attains the exact l-inf maximum, so the
        // random search should reach at least 90% of that loss
        let mut rng = crate::rng::stream(14, &[2]);
        let w: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let model = LinearModel { w };
        let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 0.2).collect();
        let t = trial_from(data, 2, 8, 0);
        let eps = 0.05;

        let fgsm_adv = fgsm(&model, &t, 0, eps).unwrap();
        let fgsm_loss = ce_loss(
            model
                .batch_logits(&batch_from_trials(&[&fgsm_adv]).unwrap())
                .unwrap()
                .data(),
            0,
        );
        let sq = square_attack(&model, &t, 0, eps, 2000, 3).unwrap();
        let sq_loss = ce_loss(
            model
                .batch_logits(&batch_from_trials(&[&sq]).unwrap())
                .unwrap()
                .data(),
            0,
        );
        assert!(
            sq_loss >= 0.9 * fgsm_loss,
            "square {sq_loss} vs fgsm {fgsm_loss}"
        );
    }

    #[test]
    fn ensemble_takes_the_max_loss_member() {
        let model = LinearModel { w: vec![1.0, -0.5] };
        let t = trial_from(vec![0.4, 0.1], 1, 2, 0);
        let eps = 0.08;
        let members = vec![
            AttackOp::Square { queries: 1 }, // weak: only evaluates the input
            AttackOp::Fgsm,                  // optimal on a linear model
        ];
        let out = ensemble(&model, &t, 0, eps, &members, 5).unwrap();
        let fg = fgsm(&model, &t, 0, eps).unwrap();
        assert_eq!(out.data(), fg.data());

        // single member: identity over that member
        let single = ensemble(&model, &t, 0, eps, &[AttackOp::Fgsm], 5).unwrap();
        assert_eq!(single.data(), fg.data());

        // loss(ensemble) == max(member losses)
        let loss = |tr: &Trial| {
            ce_loss(
                model
                    .batch_logits(&batch_from_trials(&[tr]).unwrap())
                    .unwrap()
                    .data(),
                0,
            )
        };
        let l_sq =
            loss(&ensemble(&model, &t, 0, eps, &[AttackOp::Square { queries: 1 }], 5).unwrap());
        assert!((loss(&out) - loss(&fg).max(l_sq)).abs() < 1e-12);
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig::pgd_eval(0.03).validate().is_ok());
        assert!(AttackConfig::fgsm(0.0).validate().is_err());
        assert!(AttackConfig::fgsm(0.0).validate_with(true).is_ok());
        let mut bad = AttackConfig::pgd_eval(0.01);
        bad.step_size_rel = 0.02;
        assert!(bad.validate().is_err());
        let mut zero_steps = AttackConfig::fgsm(0.01);
        zero_steps.steps = 0;
        assert!(zero_steps.validate().is_err());
    }

    #[test]
    fn labels_do_not_leak_into_projection() {
        // attacking with a wrong label changes the direction, never the ball
        let model = LinearModel { w: vec![1.0, 2.0] };
        let t = trial_from(vec![0.2, 0.2], 1, 2, 0);
        let a0 = fgsm(&model, &t, 0, 0.1).unwrap();
        let a1 = fgsm(&model, &t, 1, 0.1).unwrap();
        assert!(linf_distance(&a0, &t) <= 0.1 + 1e-12);
        assert!(linf_distance(&a1, &t) <= 0.1 + 1e-12);
        // opposite gradient directions flip the perturbation
        for (x, y) in a0.data().iter().zip(a1.data()) {
            assert!((x + y - 2.0 * 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attacks_flip_predictions_near_the_boundary() {
        let model = LinearModel { w: vec![1.0, 1.0] };
        // barely class 0; a small attack flips it
        let t = trial_from(vec![0.011, 0.0], 1, 2, 0);
        let logits = model
            .batch_logits(&batch_from_trials(&[&t]).unwrap())
            .unwrap();
        assert_eq!(argmax(&logits.data()[0..2]), 0);
        let adv = fgsm(&model, &t, 0, 0.05).unwrap();
        let logits = model
            .batch_logits(&batch_from_trials(&[&adv]).unwrap())
            .unwrap();
        assert_eq!(argmax(&logits.data()[0..2]), 1);
    }
}
