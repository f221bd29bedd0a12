//! Euclidean alignment: per-domain whitening by the inverse square root
//! of the mean spatial covariance, in batch and incremental (streaming)
//! form.
//!
//! After batch alignment the mean spatial covariance of a domain equals
//! the identity; the streaming variant keeps a running mean covariance
//! that matches the batch mean over the trials seen so far.

use crate::datagen::DomainDataset;
use crate::error::{Error, Result};
use crate::symlinalg::{self, SpdMatrix};

/// One epoch: a channels x timepoints matrix with an optional class
/// label and the id of the domain (session/block/subject) it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    channels: usize,
    samples: usize,
    data: Vec<f64>,
    pub label: Option<u32>,
    pub domain: u32,
}

impl Trial {
    pub fn new(
        channels: usize,
        samples: usize,
        data: Vec<f64>,
        label: Option<u32>,
        domain: u32,
    ) -> Result<Self> {
        if channels == 0 || samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "trial must have at least one channel and one timepoint, got {channels}x{samples}"
            )));
        }
        if data.len() != channels * samples {
            return Err(Error::ShapeMismatch {
                op: "Trial::new",
                expected: format!("{} values ({channels}x{samples})", channels * samples),
                actual: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("trial data".into()));
        }
        Ok(Trial {
            channels,
            samples,
            data,
            label,
            domain,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.samples..(channel + 1) * self.samples]
    }

    /// Same label/domain, new sample matrix.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Trial::new(self.channels, self.samples, data, self.label, self.domain)
    }

    /// Largest absolute difference between two trials' samples.
    pub fn max_abs_diff(&self, other: &Trial) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Running state for incremental alignment of one target domain.
#[derive(Debug, Clone)]
pub struct AlignmentState {
    n: usize,
    mean_cov: Option<SpdMatrix>,
    cached_inv_sqrt: Option<SpdMatrix>,
}

impl AlignmentState {
    pub fn new() -> Self {
        AlignmentState {
            n: 0,
            mean_cov: None,
            cached_inv_sqrt: None,
        }
    }

    /// Trials folded into the state so far.
    pub fn count(&self) -> usize {
        self.n
    }

    /// Mean spatial covariance over the trials seen; `None` before the
    /// first update.
    pub fn mean_cov(&self) -> Option<&SpdMatrix> {
        self.mean_cov.as_ref()
    }
}

impl Default for AlignmentState {
    fn default() -> Self {
        Self::new()
    }
}

fn whitener(mean_cov: &SpdMatrix) -> Result<SpdMatrix> {
    let (eigenvalues, _) = symlinalg::sym_eig(mean_cov)?;
    let floor = symlinalg::default_floor(eigenvalues.first().copied().unwrap_or(0.0));
    symlinalg::inv_sqrt(mean_cov, floor)
}

fn apply_whitener(w: &SpdMatrix, trial: &Trial) -> Result<Trial> {
    let aligned = w.apply(trial.data(), trial.samples())?;
    trial.with_data(aligned)
}

/// Batch Euclidean alignment of one domain.
///
/// All trials must share a channel count and domain id. The returned
/// trials have mean spatial covariance equal to the identity (up to the
/// eigenvalue floor used for rank-deficient domains).
pub fn align_domain(trials: &[Trial]) -> Result<Vec<Trial>> {
    let first = trials.first().ok_or(Error::EmptyInput("align_domain"))?;
    if let Some(bad) = trials.iter().find(|t| t.channels() != first.channels()) {
        return Err(Error::ShapeMismatch {
            op: "align_domain",
            expected: format!("{} channels", first.channels()),
            actual: format!("{} channels", bad.channels()),
        });
    }
    if trials.iter().any(|t| t.domain != first.domain) {
        return Err(Error::InvalidConfig(
            "align_domain requires trials from a single domain".into(),
        ));
    }
    let mean = symlinalg::mean_covariance(trials)?;
    let w = whitener(&mean)?;
    trials.iter().map(|t| apply_whitener(&w, t)).collect()
}

/// Fold one trial into the running mean covariance and align it with
/// the updated whitener.
pub fn incremental_update(state: &mut AlignmentState, trial: &Trial) -> Result<Trial> {
    let cov = symlinalg::spatial_covariance(trial);
    let updated = match state.mean_cov.take() {
        None => cov,
        Some(prev) => {
            if prev.dim() != trial.channels() {
                return Err(Error::ShapeMismatch {
                    op: "incremental_update",
                    expected: format!("{} channels", prev.dim()),
                    actual: format!("{}", trial.channels()),
                });
            }
            let n = state.n as f64;
            let data: Vec<f64> = prev
                .data()
                .iter()
                .zip(cov.data())
                .map(|(p, c)| (n * p + c) / (n + 1.0))
                .collect();
            SpdMatrix::from_data(prev.dim(), data)?
        }
    };
    let w = whitener(&updated)?;
    let aligned = apply_whitener(&w, trial)?;
    state.n += 1;
    state.mean_cov = Some(updated);
    state.cached_inv_sqrt = Some(w);
    Ok(aligned)
}

/// Align every domain independently with its own mean covariance.
pub fn align_corpus(domains: &[DomainDataset]) -> Result<Vec<DomainDataset>> {
    domains
        .iter()
        .map(|d| {
            let trials = align_domain(&d.trials).map_err(|e| e.in_domain(d.id))?;
            Ok(DomainDataset { id: d.id, trials })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_trials(n: usize, c: usize, t: usize, domain: u32, seed: u64) -> Vec<Trial> {
        let mut rng = stream(seed, &[domain as u64, 0xa11]);
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..c * t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                Trial::new(c, t, data, Some(0), domain).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_trial_with_cov_4i_is_halved() {
        // X with X X^T = 4I: 2 channels, 4 samples, orthogonal rows of norm 2
        let x = vec![2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let t = Trial::new(2, 4, x.clone(), None, 3).unwrap();
        let aligned = align_domain(std::slice::from_ref(&t)).unwrap();
        for (a, b) in aligned[0].data().iter().zip(&x) {
            assert!((a - b / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn whitening_property_and_idempotence() {
        let trials = random_trials(20, 6, 48, 1, 9);
        let aligned = align_domain(&trials).unwrap();
        let mean = symlinalg::mean_covariance(&aligned).unwrap();
        // mean covariance divides by samples? No: X X^T over 48 samples has
        // scale ~48; whitening targets identity exactly per the definition.
        assert!(
            mean.max_dist_from_identity() < 1e-6,
            "residual {}",
            mean.max_dist_from_identity()
        );

        // aligning an already-whitened domain is a no-op
        let twice = align_domain(&aligned).unwrap();
        let drift = aligned
            .iter()
            .zip(&twice)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn scale_invariance() {
        let trials = random_trials(10, 4, 32, 0, 4);
        let aligned = align_domain(&trials).unwrap();
        let scaled: Vec<Trial> = trials
            .iter()
            .map(|t| {
                t.with_data(t.data().iter().map(|v| v * 7.5).collect())
                    .unwrap()
            })
            .collect();
        let aligned_scaled = align_domain(&scaled).unwrap();
        let drift = aligned
            .iter()
            .zip(&aligned_scaled)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-9, "drift {drift}");
    }

    #[test]
    fn incremental_first_update_matches_trial_covariance() {
        let x = vec![2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let t = Trial::new(2, 4, x.clone(), None, 0).unwrap();
        let mut state = AlignmentState::new();
        let aligned = incremental_update(&mut state, &t).unwrap();
        assert_eq!(state.count(), 1);
        let cov = state.mean_cov().unwrap();
        assert!(cov.max_abs_diff(&symlinalg::spatial_covariance(&t)) < 1e-15);
        for (a, b) in aligned.data().iter().zip(&x) {
            assert!((a - b / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn incremental_mean_update_arithmetic() {
        // state(n=1, 4I) + trial with cov I -> mean 2.5I
        let t1 = Trial::new(2, 4, vec![2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0], None, 0).unwrap();
        let t2 = Trial::new(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], None, 0).unwrap();
        let mut state = AlignmentState::new();
        incremental_update(&mut state, &t1).unwrap();
        incremental_update(&mut state, &t2).unwrap();
        let m = state.mean_cov().unwrap();
        assert!((m.get(0, 0) - 2.5).abs() < 1e-12);
        assert!((m.get(1, 1) - 2.5).abs() < 1e-12);
        assert!(m.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn streaming_matches_batch_prefixes() {
        let trials = random_trials(30, 5, 40, 2, 31);
        let mut state = AlignmentState::new();
        for k in 0..30 {
            incremental_update(&mut state, &trials[k]).unwrap();
            let batch = symlinalg::mean_covariance(&trials[..=k]).unwrap();
            let diff = state.mean_cov().unwrap().max_abs_diff(&batch);
            assert!(diff < 1e-10, "prefix {k}: {diff}");
        }
    }

    #[test]
    fn corpus_alignment_is_per_domain() {
        let mut domains = vec![
            DomainDataset {
                id: 0,
                trials: random_trials(12, 4, 32, 0, 100),
            },
            DomainDataset {
                id: 1,
                trials: random_trials(12, 4, 32, 1, 101),
            },
        ];
        let aligned = align_corpus(&domains).unwrap();
        for d in &aligned {
            let mean = symlinalg::mean_covariance(&d.trials).unwrap();
            assert!(mean.max_dist_from_identity() < 1e-6);
        }

        // permuting domain order leaves per-trial outputs unchanged
        domains.swap(0, 1);
        let aligned_swapped = align_corpus(&domains).unwrap();
        for (a, b) in aligned[0].trials.iter().zip(&aligned_swapped[1].trials) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mixed_channel_counts_rejected() {
        let mut trials = random_trials(3, 4, 32, 0, 5);
        trials.push(Trial::new(5, 32, vec![0.1; 5 * 32], None, 0).unwrap());
        assert!(align_domain(&trials).is_err());
    }

    #[test]
    fn domain_errors_carry_the_domain_id() {
        let domains = vec![DomainDataset {
            id: 7,
            trials: vec![],
        }];
        let err = align_corpus(&domains).unwrap_err().to_string();
        assert!(err.contains("domain 7"), "{err}");
    }
}
