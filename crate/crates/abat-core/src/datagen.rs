//! Synthetic multi-domain epoch generator and the on-disk corpus format.
//!
//! Trials are class-conditioned band-limited oscillations on latent
//! channels, mixed through a per-domain channel-mixing matrix (a shared
//! orthonormal base plus a seeded perturbation and gain whose size is the
//! domain-shift strength), plus white sensor noise. Distinct phases and
//! frequencies per class keep class-conditional means separated, so the
//! task is learnable by both a nearest-centroid baseline and the CNN
//! families; the per-domain mixing produces the covariance shift that
//! alignment is supposed to remove.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Trial;
use crate::error::{Error, Result};
use crate::rng;

/// Ordered trials sharing one recording domain (session/block/subject).
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub id: u32,
    pub trials: Vec<Trial>,
}

impl DomainDataset {
    /// Channel/timepoint shape shared by all trials, if any.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.trials.first().map(|t| (t.channels(), t.samples()))
    }
}

/// Generator specification.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenSpec {
    pub n_domains: usize,
    pub trials_per_domain: usize,
    pub channels: usize,
    pub timepoints: usize,
    pub classes: usize,
    /// Per-class probability mass; empty means balanced. Must sum to 1.
    #[serde(default)]
    pub imbalance: Vec<f64>,
    /// Scale of the per-domain mixing-matrix perturbation and gain spread.
    pub domain_shift: f64,
    /// Standard deviation of latent white noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl GenSpec {
    /// Desk-scale default: trains on one CPU in minutes.
    pub fn default_desk() -> Self {
        GenSpec {
            n_domains: 3,
            trials_per_domain: 120,
            channels: 8,
            timepoints: 128,
            classes: 4,
            imbalance: vec![],
            domain_shift: 0.3,
            noise_level: 0.5,
            seed: 0,
        }
    }

    /// Two-class preset with 5:1 class imbalance, ERP-flavored.
    pub fn erp_like() -> Self {
        GenSpec {
            classes: 2,
            imbalance: vec![5.0 / 6.0, 1.0 / 6.0],
            ..GenSpec::default_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.n_domains == 0 || self.trials_per_domain == 0 {
            return Err(Error::InvalidConfig("need at least one domain and one trial".into()));
        }
        if self.channels == 0 || self.timepoints == 0 {
            return Err(Error::InvalidConfig("channels/timepoints must be positive".into()));
        }
        if !self.imbalance.is_empty() {
            if self.imbalance.len() != self.classes {
                return Err(Error::InvalidConfig(format!(
                    "imbalance has {} entries for {} classes",
                    self.imbalance.len(),
                    self.classes
                )));
            }
            let sum: f64 = self.imbalance.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || self.imbalance.iter().any(|&p| p <= 0.0) {
                return Err(Error::InvalidConfig(
                    "imbalance ratios must be positive and sum to 1".into(),
                ));
            }
        }
        if self.trials_per_domain < self.classes {
            return Err(Error::InvalidConfig(
                "need at least one trial per class per domain".into(),
            ));
        }
        if self.domain_shift < 0.0 || self.noise_level < 0.0 {
            return Err(Error::InvalidConfig(
                "domain_shift and noise_level must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; second value discarded to keep stream handling simple.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthonormalize the rows of a random Gaussian matrix (modified
/// Gram-Schmidt); deterministic from the RNG stream.
fn random_orthonormal(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..c * c).map(|_| standard_normal(rng)).collect();
    for i in 0..c {
        for j in 0..i {
            let mut dot = 0.0;
            for k in 0..c {
                dot += m[i * c + k] * m[j * c + k];
            }
            for k in 0..c {
                m[i * c + k] -= dot * m[j * c + k];
            }
        }
        let norm = (0..c).map(|k| m[i * c + k] * m[i * c + k]).sum::<f64>().sqrt();
        // a fresh Gaussian row is never exactly dependent; guard anyway
        let inv = if norm > 1e-12 { 1.0 / norm } else { 1.0 };
        for k in 0..c {
            m[i * c + k] *= inv;
        }
    }
    m
}

/// Per-class label counts for one domain (largest-remainder rounding).
fn class_counts(spec: &GenSpec) -> Vec<usize> {
    let k = spec.classes;
    let n = spec.trials_per_domain;
    let ratios: Vec<f64> = if spec.imbalance.is_empty() {
        vec![1.0 / k as f64; k]
    } else {
        spec.imbalance.clone()
    };
    let mut counts: Vec<usize> = ratios.iter().map(|r| (r * n as f64).floor() as usize).collect();
    let mut remainders: Vec<(usize, f64)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut missing = n - counts.iter().sum::<usize>();
    for (i, _) in remainders {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    // every class shows up at least once so BCA stays defined
    for i in 0..k {
        while counts[i] == 0 {
            let donor = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(j, _)| j)
                .unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

struct ClassTemplate {
    /// (latent channel, cycles per window, phase) per oscillator.
    oscillators: [(usize, f64, f64); 2],
}

fn class_templates(spec: &GenSpec) -> Vec<ClassTemplate> {
    let c = spec.channels;
    let k = spec.classes as f64;
    (0..spec.classes)
        .map(|ki| {
            let kf = ki as f64;
            ClassTemplate {
                oscillators: [
                    (ki % c, 5.0 + 24.0 * kf / k, 0.9 * kf),
                    ((ki + c / 2) % c, 9.0 + 24.0 * kf / k, 0.4 + 0.7 * kf),
                ],
            }
        })
        .collect()
}

/// Generate a multi-domain synthetic corpus; bit-identical per seed.
pub fn generate(spec: &GenSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let (c, t) = (spec.channels, spec.timepoints);
    let templates = class_templates(spec);

    let mut base_rng = rng::stream(spec.seed, &[0x6261_7365]);
    let a_base = random_orthonormal(c, &mut base_rng);

    let counts = class_counts(spec);
    let mut domains = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let mut mix_rng = rng::stream(spec.seed, &[0x6d69_78, d as u64]);
        // per-channel sensor gains (impedance-style variability) plus a
        // smaller dense perturbation of the mixing itself; whitening
        // removes the gains exactly, feature-map normalization cannot
        let gains: Vec<f64> = (0..c)
            .map(|_| (spec.domain_shift * (mix_rng.gen::<f64>() * 2.0 - 1.0)).exp())
            .collect();
        let mut a_d = a_base.clone();
        if spec.domain_shift > 0.0 {
            let scale = 0.5 * spec.domain_shift / (c as f64).sqrt();
            for v in a_d.iter_mut() {
                *v += scale * standard_normal(&mut mix_rng);
            }
        }
        for (row, gain) in gains.iter().enumerate() {
            for v in a_d[row * c..(row + 1) * c].iter_mut() {
                *v *= gain;
            }
        }

        // label sequence: counts expanded then deterministically shuffled
        let mut labels: Vec<u32> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat(k as u32).take(n))
            .collect();
        let mut label_rng = rng::stream(spec.seed, &[0x6c61_62, d as u64]);
        for i in (1..labels.len()).rev() {
            let j = label_rng.gen_range(0..=i);
            labels.swap(i, j);
        }

        let mut trials = Vec::with_capacity(spec.trials_per_domain);
        for (trial_idx, &label) in labels.iter().enumerate() {
            let mut trial_rng = rng::stream(spec.seed, &[0x7472_69, d as u64, trial_idx as u64]);
            // latent sources: white noise plus the class's oscillators
            let mut latent = vec![0.0; c * t];
            for v in latent.iter_mut() {
                *v = spec.noise_level * standard_normal(&mut trial_rng);
            }
            let template = &templates[label as usize];
            for &(ch, freq, phase) in &template.oscillators {
                let amp = 0.85 + 0.3 * trial_rng.gen::<f64>();
                let jitter = 0.3 * (trial_rng.gen::<f64>() * 2.0 - 1.0);
                for ti in 0..t {
                    let pos = ti as f64 / t as f64;
                    let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * pos).cos());
                    latent[ch * t + ti] += amp
                        * hann
                        * (2.0 * std::f64::consts::PI * freq * pos + phase + jitter).sin();
                }
            }
            // sensor space: X = A_d * S
            let mut data = vec![0.0; c * t];
            for i in 0..c {
                for k in 0..c {
                    let a = a_d[i * c + k];
                    if a == 0.0 {
                        continue;
                    }
                    let srow = &latent[k * t..(k + 1) * t];
                    let drow = &mut data[i * t..(i + 1) * t];
                    for (dv, sv) in drow.iter_mut().zip(srow) {
                        *dv += a * sv;
                    }
                }
            }
            trials.push(Trial::new(c, t, data, Some(label), d as u32)?);
        }
        domains.push(DomainDataset {
            id: d as u32,
            trials,
        });
    }
    Ok(domains)
}

// ---------------------------------------------------------------------
// On-disk corpus format: manifest JSON + one binary blob per domain.
// Blob layout (little-endian): magic "ABATEPO", version u32, n_trials
// u32, channels u32, timepoints u32, then all trials as f32 row-major,
// then one i32 label per trial (-1 for unlabeled).
// ---------------------------------------------------------------------

const CORPUS_MAGIC: &[u8; 7] = b"ABATEPO";
const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEntry {
    pub id: u32,
    pub file: String,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub channels: usize,
    pub timepoints: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_spec: Option<GenSpec>,
    pub domains: Vec<DomainEntry>,
}

fn encode_domain(d: &DomainDataset, channels: usize, timepoints: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(19 + d.trials.len() * (channels * timepoints * 4 + 4));
    buf.extend_from_slice(CORPUS_MAGIC);
    buf.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.trials.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    buf.extend_from_slice(&(timepoints as u32).to_le_bytes());
    for t in &d.trials {
        if t.channels() != channels || t.samples() != timepoints {
            return Err(Error::ShapeMismatch {
                op: "save_corpus",
                expected: format!("{channels}x{timepoints}"),
                actual: format!("{}x{}", t.channels(), t.samples()),
            });
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for t in &d.trials {
        let label: i32 = t.label.map_or(-1, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
    }
    Ok(buf)
}

/// Write a corpus directory: `manifest.json` plus one blob per domain.
pub fn save_corpus(
    dir: &Path,
    domains: &[DomainDataset],
    gen_spec: Option<&GenSpec>,
    seed: u64,
) -> Result<PathBuf> {
    let first = domains.first().ok_or(Error::EmptyInput("save_corpus"))?;
    let (channels, timepoints) = first
        .shape()
        .ok_or(Error::EmptyInput("save_corpus: empty domain"))?;
    let n_classes = domains
        .iter()
        .flat_map(|d| d.trials.iter().filter_map(|t| t.label))
        .max()
        .map_or(0, |m| m as usize + 1);
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for d in domains {
        let file = format!("domain_{:03}.bin", d.id);
        let bytes = encode_domain(d, channels, timepoints)?;
        fs::write(dir.join(&file), bytes)?;
        entries.push(DomainEntry {
            id: d.id,
            file,
            n_trials: d.trials.len(),
        });
    }
    let manifest = CorpusManifest {
        format: "abat-corpus".into(),
        version: CORPUS_VERSION,
        channels,
        timepoints,
        classes: (0..n_classes).map(|k| format!("class_{k}")).collect(),
        seed,
        gen_spec: gen_spec.cloned(),
        domains: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

fn decode_domain(bytes: &[u8], entry: &DomainEntry, manifest: &CorpusManifest) -> Result<DomainDataset> {
    let mut r = bytes;
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated header", entry.file)))?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            entry.file,
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CORPUS_MAGIC)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut &[u8], what: &str| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format(format!("{}: truncated {what}", entry.file)))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r, "version")?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            entry.file
        )));
    }
    let n_trials = read_u32(&mut r, "trial count")? as usize;
    let channels = read_u32(&mut r, "channel count")? as usize;
    let timepoints = read_u32(&mut r, "timepoint count")? as usize;
    if n_trials != entry.n_trials {
        return Err(Error::Format(format!(
            "{}: header says {n_trials} trials, manifest says {}",
            entry.file, entry.n_trials
        )));
    }
    if channels != manifest.channels || timepoints != manifest.timepoints {
        return Err(Error::Format(format!(
            "{}: blob shape {channels}x{timepoints} != manifest {}x{}",
            entry.file, manifest.channels, manifest.timepoints
        )));
    }
    let expect = n_trials * (channels * timepoints * 4 + 4);
    if r.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, expected {expect}",
            entry.file,
            r.len()
        )));
    }
    let per_trial = channels * timepoints;
    let mut trials_data = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let mut data = Vec::with_capacity(per_trial);
        for _ in 0..per_trial {
            let mut f32buf = [0u8; 4];
            r.read_exact(&mut f32buf).expect("length pre-checked");
            let v = f32::from_le_bytes(f32buf);
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "{}: non-finite sample value",
                    entry.file
                )));
            }
            data.push(v as f64);
        }
        trials_data.push(data);
    }
    let mut trials = Vec::with_capacity(n_trials);
    for data in trials_data {
        let mut i32buf = [0u8; 4];
        r.read_exact(&mut i32buf).expect("length pre-checked");
        let raw = i32::from_le_bytes(i32buf);
        let label = if raw < 0 { None } else { Some(raw as u32) };
        trials.push(Trial::new(channels, timepoints, data, label, entry.id)?);
    }
    Ok(DomainDataset {
        id: entry.id,
        trials,
    })
}

/// Load a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(Vec<DomainDataset>, CorpusManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != "abat-corpus" {
        return Err(Error::Format(format!(
            "manifest format {:?} is not abat-corpus",
            manifest.format
        )));
    }
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Format(format!(
            "unsupported corpus version {}",
            manifest.version
        )));
    }
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        let bytes = fs::read(dir.join(&entry.file))?;
        domains.push(decode_domain(&bytes, entry, &manifest)?);
    }
    Ok((domains, manifest))
}
