//! Experiment orchestration: one JSON config drives data generation,
//! the training grid (BT / AT / ABAT x inner attack x epsilon), the
//! robustness evaluation grid, per-seed reports, the 3-seed mean table,
//! and the training-size / model-capacity sweeps.
//!
//! Every output file embeds the config hash and seeds; re-running with
//! identical inputs reproduces reports byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::align_corpus;
use crate::attacks::{compute_sigma, AttackConfig, AttackKind, EpsilonScale};
use crate::datagen::{self, DomainDataset, GenSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport, ReportRow};
use crate::models::{ArchSpec, Family};
use crate::rng;
use crate::training::{self, AtMode, TrainConfig};

/// Data source: generate synthetically or load a saved corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataConfig {
    Generate(GenSpec),
    Corpus(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    #[serde(default = "default_width")]
    pub width_mult: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_domains: Vec<u32>,
    pub test_domains: Vec<u32>,
}

/// One entry of the training grid before expansion over eps values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantConfig {
    pub method: AtMode,
    /// For BT this selects the row (false = "BT", true = "BT-EA");
    /// AT forces false and ABAT forces true.
    #[serde(default)]
    pub align: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<AttackKind>,
    #[serde(default)]
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_drop: f64,
    pub lr_drop_epoch: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainParams {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_initial: d.lr_initial,
            lr_drop: d.lr_drop,
            lr_drop_epoch: d.lr_drop_epoch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Attack kinds, rendered in this order after the No Attack column.
    pub kinds: Vec<AttackKind>,
    pub eps: Vec<f64>,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    /// Also run the online (incremental alignment) benign protocol.
    #[serde(default = "default_online")]
    pub online: bool,
}

fn default_pgd_steps() -> usize {
    20
}

fn default_online() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Training-set fractions for the train-size sweep.
    #[serde(default = "default_fractions")]
    pub train_fractions: Vec<f64>,
    /// Width multipliers for the capacity sweep.
    #[serde(default = "default_widths")]
    pub width_mults: Vec<f64>,
    /// ABAT budget used in sweeps.
    #[serde(default = "default_sweep_eps")]
    pub abat_eps: f64,
}

fn default_fractions() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}

fn default_widths() -> Vec<f64> {
    vec![0.125, 0.25, 0.5]
}

fn default_sweep_eps() -> f64 {
    0.01
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            train_fractions: default_fractions(),
            width_mults: default_widths(),
            abat_eps: default_sweep_eps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub split: SplitConfig,
    pub variants: Vec<VariantConfig>,
    #[serde(default)]
    pub train: TrainParams,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::Generate(GenSpec::default_desk()),
            arch: ArchConfig {
                family: Family::Eegnet,
                width_mult: 0.25,
                widths: None,
                seed: 0,
            },
            split: SplitConfig {
                train_domains: vec![0, 1],
                test_domains: vec![2],
            },
            variants: vec![
                VariantConfig {
                    method: AtMode::Bt,
                    align: Some(false),
                    inner: None,
                    eps: vec![],
                },
                VariantConfig {
                    method: AtMode::Bt,
                    align: Some(true),
                    inner: None,
                    eps: vec![],
                },
                VariantConfig {
                    method: AtMode::At,
                    align: None,
                    inner: Some(AttackKind::Pgd),
                    eps: vec![0.01],
                },
                VariantConfig {
                    method: AtMode::Abat,
                    align: None,
                    inner: Some(AttackKind::Fgsm),
                    eps: vec![0.03],
                },
                VariantConfig {
                    method: AtMode::Abat,
                    align: None,
                    inner: Some(AttackKind::Pgd),
                    eps: vec![0.01],
                },
            ],
            train: TrainParams::default(),
            eval: EvalConfig {
                kinds: vec![AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Ensemble],
                eps: vec![0.01, 0.03, 0.05],
                pgd_steps: 20,
                online: true,
            },
            seeds: vec![0, 1, 2],
            sweep: SweepConfig::default(),
        }
    }
}

/// A fully expanded training variant.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub method: AtMode,
    pub align: bool,
    pub inner: Option<AttackConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.split.train_domains.is_empty() || self.split.test_domains.is_empty() {
            return Err(Error::InvalidConfig(
                "train and test domain lists must be non-empty".into(),
            ));
        }
        if self
            .split
            .train_domains
            .iter()
            .any(|d| self.split.test_domains.contains(d))
        {
            return Err(Error::InvalidConfig(
                "train and test domains must be disjoint".into(),
            ));
        }
        if self.eval.eps.iter().any(|&e| e <= 0.0) {
            return Err(Error::InvalidConfig(
                "evaluation eps grid must be positive".into(),
            ));
        }
        for v in &self.variants {
            if v.method != AtMode::Bt {
                if v.inner.is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "{} variant needs an inner attack kind",
                        v.method
                    )));
                }
                if v.eps.is_empty() || v.eps.iter().any(|&e| e < 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "{} variant needs nonnegative eps values",
                        v.method
                    )));
                }
            }
        }
        self.expand_variants()?;
        Ok(())
    }

    /// Expand grid entries into concrete named variants.
    pub fn expand_variants(&self) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for v in &self.variants {
            match v.method {
                AtMode::Bt => {
                    let align = v.align.unwrap_or(false);
                    out.push(Variant {
                        name: if align { "BT-EA".into() } else { "BT".into() },
                        method: AtMode::Bt,
                        align,
                        inner: None,
                    });
                }
                method => {
                    let kind = v.inner.expect("validated");
                    let align = match method {
                        AtMode::At => false,
                        AtMode::Abat => true,
                        AtMode::Bt => unreachable!(),
                    };
                    if let Some(requested) = v.align {
                        if requested != align {
                            return Err(Error::InvalidConfig(format!(
                                "{method} implies align={align}"
                            )));
                        }
                    }
                    for &eps in &v.eps {
                        let inner = match kind {
                            AttackKind::Fgsm => AttackConfig::fgsm(eps),
                            AttackKind::Pgd => AttackConfig::pgd_train(eps),
                            other => {
                                return Err(Error::InvalidConfig(format!(
                                    "inner attack {other} is not supported for training"
                                )))
                            }
                        };
                        out.push(Variant {
                            name: format!("{method}-{kind} {eps:.2}"),
                            method,
                            align,
                            inner: Some(inner),
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Evaluation grid in paper column order.
    pub fn eval_grid(&self) -> Vec<AttackConfig> {
        let mut grid = Vec::new();
        for &kind in &self.eval.kinds {
            for &eps in &self.eval.eps {
                let mut cfg = match kind {
                    AttackKind::Fgsm => AttackConfig::fgsm(eps),
                    AttackKind::Pgd => AttackConfig::pgd_eval(eps),
                    AttackKind::Square => AttackConfig::square(eps),
                    AttackKind::Ensemble => AttackConfig::ensemble(eps),
                };
                cfg.steps = match kind {
                    AttackKind::Fgsm => 1,
                    _ => self.eval.pgd_steps,
                };
                if kind == AttackKind::Pgd || kind == AttackKind::Ensemble {
                    cfg.step_size_rel = eps / 10.0;
                }
                grid.push(cfg);
            }
        }
        grid
    }
}

/// FNV-1a hash of the canonical JSON encoding, as fixed-width hex.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    format!("{:016x}", rng::fnv1a(json.as_bytes()))
}

fn select_domains(corpus: &[DomainDataset], ids: &[u32]) -> Result<Vec<DomainDataset>> {
    ids.iter()
        .map(|id| {
            corpus
                .iter()
                .find(|d| d.id == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("domain {id} not in corpus")))
        })
        .collect()
}

/// Resolve the corpus: generate (and persist, when an output directory
/// is given) or load from disk.
pub fn resolve_corpus(
    data: &DataConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<DomainDataset>, String)> {
    match data {
        DataConfig::Generate(spec) => {
            let corpus = datagen::generate(spec)?;
            if let Some(dir) = out_dir {
                datagen::save_corpus(&dir.join("corpus"), &corpus, Some(spec), spec.seed)?;
            }
            Ok((corpus, format!("synthetic(seed={})", spec.seed)))
        }
        DataConfig::Corpus(path) => {
            let (corpus, manifest) = datagen::load_corpus(path)?;
            Ok((corpus, format!("corpus({}, seed={})", path.display(), manifest.seed)))
        }
    }
}

fn arch_for(cfg: &ExperimentConfig, corpus: &[DomainDataset], classes: usize) -> Result<ArchSpec> {
    let (c, t) = corpus
        .first()
        .and_then(|d| d.shape())
        .ok_or(Error::EmptyInput("corpus"))?;
    Ok(ArchSpec {
        family: cfg.arch.family,
        channels: c,
        timepoints: t,
        classes,
        width_mult: cfg.arch.width_mult,
        widths: cfg.arch.widths.clone(),
        seed: cfg.arch.seed,
    })
}

fn class_count(corpus: &[DomainDataset]) -> usize {
    corpus
        .iter()
        .flat_map(|d| d.trials.iter().filter_map(|t| t.label))
        .max()
        .map_or(0, |m| m as usize + 1)
}

fn train_config(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr_initial: cfg.train.lr_initial,
        lr_drop: cfg.train.lr_drop,
        lr_drop_epoch: cfg.train.lr_drop_epoch,
        at_mode: variant.method,
        inner_attack: variant.inner.clone(),
        align: variant.align,
        seed,
        pretrained_checkpoint: None,
    }
}

/// Sigma for budget conversion: population std of the training view as
/// the model sees it (aligned when the variant aligns).
fn sigma_for(train_data: &[DomainDataset], align: bool) -> Result<EpsilonScale> {
    let view = if align {
        align_corpus(train_data)?
    } else {
        train_data.to_vec()
    };
    let pooled: Vec<_> = view.into_iter().flat_map(|d| d.trials).collect();
    compute_sigma(&pooled)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect::<String>()
        .to_lowercase()
}

/// Everything one pipeline run produced.
pub struct PipelineOutputs {
    pub merged: EvalReport,
    pub per_seed: Vec<EvalReport>,
    pub written: Vec<PathBuf>,
}

/// Evaluate one trained model over the full grid, producing a report row.
fn eval_row(
    cfg: &ExperimentConfig,
    model: &crate::models::ModelGraph,
    variant: &Variant,
    test: &[DomainDataset],
    scale: &EpsilonScale,
    seed: u64,
) -> Result<ReportRow> {
    let grid = cfg.eval_grid();
    let eval_seed = rng::derive(seed, &[0xE7A1]);
    let cells = evaluation::robustness_test(model, test, &grid, scale, variant.align, eval_seed)?;
    let online_bca = if cfg.eval.online {
        Some(evaluation::online_test(model, test, variant.align)?.bca)
    } else {
        None
    };
    Ok(ReportRow {
        method: variant.name.clone(),
        cells,
        online_bca,
    })
}

/// Run the full pipeline: train every (variant x seed), evaluate, and
/// write checkpoints, logs, per-seed reports, and the mean report.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineOutputs> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let (corpus, dataset_desc) = resolve_corpus(&cfg.data, Some(out_dir))?;
    let classes = class_count(&corpus);
    let arch = arch_for(cfg, &corpus, classes)?;
    let train_data = select_domains(&corpus, &cfg.split.train_domains)?;
    let test_data = select_domains(&corpus, &cfg.split.test_domains)?;
    let variants = cfg.expand_variants()?;

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut rows = Vec::with_capacity(variants.len());
        for variant in &variants {
            let tc = train_config(cfg, variant, seed);
            let (model, log) = training::train(&train_data, &tc, &arch)?;

            let ckpt = out_dir
                .join("checkpoints")
                .join(format!("seed{seed}"))
                .join(format!("{}.ckpt", slug(&variant.name)));
            model.save(&ckpt)?;
            written.push(ckpt);

            let log_path = out_dir
                .join("logs")
                .join(format!("seed{seed}"))
                .join(format!("{}.jsonl", slug(&variant.name)));
            write_trainlog(&log_path, &hash, seed, &variant.name, &log)?;
            written.push(log_path);

            let scale = match log.sigma {
                Some(sigma) => EpsilonScale { sigma },
                None => sigma_for(&train_data, variant.align)?,
            };
            rows.push(eval_row(cfg, &model, variant, &test_data, &scale, seed)?);
        }
        let report = EvalReport {
            config_hash: hash.clone(),
            seeds: vec![seed],
            dataset: dataset_desc.clone(),
            arch: format!("{}(w={})", cfg.arch.family, cfg.arch.width_mult),
            rows,
        };
        let path = out_dir.join("reports").join(format!("seed{seed}.csv"));
        write_text(&path, &report.to_csv())?;
        written.push(path);
        per_seed.push(report);
    }

    let merged = EvalReport::merge_mean(&per_seed)?;
    let csv_path = out_dir.join("reports").join("mean.csv");
    write_text(&csv_path, &merged.to_csv())?;
    written.push(csv_path);
    let md_path = out_dir.join("reports").join("mean.md");
    write_text(&md_path, &merged.to_markdown())?;
    written.push(md_path);

    Ok(PipelineOutputs {
        merged,
        per_seed,
        written,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_trainlog(
    path: &Path,
    hash: &str,
    seed: u64,
    variant: &str,
    log: &training::TrainLog,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({
        "config_hash": hash,
        "seed": seed,
        "variant": variant,
        "sigma": log.sigma,
        "total_wall_ms": log.total_wall_ms,
    }))?);
    out.push('\n');
    for rec in &log.epochs {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    TrainSize,
    Width,
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-size" => Ok(SweepMode::TrainSize),
            "width" => Ok(SweepMode::Width),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep mode {other:?} (expected train-size or width)"
            ))),
        }
    }
}

/// Sweep training-set size or model capacity: for each x value, train
/// BT-EA and ABAT-PGD and evaluate the grid; emits one (x, method,
/// attack, eps, bca) series averaged over seeds.
pub fn run_sweep(cfg: &ExperimentConfig, mode: SweepMode, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    fs::create_dir_all(out_dir)?;

    let (corpus, dataset_desc) = resolve_corpus(&cfg.data, None)?;
    let classes = class_count(&corpus);
    let base_arch = arch_for(cfg, &corpus, classes)?;
    let full_train = select_domains(&corpus, &cfg.split.train_domains)?;
    let test_data = select_domains(&corpus, &cfg.split.test_domains)?;

    let methods: Vec<Variant> = vec![
        Variant {
            name: "BT-EA".into(),
            method: AtMode::Bt,
            align: true,
            inner: None,
        },
        Variant {
            name: format!("ABAT-PGD {:.2}", cfg.sweep.abat_eps),
            method: AtMode::Abat,
            align: true,
            inner: Some(AttackConfig::pgd_train(cfg.sweep.abat_eps)),
        },
    ];

    let values: Vec<f64> = match mode {
        SweepMode::TrainSize => cfg.sweep.train_fractions.clone(),
        SweepMode::Width => cfg.sweep.width_mults.clone(),
    };
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidConfig("sweep values must be positive".into()));
    }

    let mut csv = String::new();
    csv.push_str("# abat sweep v1\n");
    csv.push_str(&format!("# config_hash={hash}\n"));
    csv.push_str(&format!("# mode={mode:?}\n"));
    csv.push_str(&format!("# dataset={dataset_desc}\n"));
    csv.push_str("x,method,attack,eps,bca\n");

    for &x in &values {
        let (train_data, arch) = match mode {
            SweepMode::TrainSize => {
                let truncated: Vec<DomainDataset> = full_train
                    .iter()
                    .map(|d| {
                        let keep = ((d.trials.len() as f64 * x).ceil() as usize)
                            .clamp(1, d.trials.len());
                        DomainDataset {
                            id: d.id,
                            trials: d.trials[..keep].to_vec(),
                        }
                    })
                    .collect();
                (truncated, base_arch.clone())
            }
            SweepMode::Width => {
                let mut arch = base_arch.clone();
                arch.width_mult = x;
                arch.widths = None;
                (full_train.to_vec(), arch)
            }
        };

        for variant in &methods {
            let mut cell_sums: Vec<(String, f64, f64)> = Vec::new();
            for &seed in &cfg.seeds {
                let tc = train_config(cfg, variant, seed);
                let (model, log) = training::train(&train_data, &tc, &arch)?;
                let scale = match log.sigma {
                    Some(sigma) => EpsilonScale { sigma },
                    None => sigma_for(&train_data, variant.align)?,
                };
                let row = eval_row(cfg, &model, variant, &test_data, &scale, seed)?;
                if cell_sums.is_empty() {
                    cell_sums = row
                        .cells
                        .iter()
                        .map(|c| (c.attack.clone(), c.eps_rel, 0.0))
                        .collect();
                }
                for (acc, cell) in cell_sums.iter_mut().zip(&row.cells) {
                    acc.2 += cell.bca;
                }
            }
            let n = cfg.seeds.len() as f64;
            for (attack, eps, sum) in &cell_sums {
                csv.push_str(&format!(
                    "{x},{},{attack},{eps:.4},{:.6}\n",
                    variant.name,
                    sum / n
                ));
            }
        }
    }

    let path = out_dir.join(match mode {
        SweepMode::TrainSize => "sweep_train_size.csv",
        SweepMode::Width => "sweep_width.csv",
    });
    write_text(&path, &csv)?;
    Ok(path)
}
