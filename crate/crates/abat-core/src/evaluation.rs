//! Balanced classification accuracy and the three test protocols:
//! offline (whole-session alignment), online (incremental alignment,
//! strictly causal), and offline robustness (attacks on aligned trials).
//!
//! Report tables follow the column order No Attack, FGSM x eps grid,
//! PGD x eps grid, Ensemble x eps grid, Avg; "No Attack" is a
//! distinguished attack kind with eps = 0 so tables stay uniform.

use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignmentState, Trial};
use crate::attacks::{self, AttackConfig};
use crate::datagen::DomainDataset;
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::rng;

/// Per-class accuracies; classes are 0..=max(label).
pub fn per_class_accuracy(predictions: &[u32], labels: &[u32]) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "per_class_accuracy",
            expected: format!("{} predictions", labels.len()),
            actual: format!("{}", predictions.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("per_class_accuracy"));
    }
    let k = *labels.iter().max().unwrap() as usize + 1;
    let mut hit = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        count[y as usize] += 1;
        if p == y {
            hit[y as usize] += 1;
        }
    }
    if let Some(missing) = count.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing as u32));
    }
    Ok(hit
        .iter()
        .zip(&count)
        .map(|(&h, &c)| h as f64 / c as f64)
        .collect())
}

/// Balanced classification accuracy: mean of the per-class accuracies.
pub fn bca(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    let per_class = per_class_accuracy(predictions, labels)?;
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// One evaluation outcome with per-class detail retained for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub bca: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<u32>,
}

fn labeled(trials: &[Trial]) -> Result<Vec<u32>> {
    trials
        .iter()
        .map(|t| {
            t.label
                .ok_or_else(|| Error::InvalidConfig("evaluation requires labeled trials".into()))
        })
        .collect()
}

fn cell_from(model: &ModelGraph, trials: &[Trial]) -> Result<EvalCell> {
    let labels = labeled(trials)?;
    let predictions = model.predict_trials(trials)?;
    let per_class = per_class_accuracy(&predictions, &labels)?;
    Ok(EvalCell {
        bca: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class,
        predictions,
    })
}

/// Align each target session as a whole batch (when `use_ea`), then
/// classify everything.
pub fn offline_test(
    model: &ModelGraph,
    sessions: &[DomainDataset],
    use_ea: bool,
) -> Result<EvalCell> {
    if sessions.is_empty() || sessions.iter().any(|s| s.trials.is_empty()) {
        return Err(Error::EmptyInput("offline_test"));
    }
    let pool = offline_view(sessions, use_ea)?;
    cell_from(model, &pool)
}

/// The offline-aligned pool of trials, session order preserved.
pub fn offline_view(sessions: &[DomainDataset], use_ea: bool) -> Result<Vec<Trial>> {
    let mut pool = Vec::new();
    for s in sessions {
        if use_ea {
            pool.extend(alignment::align_domain(&s.trials).map_err(|e| e.in_domain(s.id))?);
        } else {
            pool.extend(s.trials.iter().cloned());
        }
    }
    Ok(pool)
}

/// Predictions under the online protocol: trials arrive one at a time,
/// each aligned with the state accumulated from trials 1..=n of its own
/// session (fresh state per session), then classified immediately. The
/// prediction for trial n depends only on trials 1..=n.
pub fn online_predictions(
    model: &ModelGraph,
    sessions: &[DomainDataset],
    use_ea: bool,
) -> Result<Vec<u32>> {
    if sessions.is_empty() || sessions.iter().any(|s| s.trials.is_empty()) {
        return Err(Error::EmptyInput("online_test"));
    }
    let mut predictions = Vec::new();
    for s in sessions {
        let mut state = AlignmentState::new();
        for trial in &s.trials {
            let view = if use_ea {
                alignment::incremental_update(&mut state, trial).map_err(|e| e.in_domain(s.id))?
            } else {
                trial.clone()
            };
            predictions.extend(model.predict_trials(std::slice::from_ref(&view))?);
        }
    }
    Ok(predictions)
}

/// Online protocol scored with BCA.
pub fn online_test(
    model: &ModelGraph,
    sessions: &[DomainDataset],
    use_ea: bool,
) -> Result<EvalCell> {
    let predictions = online_predictions(model, sessions, use_ea)?;
    let labels: Vec<u32> = sessions
        .iter()
        .flat_map(|s| s.trials.iter().map(|t| t.label))
        .map(|l| l.ok_or_else(|| Error::InvalidConfig("evaluation requires labeled trials".into())))
        .collect::<Result<_>>()?;
    let per_class = per_class_accuracy(&predictions, &labels)?;
    Ok(EvalCell {
        bca: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class,
        predictions,
    })
}

/// One column of a robustness table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    /// "No Attack", "FGSM", "PGD", "Square", or "Ensemble".
    pub attack: String,
    pub eps_rel: f64,
    pub bca: f64,
    pub per_class: Vec<f64>,
}

/// Offline robustness test: attacks are generated per trial on the
/// aligned (or raw, when `use_ea` is false) target trials, with ball
/// containment asserted for every output. The benign column is included
/// as "No Attack".
pub fn robustness_test(
    model: &ModelGraph,
    sessions: &[DomainDataset],
    attacks_grid: &[AttackConfig],
    scale: &attacks::EpsilonScale,
    use_ea: bool,
    seed: u64,
) -> Result<Vec<ReportCell>> {
    let pool = offline_view(sessions, use_ea)?;
    if pool.is_empty() {
        return Err(Error::EmptyInput("robustness_test"));
    }
    let labels = labeled(&pool)?;

    let mut cells = Vec::with_capacity(attacks_grid.len() + 1);
    let benign = cell_from(model, &pool)?;
    cells.push(ReportCell {
        attack: "No Attack".into(),
        eps_rel: 0.0,
        bca: benign.bca,
        per_class: benign.per_class,
    });

    for cfg in attacks_grid {
        cfg.validate()?;
        let (eps_abs, op) = cfg.resolve(scale);
        let results = crate::par::map_indexed(pool.len(), |i| {
            let trial_seed = rng::derive(seed, &[cfg.seed, i as u64]);
            attacks::run_attack(model, &pool[i], labels[i], eps_abs, &op, trial_seed)
        });
        let mut adv = Vec::with_capacity(pool.len());
        for (i, out) in results.into_iter().enumerate() {
            let out = out?;
            let dist = attacks::linf_distance(&out, &pool[i]);
            if dist > eps_abs + 1e-12 {
                return Err(Error::Invariant(format!(
                    "{} eps={} trial {i}: perturbation {dist} exceeds budget {eps_abs}",
                    cfg.kind, cfg.epsilon_rel
                )));
            }
            adv.push(out);
        }
        let predictions = model.predict_trials(&adv)?;
        let per_class = per_class_accuracy(&predictions, &labels)?;
        cells.push(ReportCell {
            attack: cfg.kind.to_string(),
            eps_rel: cfg.epsilon_rel,
            bca: per_class.iter().sum::<f64>() / per_class.len() as f64,
            per_class,
        });
    }
    Ok(cells)
}

/// A full table: one row per training method, uniform columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub arch: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub cells: Vec<ReportCell>,
    /// Benign BCA under the online (incremental-alignment) protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_bca: Option<f64>,
}

impl EvalReport {
    /// Row mean over every attack cell, "No Attack" included.
    pub fn row_avg(row: &ReportRow) -> f64 {
        row.cells.iter().map(|c| c.bca).sum::<f64>() / row.cells.len() as f64
    }

    /// Cell lookup by attack name and budget.
    pub fn cell<'a>(&'a self, method: &str, attack: &str, eps_rel: f64) -> Option<&'a ReportCell> {
        self.rows
            .iter()
            .find(|r| r.method == method)?
            .cells
            .iter()
            .find(|c| c.attack == attack && (c.eps_rel - eps_rel).abs() < 1e-12)
    }

    /// Arithmetic mean over per-seed reports with identical layout.
    pub fn merge_mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or(Error::EmptyInput("merge_mean"))?;
        let n = reports.len() as f64;
        let mut merged = first.clone();
        merged.seeds = reports.iter().flat_map(|r| r.seeds.clone()).collect();
        for (ri, row) in merged.rows.iter_mut().enumerate() {
            for r in reports {
                let other = r.rows.get(ri).ok_or_else(|| {
                    Error::InvalidConfig("reports have different row counts".into())
                })?;
                if other.method != row.method || other.cells.len() != row.cells.len() {
                    return Err(Error::InvalidConfig(format!(
                        "report layouts differ at row {ri}"
                    )));
                }
            }
            for (ci, cell) in row.cells.iter_mut().enumerate() {
                cell.bca = reports
                    .iter()
                    .map(|r| r.rows[ri].cells[ci].bca)
                    .sum::<f64>()
                    / n;
                let classes = cell.per_class.len();
                cell.per_class = (0..classes)
                    .map(|k| {
                        reports
                            .iter()
                            .map(|r| r.rows[ri].cells[ci].per_class[k])
                            .sum::<f64>()
                            / n
                    })
                    .collect();
            }
            row.online_bca = if reports.iter().all(|r| r.rows[ri].online_bca.is_some()) {
                Some(
                    reports
                        .iter()
                        .map(|r| r.rows[ri].online_bca.unwrap())
                        .sum::<f64>()
                        / n,
                )
            } else {
                None
            };
        }
        Ok(merged)
    }

    /// One CSV row per cell; byte-stable for identical inputs.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# abat eval report v1\n");
        out.push_str(&format!("# config_hash={}\n", self.config_hash));
        out.push_str(&format!(
            "# seeds={}\n",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";")
        ));
        out.push_str(&format!("# dataset={}\n", self.dataset));
        out.push_str(&format!("# arch={}\n", self.arch));
        out.push_str("method,attack,eps,bca,per_class,online_bca\n");
        for row in &self.rows {
            for cell in &row.cells {
                let per_class = cell
                    .per_class
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join("|");
                let online = row
                    .online_bca
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{:.4},{:.6},{per_class},{online}\n",
                    row.method, cell.attack, cell.eps_rel, cell.bca
                ));
            }
        }
        out
    }

    /// Markdown table in the paper's column order, plus the Avg column.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Dataset: {} | Arch: {} | Seeds: {:?} | Config: {}\n\n",
            self.dataset, self.arch, self.seeds, self.config_hash
        ));
        if let Some(first) = self.rows.first() {
            out.push_str("| Training |");
            for cell in &first.cells {
                if cell.attack == "No Attack" {
                    out.push_str(" No Attack |");
                } else {
                    out.push_str(&format!(" {} {:.2} |", cell.attack, cell.eps_rel));
                }
            }
            out.push_str(" Avg |\n|---|");
            for _ in 0..first.cells.len() + 1 {
                out.push_str("---|");
            }
            out.push('\n');
            for row in &self.rows {
                out.push_str(&format!("| {} |", row.method));
                for cell in &row.cells {
                    out.push_str(&format!(" {:.2} |", cell.bca * 100.0));
                }
                out.push_str(&format!(" {:.2} |\n", Self::row_avg(row) * 100.0));
            }
        }
        if self.rows.iter().any(|r| r.online_bca.is_some()) {
            out.push_str("\nOnline (incremental alignment) benign BCA:\n\n");
            out.push_str("| Training | Online BCA |\n|---|---|\n");
            for row in &self.rows {
                if let Some(v) = row.online_bca {
                    out.push_str(&format!("| {} | {:.2} |\n", row.method, v * 100.0));
                }
            }
        }
        out
    }
}
