//! Missingness sweeps and report plumbing: the clipped coefficient of
//! determination, a config-driven grid runner, and emission of the
//! result files.
//!
//! A sweep walks (mechanism, fraction, seed) cells. Each cell masks a
//! pristine copy of the dataset, splits off the final training window,
//! fits every configured model on the training snapshots, and scores
//! predictions on the held-out step. All models inside one cell see
//! the same mask, so curves compare model effects rather than mask
//! luck. The whole run is a pure function of the config: rerunning it
//! writes byte-identical report and curve files. Wall-clock timings
//! are real measurements and therefore live in their own file,
//! outside the determinism contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, BaselineSpec};
use crate::data::{
    induce_missingness, load_dataset, temporal_split, DataError, Mechanism, MissingnessSpec,
    Snapshot, TemporalDataset,
};
use crate::derive_seed;
use crate::dfl::{self, Architecture, DflError, DflOptions};
use crate::nnet::TrainSettings;
use crate::optim::AscentOptions;
use crate::synth::{generate_network, GeneratorConfig, SynthError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Dfl(#[from] DflError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("targets are constant; the metric is undefined")]
    ConstantTargets,
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("bad sweep config: {reason}")]
    BadConfig { reason: String },
    #[error("bad report file: {reason}")]
    BadReport { reason: String },
}

/// Coefficient of determination `1 - SS_res / SS_tot`, clamped to
/// `[0, 1]` so a predictor worse than the mean scores zero instead of
/// going negative.
pub fn r_squared(y: &DVector<f64>, mu: &DVector<f64>) -> Result<f64, HarnessError> {
    if mu.len() != y.len() {
        return Err(HarnessError::Shape {
            what: "prediction length",
            expected: y.len(),
            got: mu.len(),
        });
    }
    if y.len() < 2 {
        return Err(HarnessError::Shape { what: "targets", expected: 2, got: y.len() });
    }
    let mean = y.mean();
    let total: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if total <= 0.0 {
        return Err(HarnessError::ConstantTargets);
    }
    let resid: f64 = y.iter().zip(mu.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((1.0 - resid / total).clamp(0.0, 1.0))
}

/// Where the sweep gets its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Long-form CSV on disk.
    Path(PathBuf),
    /// Synthesize on the fly.
    Generate(GeneratorConfig),
}

/// Joint-model budgets exposed through the config file. The sweep
/// defaults are deliberately tighter than the library defaults so a
/// full grid finishes at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DflSettings {
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub seed: u64,
    /// Ascent iteration cap for the joint fit.
    #[serde(default = "default_dfl_iters")]
    pub max_iters: usize,
    /// Epoch cap for each pretraining autoencoder.
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
}

fn default_dfl_iters() -> usize {
    200
}

fn default_pretrain_epochs() -> usize {
    500
}

impl Default for DflSettings {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            seed: 0,
            max_iters: default_dfl_iters(),
            pretrain_epochs: default_pretrain_epochs(),
        }
    }
}

impl DflSettings {
    /// Options for one sweep cell; the cell seed is folded in so every
    /// seed column of the grid is an independent stochastic fit.
    pub fn to_options(&self, cell_seed: u64) -> DflOptions {
        DflOptions {
            ascent: AscentOptions { max_iters: self.max_iters, ..AscentOptions::default() },
            pretrain: TrainSettings { epochs: self.pretrain_epochs, ..TrainSettings::default() },
            seed: derive_seed(self.seed, cell_seed),
        }
    }
}

/// One model column of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelChoice {
    Baseline(BaselineSpec),
    Dfl(DflSettings),
}

impl ModelChoice {
    pub fn name(&self) -> String {
        match self {
            ModelChoice::Baseline(spec) => spec.kind.name().to_string(),
            ModelChoice::Dfl(_) => "DFL".to_string(),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        match self {
            ModelChoice::Baseline(spec) => Ok(spec.validate()?),
            ModelChoice::Dfl(settings) => {
                settings.arch.validate()?;
                if settings.max_iters == 0 {
                    return Err(HarnessError::BadConfig {
                        reason: "dfl max_iters must be at least 1".into(),
                    });
                }
                Ok(())
            }
        }
    }
}

fn default_mechanisms() -> Vec<Mechanism> {
    vec![Mechanism::AtRandom, Mechanism::LowestResponse, Mechanism::HighestResponse]
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.05, 0.10, 0.20, 0.40, 0.60, 0.80]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Full description of a sweep; serializable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dataset: DatasetSource,
    pub models: Vec<ModelChoice>,
    #[serde(default = "default_mechanisms")]
    pub mechanisms: Vec<Mechanism>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Temporal split step; the final snapshot when absent.
    #[serde(default)]
    pub split_step: Option<usize>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |reason: &str| {
            Err(HarnessError::BadConfig { reason: reason.to_string() })
        };
        if self.models.is_empty() {
            return bad("need at least one model");
        }
        if self.seeds.is_empty() {
            return bad("need at least one seed");
        }
        if self.mechanisms.is_empty() {
            return bad("need at least one mechanism");
        }
        if self.fractions.is_empty() {
            return bad("need at least one fraction");
        }
        for &f in &self.fractions {
            if !f.is_finite() || !(0.0..=0.8).contains(&f) {
                return Err(HarnessError::BadConfig {
                    reason: format!("fraction {f} outside [0, 0.8]"),
                });
            }
        }
        if let DatasetSource::Generate(cfg) = &self.dataset {
            cfg.validate()?;
        }
        for model in &self.models {
            model.validate()?;
        }
        Ok(())
    }
}

/// How one grid cell ended.
#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok(f64),
    Failed(String),
}

/// One (model, mechanism, fraction, seed) result.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub seed: u64,
    pub outcome: CellOutcome,
}

/// Wall-clock companion to a row; never part of the deterministic
/// outputs.
#[derive(Debug, Clone)]
pub struct TimingRow {
    pub model: String,
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub seed: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub timings: Vec<TimingRow>,
}

/// Per (model, mechanism, fraction) summary over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub model: String,
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median_r2: Option<f64>,
    pub iqr: Option<f64>,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tukey hinges: the halves exclude the middle element when the count
/// is odd.
fn quartiles(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len();
    let med = median_sorted(v);
    if n == 1 {
        return (v[0], med, v[0]);
    }
    let half = n / 2;
    (median_sorted(&v[..half]), med, median_sorted(&v[n - half..]))
}

impl EvalReport {
    pub fn failed_count(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r.outcome, CellOutcome::Failed(_)))
            .count()
    }

    /// Groups rows in first-appearance order and reduces each group's
    /// successful scores to a median and interquartile range.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(String, Mechanism, f64)> = Vec::new();
        let mut oks: Vec<Vec<f64>> = Vec::new();
        let mut fails: Vec<usize> = Vec::new();
        for row in &self.rows {
            let idx = match keys
                .iter()
                .position(|k| k.0 == row.model && k.1 == row.mechanism && k.2 == row.fraction)
            {
                Some(i) => i,
                None => {
                    keys.push((row.model.clone(), row.mechanism, row.fraction));
                    oks.push(Vec::new());
                    fails.push(0);
                    keys.len() - 1
                }
            };
            match &row.outcome {
                CellOutcome::Ok(r2) => oks[idx].push(*r2),
                CellOutcome::Failed(_) => fails[idx] += 1,
            }
        }
        keys.into_iter()
            .zip(oks)
            .zip(fails)
            .map(|(((model, mechanism, fraction), mut vals), n_failed)| {
                vals.sort_by(f64::total_cmp);
                let (median_r2, iqr) = if vals.is_empty() {
                    (None, None)
                } else {
                    let (q1, med, q3) = quartiles(&vals);
                    (Some(med), Some(q3 - q1))
                };
                AggregateRow {
                    model,
                    mechanism,
                    fraction,
                    n_ok: vals.len(),
                    n_failed,
                    median_r2,
                    iqr,
                }
            })
            .collect()
    }
}

/// Loads or synthesizes the configured dataset.
pub fn resolve_dataset(source: &DatasetSource) -> Result<TemporalDataset, HarnessError> {
    match source {
        DatasetSource::Path(path) => Ok(load_dataset(path, None)?),
        DatasetSource::Generate(cfg) => Ok(generate_network(cfg)?.0),
    }
}

fn fit_and_score(
    model: &ModelChoice,
    train: &TemporalDataset,
    test: &Snapshot,
    cell_seed: u64,
) -> Result<f64, HarnessError> {
    let mu = match model {
        ModelChoice::Baseline(spec) => {
            let cell_spec =
                BaselineSpec { seed: derive_seed(spec.seed, cell_seed), ..spec.clone() };
            baselines::run_baseline(&cell_spec, train, test)?.predictions
        }
        ModelChoice::Dfl(settings) => {
            let fit = dfl::fit_dfl(train, &settings.arch, &settings.to_options(cell_seed))?;
            dfl::dfl_predict(&fit.model, test.features())?
        }
    };
    r_squared(test.response(), &mu)
}

fn run_cell(
    ds: &TemporalDataset,
    t: usize,
    model: &ModelChoice,
    mechanism: Mechanism,
    fraction: f64,
    seed: u64,
) -> (EvalRow, TimingRow) {
    let started = Instant::now();
    let outcome = (|| -> Result<f64, HarnessError> {
        // Zero missingness is the identity mask; skipping the inducer
        // also lets already-masked datasets run a fraction-0 sweep.
        let masked = if fraction > 0.0 {
            induce_missingness(ds, &MissingnessSpec { mechanism, fraction, seed }, t)?
        } else {
            ds.clone()
        };
        let (train, test) = temporal_split(&masked, t)?;
        fit_and_score(model, &train, &test.snapshots()[0], seed)
    })();
    let name = model.name();
    let outcome = match outcome {
        Ok(r2) => CellOutcome::Ok(r2),
        Err(e) => CellOutcome::Failed(e.to_string()),
    };
    (
        EvalRow { model: name.clone(), mechanism, fraction, seed, outcome },
        TimingRow {
            model: name,
            mechanism,
            fraction,
            seed,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    )
}

/// Runs the whole grid. Cells execute in parallel; results keep grid
/// order (mechanism, then fraction, then seed, then model), so the
/// report is deterministic. A failing cell becomes a failed row, not
/// an error.
pub fn run_sweep(cfg: &SweepConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let ds = resolve_dataset(&cfg.dataset)?;
    let t = cfg.split_step.unwrap_or_else(|| ds.steps().saturating_sub(1));

    let mut cells = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &fraction in &cfg.fractions {
            for &seed in &cfg.seeds {
                for model in &cfg.models {
                    cells.push((mechanism, fraction, seed, model));
                }
            }
        }
    }
    let results: Vec<(EvalRow, TimingRow)> = cells
        .par_iter()
        .map(|&(mechanism, fraction, seed, model)| {
            run_cell(&ds, t, model, mechanism, fraction, seed)
        })
        .collect();

    let mut report = EvalReport::default();
    for (row, timing) in results {
        report.rows.push(row);
        report.timings.push(timing);
    }
    Ok(report)
}

const REPORT_HEADER: [&str; 7] =
    ["model", "mechanism", "fraction", "seed", "status", "r2", "detail"];

fn mechanism_from_name(s: &str) -> Result<Mechanism, HarnessError> {
    match s {
        "at_random" => Ok(Mechanism::AtRandom),
        "lowest_response" => Ok(Mechanism::LowestResponse),
        "highest_response" => Ok(Mechanism::HighestResponse),
        other => Err(HarnessError::BadReport { reason: format!("unknown mechanism {other:?}") }),
    }
}

/// Writes `report.csv` plus one `curve_<mechanism>_<model>.csv` per
/// pair, a `summary.txt` of zero-missingness medians, and the
/// (non-deterministic) `timings.csv`. Returns the written paths.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let report_path = out_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&report_path)?;
    w.write_record(REPORT_HEADER)?;
    for row in &report.rows {
        let (status, r2, detail) = match &row.outcome {
            CellOutcome::Ok(r2) => ("ok", format!("{r2}"), String::new()),
            CellOutcome::Failed(msg) => ("failed", String::new(), msg.clone()),
        };
        w.write_record([
            row.model.as_str(),
            &row.mechanism.to_string(),
            &format!("{}", row.fraction),
            &format!("{}", row.seed),
            status,
            &r2,
            &detail,
        ])?;
    }
    w.flush()?;
    written.push(report_path);

    // Curve files: fraction vs median over seeds, one file per
    // (mechanism, model) pair in first-appearance order.
    let mut pairs: Vec<(Mechanism, String)> = Vec::new();
    for row in &report.rows {
        if !pairs.iter().any(|p| p.0 == row.mechanism && p.1 == row.model) {
            pairs.push((row.mechanism, row.model.clone()));
        }
    }
    let aggregates = report.aggregates();
    for (mechanism, model) in pairs {
        let path = out_dir.join(format!("curve_{mechanism}_{model}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["fraction", "median_r2"])?;
        for agg in &aggregates {
            if agg.mechanism == mechanism && agg.model == model {
                if let Some(median) = agg.median_r2 {
                    w.write_record([format!("{}", agg.fraction), format!("{median}")])?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }

    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, render_summary(report))?;
    written.push(summary_path);

    let timings_path = out_dir.join("timings.csv");
    let mut w = csv::Writer::from_path(&timings_path)?;
    w.write_record(["model", "mechanism", "fraction", "seed", "wall_ms"])?;
    for t in &report.timings {
        w.write_record([
            t.model.as_str(),
            &t.mechanism.to_string(),
            &format!("{}", t.fraction),
            &format!("{}", t.seed),
            &format!("{:.3}", t.wall_ms),
        ])?;
    }
    w.flush()?;
    written.push(timings_path);

    Ok(written)
}

/// Zero-missingness leaderboard: per-model median over every seed and
/// mechanism, best first, ties broken by name.
fn render_summary(report: &EvalReport) -> String {
    let mut models: Vec<String> = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for row in &report.rows {
        if row.fraction != 0.0 {
            continue;
        }
        let idx = match models.iter().position(|m| *m == row.model) {
            Some(i) => i,
            None => {
                models.push(row.model.clone());
                scores.push(Vec::new());
                models.len() - 1
            }
        };
        if let CellOutcome::Ok(r2) = row.outcome {
            scores[idx].push(r2);
        }
    }
    let mut lines = Vec::new();
    lines.push("clipped R^2 at zero missingness, median over seeds and mechanisms".to_string());
    lines.push(String::new());
    if models.is_empty() {
        lines.push("no zero-missingness cells in this sweep".to_string());
    } else {
        let mut table: Vec<(String, Option<f64>)> = models
            .into_iter()
            .zip(scores)
            .map(|(model, mut vals)| {
                vals.sort_by(f64::total_cmp);
                let median = if vals.is_empty() { None } else { Some(median_sorted(&vals)) };
                (model, median)
            })
            .collect();
        table.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        let width = table.iter().map(|(m, _)| m.len()).max().unwrap_or(5).max(5) + 2;
        lines.push(format!("{:<width$}median_r2", "model"));
        for (model, median) in table {
            match median {
                Some(v) => lines.push(format!("{model:<width$}{v}")),
                None => lines.push(format!("{model:<width$}all cells failed")),
            }
        }
    }
    lines.push(String::new());
    lines.push(format!(
        "failed cells: {} of {}",
        report.failed_count(),
        report.rows.len()
    ));
    lines.push(String::new());
    lines.join("\n")
}

/// Reads a `report.csv` back into rows.
pub fn parse_report(path: &Path) -> Result<Vec<EvalRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(HarnessError::BadReport {
            reason: format!("unexpected header {:?}", headers),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != REPORT_HEADER.len() {
            return Err(HarnessError::BadReport {
                reason: format!("row has {} fields, expected {}", record.len(), 7),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        let parse_num = |i: usize| -> Result<f64, HarnessError> {
            field(i).parse().map_err(|_| HarnessError::BadReport {
                reason: format!("bad number {:?}", field(i)),
            })
        };
        let outcome = match field(4) {
            "ok" => CellOutcome::Ok(parse_num(5)?),
            "failed" => CellOutcome::Failed(field(6).to_string()),
            other => {
                return Err(HarnessError::BadReport {
                    reason: format!("unknown status {other:?}"),
                })
            }
        };
        rows.push(EvalRow {
            model: field(0).to_string(),
            mechanism: mechanism_from_name(field(1))?,
            fraction: parse_num(2)?,
            seed: parse_num(3)? as u64,
            outcome,
        });
    }
    Ok(rows)
}
