//! Command-line front end: dataset generation, single-model fitting,
//! prediction, missingness sweeps, and report re-emission.
//!
//! Exit codes follow the usual convention: 0 on success, 1 on
//! operational failures (unreadable files, failed fits, sweeps with
//! failed cells), 2 on usage errors (unknown subcommands, flags, or
//! model names). All file outputs use shortest round-trip decimal
//! encoding so reruns are byte-comparable.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::baselines::{BaselineError, BaselineKind, BaselineSpec};
use crate::data::{load_dataset, write_dataset, DataError, TemporalDataset};
use crate::dfl::{Architecture, DflError, DflOptions};
use crate::harness::{
    emit_report, parse_report, run_sweep, EvalReport, HarnessError, SweepConfig,
};
use crate::model::{fit_baseline_model, fit_dfl_model, ModelError, TrainedModel};
use crate::nnet::TrainSettings;
use crate::optim::AscentOptions;
use crate::synth::{generate_network, GeneratorConfig, SynthError};

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or contradictory arguments; reported with usage, exit 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Dfl(#[from] DflError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structured regression over networked observations.
#[derive(Debug, Parser)]
#[command(name = "gcrf", version, about, disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed override: generator seed, fit seed, or the sweep's seed
    /// list (collapsed to this single value).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file (generator config or sweep config).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; created if absent.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Print fit diagnostics to stderr.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dataset into --out: dataset.csv with every
    /// snapshot, train.csv without the final one, and the planted
    /// quantities as truth.json.
    Generate,
    /// Fit one model on a dataset and store it as a JSON model file.
    Fit(FitArgs),
    /// Score a stored model on every snapshot of a dataset.
    Predict(PredictArgs),
    /// Run the missingness sweep described by --config and emit report
    /// files into --out.
    Sweep,
    /// Rebuild curve and summary files from an existing report CSV.
    Report(ReportArgs),
}

/// Model families the `fit` subcommand can store. Deletion-based
/// evaluation protocols (iLR, iGP, iGCRF) are not fittable artifacts;
/// their zero-imputation twins hold the identical weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    /// Joint feature-learning CRF.
    #[value(alias = "DFL")]
    Dfl,
    /// Ridge regression on zero-imputed features.
    #[value(name = "lr0", alias = "LR0")]
    Lr0,
    /// Gaussian-process regression on zero-imputed features.
    #[value(name = "gp0", alias = "GP0")]
    Gp0,
    /// CRF over the raw feature space.
    #[value(name = "gcrf0", alias = "GCRF0")]
    Gcrf0,
    /// CRF over a PCA embedding.
    #[value(name = "pca_gcrf", alias = "PCA_GCRF")]
    PcaGcrf,
    /// CRF over a denoising-autoencoder embedding.
    #[value(name = "dae_gcrf", alias = "DAE_GCRF")]
    DaeGcrf,
    /// CRF over a regression net's hidden layer.
    #[value(name = "nm_gcrf", alias = "NM_GCRF")]
    NmGcrf,
    /// Plain feed-forward regression net.
    #[value(name = "nn", alias = "NN")]
    Nn,
}

impl ModelArg {
    fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            ModelArg::Dfl => None,
            ModelArg::Lr0 => Some(BaselineKind::Lr0),
            ModelArg::Gp0 => Some(BaselineKind::Gp0),
            ModelArg::Gcrf0 => Some(BaselineKind::Gcrf0),
            ModelArg::PcaGcrf => Some(BaselineKind::PcaGcrf),
            ModelArg::DaeGcrf => Some(BaselineKind::DaeGcrf),
            ModelArg::NmGcrf => Some(BaselineKind::NmGcrf),
            ModelArg::Nn => Some(BaselineKind::Nn),
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Model family.
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Training dataset CSV.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Embedding width h (joint model).
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Hidden-size divisor gamma (joint model).
    #[arg(long)]
    gamma: Option<f64>,
    /// Kernel neighbors k (joint model).
    #[arg(long)]
    neighbor_k: Option<usize>,
    /// Fixed hidden width instead of the node-count formula (joint
    /// model).
    #[arg(long)]
    hidden: Option<usize>,
    /// Ascent iteration cap (joint model).
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient-norm stopping tolerance (joint model).
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Relative objective-change stopping tolerance; 0 disables (joint
    /// model).
    #[arg(long)]
    obj_tol: Option<f64>,
    /// Pretraining epoch cap (joint model).
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Ridge strength (linear heads).
    #[arg(long)]
    ridge: Option<f64>,
    /// Initial noise variance for kernel search (GP-based models).
    #[arg(long)]
    noise_init: Option<f64>,
    /// Embedding dimensions (PCA / DAE pipelines).
    #[arg(long)]
    dims: Option<usize>,
    /// Feature corruption rate in [0, 1) (DAE pipeline).
    #[arg(long)]
    noise_prob: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Stored model file from `fit`.
    #[arg(long, value_name = "PATH")]
    model_file: PathBuf,
    /// Dataset CSV to score.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Long-form report CSV produced by `sweep`.
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
}

/// Parses `argv` and runs the selected subcommand, returning the
/// process exit code instead of exiting so tests can drive it.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; they exit 0.
            let _ = err.print();
            return err.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            2
        }
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Generate => run_generate(cli),
        Command::Fit(args) => run_fit(cli, args),
        Command::Predict(args) => run_predict(cli, args),
        Command::Sweep => run_sweep_cmd(cli),
        Command::Report(args) => run_report(cli, args),
    }
}

fn require_config(cli: &Cli, what: &str) -> Result<PathBuf, CliError> {
    cli.config
        .clone()
        .ok_or_else(|| CliError::Usage(format!("--config <PATH> is required for {what}")))
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    fs::create_dir_all(&cli.out)?;
    Ok(&cli.out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_generate(cli: &Cli) -> Result<i32, CliError> {
    let path = require_config(cli, "generate")?;
    let mut cfg: GeneratorConfig = read_json(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let (ds, truth) = generate_network(&cfg)?;
    let out = out_dir(cli)?;

    let dataset_path = out.join("dataset.csv");
    write_dataset(&ds, &dataset_path)?;
    println!("wrote {}", dataset_path.display());

    // The loader holds datasets to at least two snapshots, so a
    // training prefix is only written when it clears that bar; the
    // held-out snapshot is scored by predicting dataset.csv and
    // filtering on its final time value.
    let steps = ds.steps();
    if steps >= 3 {
        let train = TemporalDataset::new(
            ds.node_ids().to_vec(),
            ds.snapshots()[..steps - 1].to_vec(),
        )?;
        let train_path = out.join("train.csv");
        write_dataset(&train, &train_path)?;
        println!("wrote {}", train_path.display());
    } else {
        eprintln!("note: two-step dataset, no train.csv; split it with sweep's split_step");
    }
    let truth_path = out.join("truth.json");
    fs::write(&truth_path, serde_json::to_string_pretty(&truth)? + "\n")?;
    println!("wrote {}", truth_path.display());
    if cli.verbose {
        eprintln!(
            "generated {} nodes x {} steps ({} features)",
            ds.n(),
            steps,
            ds.m()
        );
    }
    Ok(0)
}

fn run_fit(cli: &Cli, args: &FitArgs) -> Result<i32, CliError> {
    if args.model.baseline_kind().is_some() {
        for (flag, set) in [
            ("--embed-dim", args.embed_dim.is_some()),
            ("--gamma", args.gamma.is_some()),
            ("--neighbor-k", args.neighbor_k.is_some()),
            ("--hidden", args.hidden.is_some()),
            ("--max-iters", args.max_iters.is_some()),
            ("--grad-tol", args.grad_tol.is_some()),
            ("--obj-tol", args.obj_tol.is_some()),
            ("--pretrain-epochs", args.pretrain_epochs.is_some()),
        ] {
            if set {
                return Err(CliError::Usage(format!("{flag} applies only to --model dfl")));
            }
        }
    }
    let train = load_dataset(&args.data, None)?;
    let seed = cli.seed.unwrap_or(0);
    let model = match args.model.baseline_kind() {
        None => {
            let mut arch = Architecture::default();
            if let Some(h) = args.embed_dim {
                arch.embed_dim = h;
            }
            if let Some(g) = args.gamma {
                arch.gamma = g;
            }
            if let Some(k) = args.neighbor_k {
                arch.neighbor_k = k;
            }
            if args.hidden.is_some() {
                arch.hidden_override = args.hidden;
            }
            arch.validate()?;
            let mut opts = DflOptions {
                ascent: AscentOptions::default(),
                pretrain: TrainSettings::default(),
                seed,
            };
            if let Some(iters) = args.max_iters {
                opts.ascent.max_iters = iters;
            }
            if let Some(tol) = args.grad_tol {
                opts.ascent.grad_tol = tol;
            }
            if let Some(tol) = args.obj_tol {
                opts.ascent.obj_tol = tol;
            }
            if let Some(epochs) = args.pretrain_epochs {
                opts.pretrain.epochs = epochs;
            }
            fit_dfl_model(&train, &arch, &opts)?
        }
        Some(kind) => {
            let mut hyper = BTreeMap::new();
            if let Some(v) = args.ridge {
                hyper.insert("ridge".to_string(), v);
            }
            if let Some(v) = args.noise_init {
                hyper.insert("noise_init".to_string(), v);
            }
            if let Some(v) = args.dims {
                hyper.insert("dims".to_string(), v as f64);
            }
            if let Some(v) = args.noise_prob {
                hyper.insert("noise_prob".to_string(), v);
            }
            let spec = BaselineSpec::new(kind, hyper, seed)?;
            fit_baseline_model(&spec, &train)?
        }
    };

    for warning in model.warnings() {
        eprintln!("warning: {warning}");
    }
    if cli.verbose {
        if let TrainedModel::Dfl { objective, converged, trace, .. } = &model {
            eprintln!(
                "objective {objective} after {} accepted steps (converged: {converged})",
                trace.len().saturating_sub(1)
            );
        }
    }
    let out = out_dir(cli)?;
    let model_path = out.join("model.json");
    model.save(&model_path)?;
    println!("wrote {}", model_path.display());
    Ok(0)
}

fn run_predict(cli: &Cli, args: &PredictArgs) -> Result<i32, CliError> {
    let model = TrainedModel::load(&args.model_file)?;
    let ds = load_dataset(&args.data, None)?;
    let out = out_dir(cli)?;
    let pred_path = out.join("predictions.csv");

    let mut writer = csv::Writer::from_path(&pred_path).map_err(DataError::from)?;
    writer
        .write_record(["node_id", "time", "prediction"])
        .map_err(DataError::from)?;
    for snap in ds.snapshots() {
        let mu = model.predict(snap.features())?;
        for (i, id) in ds.node_ids().iter().enumerate() {
            writer
                .write_record([id.as_str(), &snap.time().to_string(), &format!("{}", mu[i])])
                .map_err(DataError::from)?;
        }
    }
    writer.flush()?;
    println!("wrote {}", pred_path.display());
    Ok(0)
}

fn run_sweep_cmd(cli: &Cli) -> Result<i32, CliError> {
    let path = require_config(cli, "sweep")?;
    let mut cfg: SweepConfig = read_json(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let report = run_sweep(&cfg)?;
    let out = out_dir(cli)?;
    let files = emit_report(&report, out)?;
    for file in &files {
        println!("wrote {}", file.display());
    }
    let failed = report.failed_count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see report.csv", report.rows.len());
        return Ok(1);
    }
    if cli.verbose {
        eprintln!("{} cells succeeded", report.rows.len());
    }
    Ok(0)
}

fn run_report(cli: &Cli, args: &ReportArgs) -> Result<i32, CliError> {
    let rows = parse_report(&args.report)?;
    // Wall times live only in the original run's timings.csv; re-emission
    // rebuilds the deterministic files and an empty timing table.
    let report = EvalReport { rows, timings: Vec::new() };
    let out = out_dir(cli)?;
    let files = emit_report(&report, out)?;
    for file in &files {
        println!("wrote {}", file.display());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        cli_main(args.iter().copied())
    }

    #[test]
    fn unknown_model_is_a_usage_error() {
        assert_eq!(run(&["gcrf", "fit", "--model", "bogus", "--data", "x.csv"]), 2);
    }

    #[test]
    fn unknown_subcommand_and_flag_are_usage_errors() {
        assert_eq!(run(&["gcrf", "frobnicate"]), 2);
        assert_eq!(run(&["gcrf", "generate", "--wat"]), 2);
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let dir = std::env::temp_dir().join("gcrf_cli_noconfig");
        fs::create_dir_all(&dir).unwrap();
        let out = dir.to_str().unwrap();
        assert_eq!(run(&["gcrf", "generate", "--out", out]), 2);
        assert_eq!(run(&["gcrf", "sweep", "--out", out]), 2);
    }

    #[test]
    fn deletion_protocols_are_not_fit_targets() {
        assert_eq!(run(&["gcrf", "fit", "--model", "iLR", "--data", "x.csv"]), 2);
    }

    #[test]
    fn baseline_rejects_joint_model_flags() {
        let err = dispatch(
            &Cli::try_parse_from([
                "gcrf", "fit", "--model", "lr0", "--data", "x.csv", "--gamma", "2.0",
            ])
            .unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Usage(msg) if msg.contains("--gamma")));
    }

    #[test]
    fn missing_data_file_is_operational_not_usage() {
        let dir = std::env::temp_dir().join("gcrf_cli_nodata");
        fs::create_dir_all(&dir).unwrap();
        let missing = dir.join("absent.csv");
        let code = run(&[
            "gcrf",
            "fit",
            "--model",
            "lr0",
            "--data",
            missing.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}
