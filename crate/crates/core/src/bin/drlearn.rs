//! Command-line interface: ingestion, fitting, prediction, evaluation,
//! registered experiments, and the federated runner.
//!
//! Exit codes: 0 success, 2 validation/input error, 3 numeric failure.
//! Every run echoes its resolved configuration as one JSON line on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use drlearn::data::{ingest_source_csv, ingest_target_csv, MixtureSpec, SourceGroup};
use drlearn::drl::{fit_drl, fit_plugin_drl, DRLModel, FitConfig, ShiftMode, SplitMode};
use drlearn::error::{Error, Result};
use drlearn::eval::{empirical_reward, worst_group_reward};
use drlearn::federated::{audit_privacy, run_protocol};
use drlearn::learners::LearnerSpec;
use drlearn::sim::{registry, run_experiment, ExperimentOverrides, Scale};
use drlearn::weights::UncertaintySet;

#[derive(Parser)]
#[command(name = "drlearn", disable_version_flag = true)]
struct Cli {
    /// Print the build fingerprint and exit.
    #[arg(long, global = true)]
    version: bool,
    /// Master seed; all randomness derives named substreams from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; explicit flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the robust aggregation model from source and target CSVs.
    Fit(FitArgs),
    /// Apply a fitted model to new covariates.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Covariate CSV (header row, numeric columns).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reward of a fitted model on a labeled CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        group_column: Option<String>,
        #[arg(long, default_value = "y")]
        outcome_column: String,
    },
    /// Run a registered simulation experiment.
    Experiment {
        #[arg(long)]
        name: String,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "paper")]
        scale: String,
        #[arg(long)]
        n_per_group: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the registered experiments as a JSON manifest.
    ListExperiments,
    /// Fit through the multi-site protocol, with transcript and audit.
    Federate {
        #[command(flatten)]
        fit: FitArgs,
        /// Transcript output (JSON lines, one message-metadata record each).
        #[arg(long)]
        transcript: PathBuf,
    },
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "group")]
    group_column: String,
    #[arg(long, default_value = "y")]
    outcome_column: String,
    /// Prior set: `simplex`, `ball:c1,..,cL:rho`, or `point:q1,..,qL`.
    #[arg(long)]
    h_set: Option<String>,
    /// Interpret the ball radius as given (no sqrt(L) scaling).
    #[arg(long)]
    rho_unscaled: bool,
    /// `linear`, `lasso`, or `forest`.
    #[arg(long)]
    learner: Option<String>,
    /// `none` or `logistic`.
    #[arg(long)]
    shift: Option<String>,
    /// `det`, `seed:N`, or `none`.
    #[arg(long)]
    split: Option<String>,
    /// Use the plug-in Gram estimator instead of the bias-corrected one.
    #[arg(long)]
    plugin: bool,
    #[arg(long)]
    psd_ridge: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    penalty_constant: Option<f64>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    oob_tune: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Optional JSON config file; flags always win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    learner: Option<String>,
    h_set: Option<String>,
    shift: Option<String>,
    split: Option<String>,
    plugin: Option<bool>,
    psd_ridge: Option<f64>,
    ridge: Option<f64>,
    penalty_constant: Option<f64>,
    cv_folds: Option<usize>,
    n_trees: Option<usize>,
    mtry: Option<usize>,
    min_leaf: Option<usize>,
    oob_tune: Option<bool>,
    group_column: Option<String>,
    outcome_column: Option<String>,
}

fn build_fingerprint() -> String {
    format!(
        "drlearn {} ({}-{})",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.version {
        println!("{}", build_fingerprint());
        return ExitCode::SUCCESS;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_weights(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("bad weight {v:?}")))
        })
        .collect()
}

fn parse_h_set(s: &str, scaled: bool) -> Result<UncertaintySet> {
    if s == "simplex" {
        return Ok(UncertaintySet::FullSimplex);
    }
    if let Some(rest) = s.strip_prefix("point:") {
        let q = MixtureSpec::new(parse_weights(rest)?)?;
        return Ok(UncertaintySet::Singleton { q });
    }
    if let Some(rest) = s.strip_prefix("ball:") {
        let (center_str, rho_str) = rest
            .rsplit_once(':')
            .ok_or_else(|| Error::Schema("ball spec must be ball:c1,..,cL:rho".into()))?;
        let center = MixtureSpec::new(parse_weights(center_str)?)?;
        let rho: f64 = rho_str
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("bad radius {rho_str:?}")))?;
        return Ok(UncertaintySet::L2Ball {
            center,
            rho,
            scaled,
        });
    }
    Err(Error::Schema(format!(
        "unknown h-set {s:?} (expected simplex, ball:..., or point:...)"
    )))
}

fn parse_learner(name: &str, fa: &FitArgs, fc: &FileConfig) -> Result<LearnerSpec> {
    match name {
        "linear" => Ok(LearnerSpec::Linear {
            ridge: fa.ridge.or(fc.ridge).unwrap_or(0.0),
        }),
        "lasso" => Ok(LearnerSpec::Lasso {
            penalty_constant: fa.penalty_constant.or(fc.penalty_constant).unwrap_or(2.0),
            cv_folds: fa.cv_folds.or(fc.cv_folds),
        }),
        "forest" => Ok(LearnerSpec::Forest {
            n_trees: fa.n_trees.or(fc.n_trees).unwrap_or(200),
            mtry: fa.mtry.or(fc.mtry),
            min_leaf: fa.min_leaf.or(fc.min_leaf).unwrap_or(5),
            oob_tune: fa.oob_tune || fc.oob_tune.unwrap_or(false),
        }),
        other => Err(Error::Schema(format!(
            "unknown learner {other:?} (expected linear, lasso, or forest)"
        ))),
    }
}

fn parse_split(s: &str) -> Result<SplitMode> {
    match s {
        "det" => Ok(SplitMode::Deterministic),
        "none" => Ok(SplitMode::NoSplit),
        other => {
            if let Some(n) = other.strip_prefix("seed:") {
                let seed: u64 = n
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad split seed {n:?}")))?;
                Ok(SplitMode::Seeded { seed })
            } else {
                Err(Error::Schema(format!(
                    "unknown split mode {other:?} (expected det, seed:N, or none)"
                )))
            }
        }
    }
}

fn parse_shift(s: &str) -> Result<ShiftMode> {
    match s {
        "none" => Ok(ShiftMode::None),
        "logistic" => Ok(ShiftMode::logistic()),
        other => Err(Error::Schema(format!(
            "unknown shift mode {other:?} (expected none or logistic)"
        ))),
    }
}

struct ResolvedFit {
    config: FitConfig,
    plugin: bool,
    group_column: String,
    outcome_column: String,
}

fn resolve_fit(fa: &FitArgs, fc: &FileConfig, seed: Option<u64>) -> Result<ResolvedFit> {
    let learner_name = fa
        .learner
        .clone()
        .or_else(|| fc.learner.clone())
        .unwrap_or_else(|| "forest".into());
    let h_str = fa
        .h_set
        .clone()
        .or_else(|| fc.h_set.clone())
        .unwrap_or_else(|| "simplex".into());
    let shift_str = fa
        .shift
        .clone()
        .or_else(|| fc.shift.clone())
        .unwrap_or_else(|| "none".into());
    let split_str = fa
        .split
        .clone()
        .or_else(|| fc.split.clone())
        .unwrap_or_else(|| "det".into());
    let config = FitConfig {
        learner: parse_learner(&learner_name, fa, fc)?,
        h_set: parse_h_set(&h_str, !fa.rho_unscaled)?,
        shift_mode: parse_shift(&shift_str)?,
        split_mode: parse_split(&split_str)?,
        seed: seed.or(fc.seed).unwrap_or(0),
        psd_ridge: fa.psd_ridge.or(fc.psd_ridge).unwrap_or(1e-10),
    };
    Ok(ResolvedFit {
        config,
        plugin: fa.plugin || fc.plugin.unwrap_or(false),
        group_column: fc
            .group_column
            .clone()
            .filter(|_| fa.group_column == "group")
            .unwrap_or_else(|| fa.group_column.clone()),
        outcome_column: fc
            .outcome_column
            .clone()
            .filter(|_| fa.outcome_column == "y")
            .unwrap_or_else(|| fa.outcome_column.clone()),
    })
}

fn echo_config(command: &str, value: serde_json::Value) {
    println!(
        "{}",
        serde_json::json!({
            "resolved_config": {
                "command": command,
                "fingerprint": build_fingerprint(),
                "params": value,
            }
        })
    );
}

fn load_fit_inputs(
    fa: &FitArgs,
    rf: &ResolvedFit,
) -> Result<(Vec<SourceGroup>, drlearn::data::TargetSample)> {
    let groups = ingest_source_csv(&fa.source, &rf.group_column, &rf.outcome_column)?;
    let target = ingest_target_csv(&fa.target)?;
    target.check_p(groups[0].p())?;
    Ok((groups, target))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Ignore the error if a pool was already installed.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let fc: FileConfig = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    if cli.threads.is_none() {
        if let Some(n) = fc.threads {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let command = cli
        .command
        .ok_or_else(|| Error::Schema("no subcommand given (try --help)".into()))?;

    match command {
        Command::Fit(fa) => {
            let rf = resolve_fit(&fa, &fc, cli.seed)?;
            echo_config(
                "fit",
                serde_json::json!({
                    "source": fa.source, "target": fa.target,
                    "group_column": rf.group_column, "outcome_column": rf.outcome_column,
                    "plugin": rf.plugin, "fit": rf.config, "out": fa.out,
                }),
            );
            let (groups, target) = load_fit_inputs(&fa, &rf)?;
            let model = if rf.plugin {
                fit_plugin_drl(&groups, &target, &rf.config)?
            } else {
                fit_drl(&groups, &target, &rf.config)?
            };
            std::fs::write(&fa.out, model.to_json()?)?;
            println!(
                "{}",
                serde_json::json!({
                    "weights": model.weights().weights(),
                    "objective": model.diagnostics().solver.objective,
                    "converged": model.diagnostics().solver.converged,
                    "psd_repaired": model.gamma().psd_repaired(),
                    "model": fa.out,
                })
            );
            Ok(())
        }
        Command::Predict { model, input, out } => {
            echo_config(
                "predict",
                serde_json::json!({"model": model, "input": input, "out": out}),
            );
            let model = DRLModel::from_json(&std::fs::read_to_string(model)?)?;
            let x = ingest_target_csv(&input)?;
            x.check_p(model.n_features())?;
            let preds = model.predict(x.covariates())?;
            let mut w =
                csv::Writer::from_path(&out).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.write_record(["prediction"])
                .and_then(|()| {
                    for v in preds.iter() {
                        w.write_record([format!("{v}")])?;
                    }
                    w.flush().map_err(csv::Error::from)
                })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            println!(
                "{}",
                serde_json::json!({"predictions": out, "n": preds.len()})
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            group_column,
            outcome_column,
        } => {
            echo_config(
                "evaluate",
                serde_json::json!({
                    "model": model, "data": data,
                    "group_column": group_column, "outcome_column": outcome_column,
                }),
            );
            let model = DRLModel::from_json(&std::fs::read_to_string(model)?)?;
            match group_column {
                Some(gc) => {
                    let groups = ingest_source_csv(&data, &gc, &outcome_column)?;
                    let sets: Vec<(DMatrix<f64>, DVector<f64>)> = groups
                        .iter()
                        .map(|g| (g.covariates().clone(), g.outcomes().clone()))
                        .collect();
                    let report = worst_group_reward(|x| model.predict(x), &sets)?;
                    println!("{}", serde_json::to_string(&report)?);
                }
                None => {
                    let (x, y) = read_labeled_csv(&data, &outcome_column)?;
                    let preds = model.predict(&x)?;
                    let report = empirical_reward(&preds, &y)?;
                    println!("{}", serde_json::to_string(&report)?);
                }
            }
            Ok(())
        }
        Command::Experiment {
            name,
            reps,
            scale,
            n_per_group,
            out,
        } => {
            let scale = match scale.as_str() {
                "paper" => Scale::Paper,
                "ci" => Scale::Ci,
                other => {
                    return Err(Error::Schema(format!(
                        "unknown scale {other:?} (expected paper or ci)"
                    )))
                }
            };
            let ov = ExperimentOverrides {
                reps,
                seed: cli.seed,
                scale,
                n_per_group,
            };
            echo_config(
                "experiment",
                serde_json::json!({"name": name, "overrides": ov, "out": out}),
            );
            let result = run_experiment(&name, &ov)?;
            let paths = result.write_to(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "experiment": result.name,
                    "files": paths,
                    "summary": result.summary,
                })
            );
            Ok(())
        }
        Command::ListExperiments => {
            echo_config("list-experiments", serde_json::json!({}));
            println!("{}", serde_json::to_string_pretty(&registry())?);
            Ok(())
        }
        Command::Federate { fit, transcript } => {
            let rf = resolve_fit(&fit, &fc, cli.seed)?;
            if rf.plugin {
                return Err(Error::Schema(
                    "the federated protocol runs the bias-corrected estimator; drop --plugin"
                        .into(),
                ));
            }
            echo_config(
                "federate",
                serde_json::json!({
                    "source": fit.source, "target": fit.target,
                    "fit": rf.config, "out": fit.out, "transcript": transcript,
                }),
            );
            let (groups, target) = load_fit_inputs(&fit, &rf)?;
            let (model, log) = run_protocol(&groups, &target, &rf.config)?;
            std::fs::write(&fit.out, model.to_json()?)?;
            log.write_jsonl(&transcript)?;
            let audit = audit_privacy(&log, &groups);
            println!(
                "{}",
                serde_json::json!({
                    "weights": model.weights().weights(),
                    "model": fit.out,
                    "transcript": transcript,
                    "messages": log.messages.len(),
                    "audit": audit,
                })
            );
            if !audit.passed {
                return Err(Error::Invariant(format!(
                    "privacy audit failed: {}",
                    audit.violations.join("; ")
                )));
            }
            Ok(())
        }
    }
}

/// Read a labeled CSV: the named outcome column plus numeric features in
/// header order.
fn read_labeled_csv(path: &PathBuf, outcome_column: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot read CSV: {e}")))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("missing header row: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let y_idx = headers
        .iter()
        .position(|h| h == outcome_column)
        .ok_or_else(|| Error::Schema(format!("outcome column {outcome_column:?} not found")))?;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: headers[c].clone(),
                message: format!("expected a number, got {cell:?}"),
            })?;
            if c == y_idx {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: "<file>".into(),
            message: "no data rows".into(),
        });
    }
    let p = headers.len() - 1;
    Ok((
        DMatrix::from_row_slice(ys.len(), p, &xs),
        DVector::from_vec(ys),
    ))
}
