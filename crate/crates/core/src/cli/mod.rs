//! Command-line front end: `generate`, `train`, `sweep`, `evaluate`, `plot`.

mod config;
mod pipeline;
mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

pub use config::{
    apply_override, expand_grid, load_run_config, merge_json, CsvSpec, DatasetSource, GridPoint, ModelSpec,
    RunConfig, SweepGrid, ToyKind, ToySpec,
};
pub use pipeline::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, load_data, split_data, split_dir, sweep_threads,
    train_split, Leaderboard, LeaderboardEntry, LoadedData, SplitData, SplitOutcome, TrainSummary,
    CHECKPOINT_FILE, CONFIG_FILE, EVAL_JSON, EVAL_JSONL, HISTORY_FILE, LEADERBOARD_FILE, MANIFEST_FILE,
    METRICS_JSON, METRICS_JSONL, TEST_CSV,
};
pub use plot::{cmd_plot, PlotKind, PlotRequest};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "samplenet", version, about = "Sample-based distributional regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Toy generator name (unimodal, multimodal) or CSV path
    #[arg(long)]
    pub dataset: Option<String>,
    /// samplenet or beta_nll
    #[arg(long)]
    pub method: Option<String>,
    /// Dotted overrides such as loss.eta=0.5
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a toy dataset CSV and its manifest
    Generate(RunArgs),
    /// Train and evaluate every split
    Train(RunArgs),
    /// Train one run per valid hyperparameter grid point
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Only enumerate the grid
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-score the checkpoints of a finished run
    Evaluate {
        /// Run directory written by `train`
        #[arg(long)]
        run: PathBuf,
        /// CSV to score instead of the saved held-out rows
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG + CSV plots from a run
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// scatter, interval or hpd
        #[arg(long, default_value = "interval")]
        kind: String,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        split: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn apply_dataset_flag(root: &mut Value, dataset: &str) {
    let slot = &mut root["dataset"];
    match dataset {
        "unimodal" | "multimodal" => {
            if slot.get("toy").is_some() {
                slot["toy"]["kind"] = json!(dataset);
            } else {
                *slot = json!({ "toy": { "kind": dataset } });
            }
        }
        path => {
            let targets = slot
                .get("csv")
                .and_then(|c| c.get("targets"))
                .cloned()
                .unwrap_or_else(|| json!(["y"]));
            *slot = json!({ "csv": { "path": path, "targets": targets } });
        }
    }
}

/// Defaults, then `--config`, then the named flags, then dotted overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge_json(&mut value, patch);
    }
    if let Some(d) = &args.dataset {
        apply_dataset_flag(&mut value, d);
    }
    if let Some(m) = &args.method {
        value["method"] = json!(m);
    }
    if let Some(s) = args.seed {
        value["seed"] = json!(s);
    }
    if let Some(o) = &args.out {
        value["out"] = json!(o);
    }
    for o in &args.overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command and returns a human-readable summary.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = resolve_config(&args)?;
            let files = cmd_generate(&cfg)?;
            Ok(files
                .iter()
                .map(|f| format!("wrote {}", f.display()))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Train(args) => {
            let cfg = resolve_config(&args)?;
            let summary = cmd_train(&cfg)?;
            let agg = &summary.report.aggregates;
            Ok(format!(
                "es {:.5} ± {:.5}  nll {:.5} ± {:.5}  rmse {:.5} ± {:.5}\nwrote {}",
                agg["es"].mean,
                agg["es"].std,
                agg["nll"].mean,
                agg["nll"].std,
                agg["rmse"].mean,
                agg["rmse"].std,
                cfg.out.display()
            ))
        }
        Command::Sweep { run, dry_run } => {
            let cfg = resolve_config(&run)?;
            let board = cmd_sweep(&cfg, dry_run)?;
            let mut msg = format!("{} runs, {} skipped (K > M)", board.runs, board.skipped.len());
            if let Some(best) = &board.best {
                msg.push_str(&format!(
                    "\nbest: M={} K={} L={} eta={} beta={} score {:.5}",
                    best.point.m,
                    best.point.k,
                    best.point.l,
                    best.point.eta,
                    best.point.beta,
                    best.score.unwrap_or(f64::NAN)
                ));
            }
            Ok(msg)
        }
        Command::Evaluate { run, dataset, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let report = cmd_evaluate(&run, dataset.as_deref(), &out)?;
            Ok(format!(
                "es {:.5}  nll {:.5}  rmse {:.5}\nwrote {}",
                report.aggregates["es"].mean,
                report.aggregates["nll"].mean,
                report.aggregates["rmse"].mean,
                out.join(EVAL_JSONL).display()
            ))
        }
        Command::Plot { run, kind, level, points, split, out } => {
            let req = PlotRequest {
                kind: kind.parse()?,
                level,
                points,
                split,
            };
            let out = out.unwrap_or_else(|| run.clone());
            let (svg, csv) = cmd_plot(&run, &req, &out)?;
            Ok(format!("wrote {}\nwrote {}", svg.display(), csv.display()))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
