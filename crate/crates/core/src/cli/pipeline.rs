use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{expand_grid, DatasetSource, GridPoint, RunConfig, ToyKind, ToySpec};
use crate::data::{
    gen_multimodal_toy, gen_unimodal_toy, load_csv, split, split_indices, Dataset, DatasetManifest,
    SplitSpec, Whitening,
};
use crate::diffmath::{derive_seed, Rng};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_model, MetricsRecord, MetricsReport};
use crate::network::{
    load_checkpoint, save_checkpoint, train, Checkpoint, HistoryEntry, SampleNetModel, TrainStatus,
};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const EVAL_JSONL: &str = "eval_metrics.jsonl";
pub const EVAL_JSON: &str = "eval_metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TEST_CSV: &str = "test.csv";
pub const LEADERBOARD_FILE: &str = "leaderboard.json";

// Stream offsets for seeds derived from the run seed.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1_000;
const TRAIN_STREAM: u64 = 2_000;
const EVAL_STREAM: u64 = 3_000;
const VAL_STREAM: u64 = 4_000;
const SPLIT_STREAM: u64 = 5_000;

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A loaded dataset plus an optional dedicated test set.
pub struct LoadedData {
    pub data: Dataset,
    pub test: Option<Dataset>,
    pub manifest: DatasetManifest,
}

fn generate_toy(spec: &ToySpec, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    let mut rng = Rng::new(derive_seed(seed, DATA_STREAM));
    let (data, test) = match spec.kind {
        ToyKind::Unimodal => {
            let data = gen_unimodal_toy(spec.n, spec.outliers, spec.noise_std, &mut rng)?;
            let test = spec
                .test_n
                .map(|n| gen_unimodal_toy(n, 0, spec.noise_std, &mut rng))
                .transpose()?;
            (data, test)
        }
        ToyKind::Multimodal => {
            if spec.outliers > 0 {
                return Err(Error::Config("outliers are only defined for the unimodal toy".into()));
            }
            let data = gen_multimodal_toy(spec.n, spec.noise_std, &mut rng)?;
            let test = spec
                .test_n
                .map(|n| gen_multimodal_toy(n, spec.noise_std, &mut rng))
                .transpose()?;
            (data, test)
        }
    };
    Ok((data, test))
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match &cfg.dataset {
        DatasetSource::Toy(spec) => {
            let (data, test) = generate_toy(spec, cfg.data_seed())?;
            let source = match spec.kind {
                ToyKind::Unimodal => "toy:unimodal",
                ToyKind::Multimodal => "toy:multimodal",
            };
            let manifest = DatasetManifest {
                source: source.into(),
                target_columns: data.target_names.clone(),
                n: data.len(),
                c: data.input_dim(),
                d: data.output_dim(),
                seed: Some(cfg.data_seed()),
                outlier_indices: data.outliers.clone(),
            };
            Ok(LoadedData { data, test, manifest })
        }
        DatasetSource::Csv(csv) => {
            let data = load_csv(&csv.path, &csv.targets)?;
            let manifest = DatasetManifest {
                source: csv.path.display().to_string(),
                target_columns: csv.targets.clone(),
                n: data.len(),
                c: data.input_dim(),
                d: data.output_dim(),
                seed: None,
                outlier_indices: Vec::new(),
            };
            Ok(LoadedData { data, test: None, manifest })
        }
    }
}

/// Writes `data.csv` (and `test.csv` for toys with a dedicated test set)
/// plus the manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let loaded = load_data(cfg)?;
    ensure_dir(&cfg.out)?;
    let mut written = vec![cfg.out.join("data.csv")];
    loaded.data.write_csv(&written[0])?;
    if let Some(test) = &loaded.test {
        let p = cfg.out.join(TEST_CSV);
        test.write_csv(&p)?;
        written.push(p);
    }
    let m = cfg.out.join(MANIFEST_FILE);
    write_json(&m, &loaded.manifest)?;
    written.push(m);
    Ok(written)
}

/// Raw (unwhitened) train, validation and test rows of split `index`.
pub struct SplitData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

pub fn split_data(cfg: &RunConfig, loaded: &LoadedData, index: usize) -> Result<SplitData> {
    let spec = SplitSpec {
        seed: derive_seed(cfg.data_seed(), SPLIT_STREAM),
        ..cfg.split
    };
    let (train, test) = match &loaded.test {
        Some(test) => (loaded.data.clone(), test.clone()),
        None => split(&loaded.data, &spec, index)?,
    };
    if cfg.validation_fraction == 0.0 {
        return Ok(SplitData { train, val: None, test });
    }
    let val_spec = SplitSpec {
        test_fraction: cfg.validation_fraction,
        n_splits: 1,
        seed: derive_seed(cfg.data_seed(), VAL_STREAM + index as u64),
    };
    let (fit, val) = split_indices(train.len(), &val_spec, 0)?;
    Ok(SplitData {
        train: train.subset(&fit),
        val: Some(train.subset(&val)),
        test,
    })
}

pub struct SplitOutcome {
    pub record: MetricsRecord,
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
    pub status: TrainStatus,
    pub best_metric: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub test: Dataset,
}

pub fn train_split(cfg: &RunConfig, loaded: &LoadedData, index: usize) -> Result<SplitOutcome> {
    let parts = split_data(cfg, loaded, index)?;
    let whitening = Whitening::fit(parts.train.x())?;
    let train_set = parts.train.whitened_with(&whitening)?;
    let val_set = parts.val.as_ref().map(|v| v.whitened_with(&whitening)).transpose()?;
    let test_set = parts.test.whitened_with(&whitening)?;

    let mlp = cfg.mlp_config(train_set.input_dim(), train_set.output_dim());
    let model = SampleNetModel::new(mlp, &mut Rng::new(derive_seed(cfg.seed, INIT_STREAM + index as u64)))?;
    let schedule = crate::network::TrainSchedule {
        seed: derive_seed(cfg.seed, TRAIN_STREAM + index as u64),
        ..cfg.schedule
    };
    let result = train(&model, &train_set, val_set.as_ref(), &cfg.objective(), &schedule)?;
    let mut record = evaluate_model(
        &result.model,
        &test_set,
        cfg.eval_m,
        derive_seed(cfg.seed, EVAL_STREAM + index as u64),
    )?;
    record.split_index = index;
    let mut checkpoint = Checkpoint::from_model(&result.model, Some(cfg.seed), Some(whitening));
    checkpoint.meta = json!({
        "method": cfg.method,
        "settings": cfg.method_settings(),
        "split_index": index,
        "status": result.status,
    });
    Ok(SplitOutcome {
        record,
        checkpoint,
        final_train_loss: result.final_train_loss(100),
        history: result.history,
        status: result.status,
        best_metric: result.best_metric,
        test: parts.test,
    })
}

fn report_metadata(cfg: &RunConfig, manifest: &DatasetManifest) -> Value {
    json!({
        "dataset": manifest.source,
        "method": cfg.method,
        "settings": cfg.method_settings(),
        "seed": cfg.seed,
        "eval_m": cfg.eval_m,
        "n_splits": cfg.split.n_splits,
    })
}

fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn split_dir(run: &Path, index: usize) -> PathBuf {
    run.join(format!("split{index}"))
}

/// Summary returned by [`cmd_train`].
pub struct TrainSummary {
    pub report: MetricsReport,
    pub statuses: Vec<TrainStatus>,
    /// Best validation metric of each split, when validation ran.
    pub best_metrics: Vec<Option<f64>>,
    pub final_train_losses: Vec<Option<f64>>,
}

/// Trains every split, writing checkpoints, histories, held-out rows and the
/// metrics report under `cfg.out`. A numeric abort is reported as an error
/// after all artifacts are written.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let loaded = load_data(cfg)?;
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), cfg)?;
    write_json(&cfg.out.join(MANIFEST_FILE), &loaded.manifest)?;

    let mut records = Vec::new();
    let mut statuses = Vec::new();
    let mut best_metrics = Vec::new();
    let mut final_train_losses = Vec::new();
    for index in 0..cfg.split.n_splits {
        let out = train_split(cfg, &loaded, index)?;
        let dir = split_dir(&cfg.out, index);
        ensure_dir(&dir)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &out.checkpoint)?;
        write_history(&dir.join(HISTORY_FILE), &out.history)?;
        out.test.write_csv(&dir.join(TEST_CSV))?;
        log::info!(
            "split {index}: es {:.5} nll {:.5} rmse {:.5}",
            out.record.es,
            out.record.nll,
            out.record.rmse
        );
        records.push(out.record);
        statuses.push(out.status);
        best_metrics.push(out.best_metric);
        final_train_losses.push(out.final_train_loss);
    }
    let report = aggregate(&records, report_metadata(cfg, &loaded.manifest))?;
    report.write(&cfg.out.join(METRICS_JSONL), &cfg.out.join(METRICS_JSON))?;
    if let Some((i, TrainStatus::Aborted { step, reason })) = statuses
        .iter()
        .enumerate()
        .find(|(_, s)| matches!(s, TrainStatus::Aborted { .. }))
    {
        return Err(Error::Numeric(format!(
            "training aborted on split {i} at step {step}: {reason}"
        )));
    }
    Ok(TrainSummary {
        report,
        statuses,
        best_metrics,
        final_train_losses,
    })
}

/// Re-scores the checkpoints of a finished run. Each split is evaluated on
/// its saved held-out rows, or on `dataset` when given.
pub fn cmd_evaluate(run: &Path, dataset: Option<&Path>, out: &Path) -> Result<MetricsReport> {
    let cfg: RunConfig = read_json(&run.join(CONFIG_FILE))?;
    let manifest: DatasetManifest = read_json(&run.join(MANIFEST_FILE))?;
    let records = (0..cfg.split.n_splits)
        .into_par_iter()
        .map(|index| {
            let dir = split_dir(run, index);
            let ckpt = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            let model = ckpt.model()?;
            let rows = match dataset {
                Some(p) => load_csv(p, &manifest.target_columns)?,
                None => load_csv(&dir.join(TEST_CSV), &manifest.target_columns)?,
            };
            let rows = match &ckpt.whitening {
                Some(w) => rows.whitened_with(w)?,
                None => rows,
            };
            let mut rec = evaluate_model(
                &model,
                &rows,
                cfg.eval_m,
                derive_seed(cfg.seed, EVAL_STREAM + index as u64),
            )?;
            rec.split_index = index;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&records, report_metadata(&cfg, &manifest))?;
    ensure_dir(out)?;
    report.write(&out.join(EVAL_JSONL), &out.join(EVAL_JSON))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub point: GridPoint,
    pub seed: u64,
    /// Best validation metric, falling back to test ES without validation.
    pub score: Option<f64>,
    pub test: Option<MetricsRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub method: crate::evaluation::Method,
    pub runs: usize,
    pub skipped: Vec<GridPoint>,
    pub entries: Vec<LeaderboardEntry>,
    pub best: Option<LeaderboardEntry>,
}

/// Number of sweep workers: `SAMPLENET_THREADS` or the available cores.
pub fn sweep_threads() -> usize {
    std::env::var("SAMPLENET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains one configuration per valid grid point on split 0. Failed runs
/// are recorded and the sweep continues. With `dry_run` nothing is trained.
pub fn cmd_sweep(cfg: &RunConfig, dry_run: bool) -> Result<Leaderboard> {
    cfg.validate()?;
    let (points, skipped) = expand_grid(&cfg.sweep, cfg.method, cfg)?;
    if !skipped.is_empty() {
        let mut pairs: Vec<(usize, usize)> = skipped.iter().map(|p| (p.m, p.k)).collect();
        pairs.dedup();
        log::warn!("skipping {} grid points with K > M: (M, K) in {pairs:?}", skipped.len());
    }
    ensure_dir(&cfg.out)?;
    let run_point = |p: &GridPoint| -> LeaderboardEntry {
        let mut run = cfg.clone();
        p.apply(&mut run);
        run.seed = derive_seed(cfg.seed, p.index as u64);
        run.data_seed = Some(cfg.data_seed());
        run.split.n_splits = 1;
        run.out = cfg.out.join(format!("run{:04}", p.index));
        let seed = run.seed;
        if dry_run {
            return LeaderboardEntry { point: *p, seed, score: None, test: None, error: None };
        }
        match run.validate().and_then(|_| cmd_train(&run)) {
            Ok(summary) => {
                let rec = summary.report.records[0].clone();
                LeaderboardEntry {
                    point: *p,
                    seed,
                    score: Some(summary.best_metrics[0].unwrap_or(rec.es)),
                    test: Some(rec),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("grid point {} failed: {e}", p.index);
                LeaderboardEntry { point: *p, seed, score: None, test: None, error: Some(e.to_string()) }
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut entries: Vec<LeaderboardEntry> = pool.install(|| points.par_iter().map(run_point).collect());
    entries.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.point.index.cmp(&b.point.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.point.index.cmp(&b.point.index),
    });
    let best = entries.iter().find(|e| e.score.is_some()).cloned();
    let board = Leaderboard {
        method: cfg.method,
        runs: points.len(),
        skipped,
        entries,
        best,
    };
    write_json(&cfg.out.join(LEADERBOARD_FILE), &board)?;
    Ok(board)
}
