use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{SplitSpec, TOY_NOISE_STD};
use crate::error::{Error, Result};
use crate::evaluation::Method;
use crate::network::{Activation, Head, MlpConfig, Objective, TrainSchedule};
use crate::scoring::{BaselineConfig, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Unimodal,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n: usize,
    /// Rows on `y = x + 7` appended to the unimodal set.
    pub outliers: usize,
    pub noise_std: f64,
    /// Size of a separately generated clean test set; when unset the data
    /// is split instead.
    pub test_n: Option<usize>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            kind: ToyKind::Unimodal,
            n: 500,
            outliers: 0,
            noise_std: TOY_NOISE_STD,
            test_n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub path: PathBuf,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Toy(ToySpec),
    Csv(CsvSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![50],
            activation: Activation::Tanh,
        }
    }
}

/// Hyperparameter grid for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub m: Vec<usize>,
    pub k: Vec<usize>,
    pub l: Vec<usize>,
    pub eta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            m: vec![50, 100, 200, 400],
            k: vec![50, 100, 200],
            l: vec![1, 2, 3, 4],
            eta: vec![0.0, 0.1, 0.5, 1.0, 5.0],
            beta: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything a `train`, `evaluate` or `sweep` invocation needs. Every seed
/// used by a run is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub method: Method,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub baseline: BaselineConfig,
    pub schedule: TrainSchedule,
    pub split: SplitSpec,
    /// Fraction of each training split held out for validation; 0 disables
    /// validation and early stopping.
    pub validation_fraction: f64,
    /// Gaussian draws per input when a variance network is scored with ES.
    pub eval_m: Option<usize>,
    pub sweep: SweepGrid,
    pub seed: u64,
    /// Seed for data generation, splits and validation holdout; defaults to
    /// `seed`.
    pub data_seed: Option<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Toy(ToySpec::default()),
            method: Method::SampleNet,
            model: ModelSpec::default(),
            loss: LossConfig::default(),
            baseline: BaselineConfig::default(),
            schedule: TrainSchedule {
                learning_rate: 1e-2,
                ..Default::default()
            },
            split: SplitSpec::default(),
            validation_fraction: 0.1,
            eval_m: None,
            sweep: SweepGrid::default(),
            seed: 0,
            data_seed: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::SampleNet => self.loss.validate()?,
            Method::BetaNll => self.baseline.validate()?,
        }
        self.schedule.validate()?;
        self.split.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.model.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if let DatasetSource::Csv(csv) = &self.dataset {
            if csv.targets.is_empty() {
                return Err(Error::Config("csv dataset needs at least one target column".into()));
            }
        }
        if self.eval_m == Some(0) {
            return Err(Error::Config("eval_m must be positive".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn objective(&self) -> Objective {
        match self.method {
            Method::SampleNet => Objective::SampleNet(self.loss),
            Method::BetaNll => Objective::BetaNll(self.baseline),
        }
    }

    pub fn mlp_config(&self, input_dim: usize, output_dim: usize) -> MlpConfig {
        let head = match self.method {
            Method::SampleNet => Head::Samples {
                m: self.loss.m,
                d: output_dim,
            },
            Method::BetaNll => Head::Gaussian { d: output_dim },
        };
        MlpConfig {
            input_dim,
            hidden_sizes: self.model.hidden_sizes.clone(),
            activation: self.model.activation,
            head,
        }
    }

    /// Loss or baseline settings for the chosen method.
    pub fn method_settings(&self) -> Value {
        match self.method {
            Method::SampleNet => serde_json::to_value(self.loss),
            Method::BetaNll => serde_json::to_value(self.baseline),
        }
        .unwrap_or(Value::Null)
    }
}

/// Recursively overlays `patch` onto `base`. The `dataset` entry is replaced
/// wholesale so that a patch can switch sources.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if k != "dataset" => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node {
        Value::Object(map) => {
            map.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("cannot set `{path}` inside a non-object"))),
    }
}

/// Defaults, then the config file, then dotted overrides.
pub fn load_run_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)?;
        merge_json(&mut value, patch);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    Ok(cfg)
}

/// One valid grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub eta: f64,
    pub beta: f64,
}

/// Cartesian product of the grid for `method`. SampleNet points with
/// `K > M` are dropped and returned separately.
pub fn expand_grid(grid: &SweepGrid, method: Method, base: &RunConfig) -> Result<(Vec<GridPoint>, Vec<GridPoint>)> {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    match method {
        Method::SampleNet => {
            if grid.m.is_empty() || grid.k.is_empty() || grid.l.is_empty() || grid.eta.is_empty() {
                return Err(Error::Config("every sweep grid axis needs at least one value".into()));
            }
            for &m in &grid.m {
                for &k in &grid.k {
                    for &l in &grid.l {
                        for &eta in &grid.eta {
                            let p = GridPoint { index: kept.len(), m, k, l, eta, beta: base.baseline.beta };
                            if k > m {
                                skipped.push(GridPoint { index: skipped.len(), ..p });
                            } else {
                                kept.push(p);
                            }
                        }
                    }
                }
            }
        }
        Method::BetaNll => {
            if grid.beta.is_empty() {
                return Err(Error::Config("beta grid is empty".into()));
            }
            for &beta in &grid.beta {
                kept.push(GridPoint {
                    index: kept.len(),
                    m: base.loss.m,
                    k: base.loss.k,
                    l: base.loss.l,
                    eta: base.loss.eta,
                    beta,
                });
            }
        }
    }
    Ok((kept, skipped))
}

impl GridPoint {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.loss.m = self.m;
        cfg.loss.k = self.k;
        cfg.loss.l = self.l;
        cfg.loss.eta = self.eta;
        cfg.baseline.beta = self.beta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_run_config(
            None,
            &["loss.eta=0.5".into(), "method=beta_nll".into(), "model.hidden_sizes=[8,8]".into()],
        )
        .unwrap();
        assert_eq!(cfg.loss.eta, 0.5);
        assert_eq!(cfg.method, Method::BetaNll);
        assert_eq!(cfg.model.hidden_sizes, vec![8, 8]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(matches!(load_run_config(None, &["loss.eta".into()]), Err(Error::Config(_))));
        assert!(load_run_config(None, &["loss.bogus_key=1".into()]).is_err());
        assert!(load_run_config(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn dataset_patch_replaces_source() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        merge_json(
            &mut v,
            serde_json::json!({"dataset": {"csv": {"path": "d.csv", "targets": ["y"]}}}),
        );
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(cfg.dataset, DatasetSource::Csv(_)));
    }

    #[test]
    fn small_grid_counts() {
        let grid = SweepGrid { m: vec![50], k: vec![50], l: vec![1], eta: vec![0.0, 0.5], beta: vec![] };
        let (kept, skipped) = expand_grid(&grid, Method::SampleNet, &RunConfig::default()).unwrap();
        assert_eq!((kept.len(), skipped.len()), (2, 0));
        let grid = SweepGrid { m: vec![50], k: vec![200], ..grid };
        let (kept, skipped) = expand_grid(&grid, Method::SampleNet, &RunConfig::default()).unwrap();
        assert_eq!((kept.len(), skipped.len()), (0, 2));
    }

    #[test]
    fn full_grid_has_180_points() {
        let (kept, skipped) =
            expand_grid(&SweepGrid::default(), Method::SampleNet, &RunConfig::default()).unwrap();
        assert_eq!(kept.len(), 180);
        assert_eq!(skipped.len(), 60);
        assert!(kept.iter().all(|p| p.k <= p.m));
        assert!(kept.iter().enumerate().all(|(i, p)| p.index == i));
    }
}
