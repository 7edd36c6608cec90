use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::loss::combined_loss;
use super::mlp::{Head, SampleNetModel};
use crate::data::Dataset;
use crate::diffmath::{Rng, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{validation_score, Method};
use crate::scoring::{beta_nll, BaselineConfig, LossConfig};
use crate::transport::SinkhornStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    Es,
    Nll,
}

/// What a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Objective {
    #[serde(rename = "samplenet")]
    SampleNet(LossConfig),
    BetaNll(BaselineConfig),
}

impl Objective {
    pub fn method(&self) -> Method {
        match self {
            Objective::SampleNet(_) => Method::SampleNet,
            Objective::BetaNll(_) => Method::BetaNll,
        }
    }

    /// ES for sample models, NLL for variance networks.
    pub fn default_metric(&self) -> ValidationMetric {
        match self {
            Objective::SampleNet(_) => ValidationMetric::Es,
            Objective::BetaNll(_) => ValidationMetric::Nll,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub max_steps: usize,
    /// Inputs per step; at or above the dataset size every step is full batch.
    pub minibatch_size: usize,
    pub learning_rate: f64,
    /// Steps between validation checks.
    pub check_every: usize,
    /// Checks without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub metric: Option<ValidationMetric>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            max_steps: 2500,
            minibatch_size: 256,
            learning_rate: 1e-3,
            check_every: 100,
            patience: 10,
            metric: None,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be at least 1".into()));
        }
        if self.check_every == 0 {
            return Err(Error::Config("check_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HistoryEntry {
    Step {
        step: usize,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        energy: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        regularizer: Option<f64>,
    },
    Validation {
        step: usize,
        metric: ValidationMetric,
        value: f64,
        /// Best value seen so far, including this check.
        best: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    EarlyStopped { step: usize },
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Best-validation snapshot, or the final (last good) parameters when no
    /// validation set was given.
    pub model: SampleNetModel,
    pub history: Vec<HistoryEntry>,
    pub status: TrainStatus,
    pub best_step: Option<usize>,
    pub best_metric: Option<f64>,
    pub steps_run: usize,
    pub sinkhorn: SinkhornStats,
}

impl TrainResult {
    /// Mean train loss of the last `window` steps.
    pub fn final_train_loss(&self, window: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .history
            .iter()
            .filter_map(|h| match h {
                HistoryEntry::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect();
        let tail = &losses[losses.len().saturating_sub(window.max(1))..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

fn check_compat(model: &SampleNetModel, set: &Dataset, objective: &Objective) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.config();
    if set.input_dim() != cfg.input_dim || set.output_dim() != cfg.head.output_dim() {
        return Err(Error::Shape(format!(
            "dataset is {}→{} but the model is {}→{}",
            set.input_dim(),
            set.output_dim(),
            cfg.input_dim,
            cfg.head.output_dim()
        )));
    }
    match (objective, cfg.head) {
        (Objective::SampleNet(loss), Head::Samples { m, .. }) => {
            loss.validate()?;
            if loss.m != m {
                return Err(Error::Config(format!(
                    "loss expects M = {} but the head emits {m}",
                    loss.m
                )));
            }
        }
        (Objective::BetaNll(b), Head::Gaussian { .. }) => b.validate()?,
        _ => {
            return Err(Error::Config(
                "objective does not match the model head".into(),
            ))
        }
    }
    Ok(())
}

struct StepOutcome {
    loss: f64,
    energy: Option<f64>,
    regularizer: Option<f64>,
    grads: Vec<Vec<f64>>,
    stats: SinkhornStats,
}

fn loss_and_grads(
    model: &SampleNetModel,
    batch: &Dataset,
    objective: &Objective,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let (loss, energy, regularizer, leaves, stats): (Var<'_>, _, _, _, _) = match objective {
        Objective::SampleNet(cfg) => {
            let (samples, leaves) = model.forward_samples_var(&tape, batch.x())?;
            let out = combined_loss(samples, batch.y(), cfg, rng)?;
            let energy = Some(out.energy.item());
            let reg = out.regularizer.map(|r| r.item());
            (out.total, energy, reg, leaves, out.stats)
        }
        Objective::BetaNll(cfg) => {
            let (mean, var, leaves) = model.forward_gaussian_var(&tape, batch.x())?;
            let loss = beta_nll(mean, var, batch.y(), cfg.beta)?;
            (loss, None, None, leaves, SinkhornStats::default())
        }
    };
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok(StepOutcome {
        loss: value,
        energy,
        regularizer,
        grads: leaves.iter().map(|&l| grads.get_or_zeros(l)).collect(),
        stats,
    })
}

/// Minimizes the objective with Adam. With a validation set, the metric is
/// checked every `check_every` steps and the best snapshot is returned.
pub fn train(
    model: &SampleNetModel,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    objective: &Objective,
    sched: &TrainSchedule,
) -> Result<TrainResult> {
    sched.validate()?;
    check_compat(model, train_set, objective)?;
    if let Some(val) = val_set {
        check_compat(model, val, objective)?;
    }
    let metric = sched.metric.unwrap_or_else(|| objective.default_metric());
    let mut current = model.clone();
    let mut adam = AdamState::new(sched.learning_rate);
    let mut batch_rng = Rng::with_stream(sched.seed, 1);
    let mut loss_rng = Rng::with_stream(sched.seed, 2);
    let eval_seed = crate::diffmath::derive_seed(sched.seed, 3);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, SampleNetModel)> = None;
    let mut stale_checks = 0;
    let mut status = TrainStatus::Completed;
    let mut sinkhorn = SinkhornStats::default();
    let mut steps_run = 0;
    let n = train_set.len();

    for step in 1..=sched.max_steps {
        let sub;
        let batch = if sched.minibatch_size >= n {
            train_set
        } else {
            let mut idx = batch_rng.choose_without_replacement(n, sched.minibatch_size);
            idx.sort_unstable();
            sub = train_set.subset(&idx);
            &sub
        };
        let outcome = match loss_and_grads(&current, batch, objective, &mut loss_rng) {
            Ok(o) => o,
            Err(Error::Numeric(reason)) => {
                status = TrainStatus::Aborted { step, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        if let Err(Error::Numeric(reason)) = adam.step(&mut current.params_mut(), &outcome.grads) {
            status = TrainStatus::Aborted { step, reason };
            break;
        }
        steps_run = step;
        sinkhorn.divergences += outcome.stats.divergences;
        sinkhorn.degenerate_skipped += outcome.stats.degenerate_skipped;
        sinkhorn.unconverged_solves += outcome.stats.unconverged_solves;
        history.push(HistoryEntry::Step {
            step,
            loss: outcome.loss,
            energy: outcome.energy,
            regularizer: outcome.regularizer,
        });

        let Some(val) = val_set else { continue };
        if step % sched.check_every != 0 && step != sched.max_steps {
            continue;
        }
        let value = validation_score(&current, val, metric, eval_seed)?;
        let improved = value.is_finite() && best.as_ref().is_none_or(|(_, b, _)| value < *b);
        if improved {
            best = Some((step, value, current.clone()));
            stale_checks = 0;
        } else {
            stale_checks += 1;
        }
        history.push(HistoryEntry::Validation {
            step,
            metric,
            value,
            best: best.as_ref().map_or(value, |b| b.1),
        });
        if sched.patience > 0 && stale_checks >= sched.patience {
            status = TrainStatus::EarlyStopped { step };
            break;
        }
    }

    let (best_step, best_metric, model) = match best {
        Some((s, v, m)) => (Some(s), Some(v), m),
        None => (None, None, current),
    };
    Ok(TrainResult {
        model,
        history,
        status,
        best_step,
        best_metric,
        steps_run,
        sinkhorn,
    })
}
