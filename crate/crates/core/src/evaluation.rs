//! Per-split evaluation, aggregation across splits and the KS comparison
//! used to mark top performers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffmath::{Distribution, Rng, Tensor};
use crate::error::{Error, Result};
use crate::network::{Head, SampleNetModel, ValidationMetric};
use crate::scoring::{energy_score, gaussian_nll, rmse};
use crate::summaries::batch_moments;

pub const METRICS_SCHEMA: &str = "samplenet-metrics/1";

/// Default number of draws taken from a Gaussian head when it is scored with ES.
pub const DEFAULT_BASELINE_EVAL_M: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "samplenet")]
    SampleNet,
    #[serde(rename = "beta_nll")]
    BetaNll,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SampleNet => "samplenet",
            Method::BetaNll => "beta_nll",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samplenet" => Ok(Method::SampleNet),
            "beta_nll" => Ok(Method::BetaNll),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Es,
    Nll,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Es, Metric::Nll, Metric::Rmse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Es => "es",
            Metric::Nll => "nll",
            Metric::Rmse => "rmse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split_index: usize,
    pub es: f64,
    pub nll: f64,
    pub rmse: f64,
    pub n_test: usize,
}

impl MetricsRecord {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Es => self.es,
            Metric::Nll => self.nll,
            Metric::Rmse => self.rmse,
        }
    }
}

/// `[N, M, d]` predictive samples. Sample heads are used as-is; Gaussian
/// heads are sampled `eval_m` times with a seeded generator.
pub fn predictive_samples(
    model: &SampleNetModel,
    x: &Tensor,
    eval_m: Option<usize>,
    seed: u64,
) -> Result<Tensor> {
    match model.config().head {
        Head::Samples { .. } => model.forward_samples(x),
        Head::Gaussian { d } => {
            let m = eval_m.unwrap_or(DEFAULT_BASELINE_EVAL_M);
            let (mean, var) = model.forward_gaussian(x)?;
            let n = x.rows();
            let z = Rng::new(seed).draw(Distribution::StandardNormal, &[n, m, d])?;
            let mut data = z.into_data();
            for i in 0..n {
                for (j, v) in data[i * m * d..(i + 1) * m * d].iter_mut().enumerate() {
                    let k = i * d + j % d;
                    *v = mean.data()[k] + var.data()[k].sqrt() * *v;
                }
            }
            Tensor::new(vec![n, m, d], data)
        }
    }
}

/// Mean and variance used for NLL and RMSE: sample moments for sample
/// heads, the predicted Gaussian otherwise.
pub fn predictive_moments(model: &SampleNetModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    match model.config().head {
        Head::Samples { .. } => batch_moments(&model.forward_samples(x)?),
        Head::Gaussian { .. } => model.forward_gaussian(x),
    }
}

pub fn evaluate_model(
    model: &SampleNetModel,
    test: &Dataset,
    eval_m: Option<usize>,
    seed: u64,
) -> Result<MetricsRecord> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let samples = predictive_samples(model, test.x(), eval_m, seed)?;
    let (mean, var) = predictive_moments(model, test.x())?;
    Ok(MetricsRecord {
        split_index: 0,
        es: energy_score(&samples, test.y())?,
        nll: gaussian_nll(&mean, &var, test.y())?,
        rmse: rmse(&mean, test.y())?,
        n_test: test.len(),
    })
}

pub(crate) fn validation_score(
    model: &SampleNetModel,
    val: &Dataset,
    metric: ValidationMetric,
    seed: u64,
) -> Result<f64> {
    match metric {
        ValidationMetric::Es => {
            energy_score(&predictive_samples(model, val.x(), None, seed)?, val.y())
        }
        ValidationMetric::Nll => {
            let (mean, var) = predictive_moments(model, val.x())?;
            gaussian_nll(&mean, &var, val.y())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    /// Dataset, method, loss settings, seeds.
    pub metadata: serde_json::Value,
    pub records: Vec<MetricsRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

/// Mean and 1/(n−1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Aggregate { mean, std }
}

/// Folds per-split records in split order.
pub fn aggregate(records: &[MetricsRecord], metadata: serde_json::Value) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Contract("aggregate needs at least one record".into()));
    }
    let mut records = records.to_vec();
    records.sort_by_key(|r| r.split_index);
    let aggregates = Metric::ALL
        .iter()
        .map(|&m| {
            let values: Vec<f64> = records.iter().map(|r| r.get(m)).collect();
            (m.name().to_string(), mean_std(&values))
        })
        .collect();
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.into(),
        metadata,
        records,
        aggregates,
    })
}

impl MetricsReport {
    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.records.iter().map(|r| r.get(metric)).collect()
    }

    /// One JSON object per split record, each tagged with the schema.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let mut v = serde_json::to_value(r)?;
            v["schema"] = serde_json::Value::String(self.schema.clone());
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, jsonl: &Path, summary: &Path) -> Result<()> {
        std::fs::write(jsonl, self.to_jsonl()?).map_err(|e| Error::io(jsonl, e))?;
        let mut f = std::fs::File::create(summary).map_err(|e| Error::io(summary, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(summary, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// P(K > λ) for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=100)
            .map(|k| ((2 * k - 1) as f64).powi(2) * c)
            .map(f64::exp)
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        1.0 - cdf
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// Two-sample KS statistic with an asymptotic p-value.
pub fn ks_two_sided(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract("each KS sample needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain("KS samples contain NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult {
        d,
        p_value: kolmogorov_survival(ne.sqrt() * d),
        n_a: na,
        n_b: nb,
    })
}

/// The best-mean method plus every method whose per-split values are not
/// distinguishable from it at `alpha` (lower metric is better).
pub fn mark_top_performers(
    reports: &[(String, MetricsReport)],
    metric: Metric,
    alpha: f64,
) -> Result<BTreeSet<String>> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Contract("no reports to compare".into()));
    };
    let splits = first.records.len();
    if reports.iter().any(|(_, r)| r.records.len() != splits) {
        return Err(Error::Protocol("methods were evaluated on different split counts".into()));
    }
    let means: Vec<f64> = reports
        .iter()
        .map(|(_, r)| mean_std(&r.values(metric)).mean)
        .collect();
    let best = (0..reports.len())
        .min_by(|&a, &b| means[a].total_cmp(&means[b]))
        .unwrap_or(0);
    let best_values = reports[best].1.values(metric);
    let mut marked = BTreeSet::from([reports[best].0.clone()]);
    for (i, (name, report)) in reports.iter().enumerate() {
        if i == best {
            continue;
        }
        let values = report.values(metric);
        let indistinct = if values.len() < 2 {
            values == best_values
        } else {
            ks_two_sided(&best_values, &values)?.p_value > alpha
        };
        if indistinct {
            marked.insert(name.clone());
        }
    }
    Ok(marked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer, MlpConfig};
    use proptest::prelude::*;

    fn record(i: usize, es: f64) -> MetricsRecord {
        MetricsRecord { split_index: i, es, nll: es + 1.0, rmse: es * 2.0, n_test: 10 }
    }

    /// A Gaussian head that predicts mean = x and var = softplus(b) + floor.
    fn identity_gaussian(var_bias: f64) -> SampleNetModel {
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_sizes: vec![],
            activation: Activation::Tanh,
            head: Head::Gaussian { d: 1 },
        };
        let layer = Layer {
            weight: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.0, var_bias]).unwrap(),
        };
        SampleNetModel::from_layers(cfg, vec![layer]).unwrap()
    }

    fn line_set(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
        Dataset::new(
            Tensor::new(vec![n, 1], x.clone()).unwrap(),
            Tensor::new(vec![n, 1], x).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn unit_variance_baseline_nll() {
        // softplus(b) + 1e-6 = 1
        let b = ((1.0f64 - 1e-6).exp() - 1.0).ln();
        let rec = evaluate_model(&identity_gaussian(b), &line_set(7), None, 0).unwrap();
        assert!((rec.nll - 0.918_938_533_204_672_7).abs() < 1e-9);
        assert!(rec.rmse.abs() < 1e-15);
    }

    #[test]
    fn perfect_sample_model_scores_zero() {
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_sizes: vec![],
            activation: Activation::Tanh,
            head: Head::Samples { m: 3, d: 1 },
        };
        let layer = Layer {
            weight: Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap(),
            bias: Tensor::new(vec![3], vec![0.0; 3]).unwrap(),
        };
        let model = SampleNetModel::from_layers(cfg, vec![layer]).unwrap();
        let rec = evaluate_model(&model, &line_set(5), None, 0).unwrap();
        assert_eq!(rec.es, 0.0);
        assert_eq!(rec.rmse, 0.0);
        assert_eq!(rec, evaluate_model(&model, &line_set(5), None, 0).unwrap());
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let rep = aggregate(&[record(1, 3.0), record(0, 1.0)], serde_json::Value::Null).unwrap();
        let es = rep.aggregates["es"];
        assert_eq!(es.mean, 2.0);
        assert!((es.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(rep.records[0].split_index, 0);
        let one = aggregate(&[record(0, 5.0)], serde_json::Value::Null).unwrap();
        assert_eq!(one.aggregates["rmse"].std, 0.0);
        let swapped = aggregate(&[record(0, 1.0), record(1, 3.0)], serde_json::Value::Null).unwrap();
        assert_eq!(rep, swapped);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [0.3, 1.0, 2.0, 5.0];
        let r = ks_two_sided(&a, &a).unwrap();
        assert_eq!((r.d, r.p_value), (0.0, 1.0));
        let r = ks_two_sided(&[-3.0, -2.0, -1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.d, 1.0);
        assert!(ks_two_sided(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Fraction of equal-size relabelings of the pooled values whose D reaches
    /// the observed one.
    fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let observed = ks_two_sided(a, b).unwrap().d;
        let (mut hits, mut total) = (0, 0);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
                pooled.iter().copied().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
            let x: Vec<f64> = x.into_iter().map(|p| p.1).collect();
            let y: Vec<f64> = y.into_iter().map(|p| p.1).collect();
            total += 1;
            if ks_two_sided(&x, &y).unwrap().d >= observed - 1e-12 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn ks_four_vs_four() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let r = ks_two_sided(&a, &b).unwrap();
        assert!((r.d - 0.25).abs() < 1e-15);
        assert!((r.p_value - permutation_p(&a, &b)).abs() < 0.05);
    }

    #[test]
    fn kolmogorov_series_agree_at_the_seam() {
        let lo = kolmogorov_survival(1.0 - 1e-9);
        let hi = kolmogorov_survival(1.0);
        assert!((lo - hi).abs() < 1e-8);
        // P(K > 1.36) ≈ 0.049
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 1e-3);
    }

    fn report(values: &[f64]) -> MetricsReport {
        let recs: Vec<_> = values.iter().enumerate().map(|(i, &v)| record(i, v)).collect();
        aggregate(&recs, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn top_performer_marking() {
        let a = report(&[1.0, 1.1, 0.9, 1.05, 0.95]);
        let same = vec![("a".to_string(), a.clone()), ("b".to_string(), a.clone())];
        assert_eq!(mark_top_performers(&same, Metric::Es, 0.05).unwrap().len(), 2);

        let far = report(&[11.0, 11.1, 10.9, 11.05, 10.95]);
        let reps = vec![("a".to_string(), a.clone()), ("far".to_string(), far)];
        assert_eq!(
            mark_top_performers(&reps, Metric::Es, 0.05).unwrap(),
            BTreeSet::from(["a".to_string()])
        );

        let single = vec![("a".to_string(), a.clone())];
        assert_eq!(mark_top_performers(&single, Metric::Es, 0.05).unwrap().len(), 1);

        let short = vec![("a".to_string(), a), ("s".to_string(), report(&[1.0, 2.0]))];
        assert!(matches!(
            mark_top_performers(&short, Metric::Es, 0.05),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn jsonl_has_one_line_per_split() {
        let rep = report(&[1.0, 2.0, 3.0]);
        let text = rep.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["schema"], METRICS_SCHEMA);
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_rank_based(
            a in prop::collection::vec(-5.0f64..5.0, 2..20),
            b in prop::collection::vec(-5.0f64..5.0, 2..20),
        ) {
            let ab = ks_two_sided(&a, &b).unwrap();
            let ba = ks_two_sided(&b, &a).unwrap();
            prop_assert_eq!(ab.d, ba.d);
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert!((0.0..=1.0).contains(&ab.d));
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
            let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
            prop_assert!((ks_two_sided(&f(&a), &f(&b)).unwrap().d - ab.d).abs() < 1e-12);
        }

        #[test]
        fn best_mean_is_always_marked(
            a in prop::collection::vec(0.0f64..5.0, 3),
            b in prop::collection::vec(0.0f64..5.0, 3),
        ) {
            let ra = report(&a);
            let rb = report(&b);
            let best = if ra.aggregates["es"].mean <= rb.aggregates["es"].mean { "a" } else { "b" };
            let reps = vec![("a".to_string(), ra), ("b".to_string(), rb)];
            prop_assert!(mark_top_performers(&reps, Metric::Es, 0.05).unwrap().contains(best));
        }
    }
}
