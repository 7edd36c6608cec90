//! Proper scoring rules (Energy Score, Gaussian NLL), the β-NLL training
//! loss and RMSE.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffmath::{pairwise_distance, DistancePower, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::transport::{Prior, SinkhornConfig};

/// Hyperparameters of the SampleNet objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// predicted samples per input
    pub m: usize,
    /// subset size per repetition
    pub k: usize,
    /// repetitions
    pub l: usize,
    /// regularization strength
    pub eta: f64,
    pub prior: Prior,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m: 100,
            k: 100,
            l: 1,
            eta: 0.0,
            prior: Prior::Gaussian,
            epsilon: 0.0025,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!(
                "need 1 ≤ K ≤ M, got K = {}, M = {}",
                self.k, self.m
            )));
        }
        if self.l == 0 {
            return Err(Error::Config("L must be at least 1".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_iters,
            tol: self.sinkhorn_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub beta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn sample_dims(samples: &[usize], targets: &[usize]) -> Result<(usize, usize, usize)> {
    match (samples, targets) {
        ([n, m, d], [tn, td]) if n == tn && d == td && *m >= 1 => Ok((*n, *m, *d)),
        _ => Err(Error::Shape(format!(
            "samples {samples:?} do not match targets {targets:?}"
        ))),
    }
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sample Energy Score averaged over inputs:
/// `(1/M) Σᵢ ‖ŷᵢ − y‖ − (1/2M²) Σᵢ Σⱼ ‖ŷᵢ − ŷⱼ‖`, diagonal terms included.
pub fn energy_score(samples: &Tensor, targets: &Tensor) -> Result<f64> {
    let (n, m, d) = sample_dims(samples.shape(), targets.shape())?;
    let s = samples.data();
    let mut total = 0.0;
    for row in 0..n {
        let set = &s[row * m * d..(row + 1) * m * d];
        let y = targets.row(row);
        let fit: f64 = set.chunks_exact(d).map(|p| norm(p, y)).sum::<f64>() / m as f64;
        let mut spread = 0.0;
        for i in 0..m {
            for j in 0..m {
                spread += norm(&set[i * d..(i + 1) * d], &set[j * d..(j + 1) * d]);
            }
        }
        total += fit - spread / (2.0 * (m * m) as f64);
    }
    Ok(total / n as f64)
}

/// Taped Energy Score of one `[K, d]` sample set against a `[1, d]` target.
pub fn set_energy_score<'t>(set: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let k = set.shape()[0] as f64;
    let fit = pairwise_distance(set, target, DistancePower::One)?.mean();
    let spread = pairwise_distance(set, set, DistancePower::One)?
        .sum()
        .scale(1.0 / (2.0 * k * k));
    Ok(fit.sub(spread))
}

/// Minibatch Energy Score: each input contributes the average over `l`
/// size-`k` subsets drawn without replacement; normalized by `1/(N·L)`.
pub fn minibatch_energy_score<'t>(
    samples: Var<'t>,
    targets: &Tensor,
    k: usize,
    l: usize,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let (n, m, d) = sample_dims(&samples.shape(), targets.shape())?;
    if k == 0 || k > m {
        return Err(Error::Config(format!("need 1 ≤ K ≤ M, got K = {k}, M = {m}")));
    }
    if l == 0 {
        return Err(Error::Config("L must be at least 1".into()));
    }
    let tape = samples.tape();
    let flat = samples.reshape(vec![n * m, d]);
    let mut terms = Vec::with_capacity(n * l);
    for row in 0..n {
        let target = tape.constant(vec![1, d], targets.row(row).to_vec());
        for _ in 0..l {
            let pick: Vec<usize> = rng
                .choose_without_replacement(m, k)
                .into_iter()
                .map(|i| row * m + i)
                .collect();
            terms.push(set_energy_score(flat.select_rows(&pick), target)?);
        }
    }
    Ok(Var::add_n(&terms).scale(1.0 / (n * l) as f64))
}

fn gaussian_dims(mean: &[usize], var: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    if mean != var || mean != targets || mean.len() != 2 {
        return Err(Error::Shape(format!(
            "mean {mean:?}, var {var:?} and targets {targets:?} must share an [N, d] shape"
        )));
    }
    Ok((mean[0], mean[1]))
}

fn check_variance(var: &[f64]) -> Result<()> {
    if let Some(v) = var.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("variance must be positive, got {v}")));
    }
    Ok(())
}

/// Factored Gaussian NLL, summed over output dims and averaged over inputs.
pub fn gaussian_nll(mean: &Tensor, var: &Tensor, targets: &Tensor) -> Result<f64> {
    let (n, _) = gaussian_dims(mean.shape(), var.shape(), targets.shape())?;
    check_variance(var.data())?;
    let total: f64 = mean
        .data()
        .iter()
        .zip(var.data())
        .zip(targets.data())
        .map(|((mu, v), y)| 0.5 * (2.0 * PI * v).ln() + (y - mu).powi(2) / (2.0 * v))
        .sum();
    Ok(total / n as f64)
}

/// β-NLL: each element's Gaussian NLL term weighted by `var^β`, with the
/// weight cut off from the graph. `β = 0` reproduces [`gaussian_nll`].
pub fn beta_nll<'t>(mean: Var<'t>, var: Var<'t>, targets: &Tensor, beta: f64) -> Result<Var<'t>> {
    let (n, d) = gaussian_dims(&mean.shape(), &var.shape(), targets.shape())?;
    let var_v = var.value();
    check_variance(&var_v)?;
    let tape = mean.tape();
    let y = tape.constant(vec![n, d], targets.data().to_vec());
    let log_term = var.scale(2.0 * PI).ln().scale(0.5);
    let fit_term = y.sub(mean).square().div(var.scale(2.0));
    let per_elem = log_term.add(fit_term);
    let weighted = if beta == 0.0 {
        per_elem
    } else {
        let w: Vec<f64> = var_v.iter().map(|v| v.powf(beta)).collect();
        per_elem.mul(tape.constant(vec![n, d], w))
    };
    Ok(weighted.sum().scale(1.0 / n as f64))
}

pub fn rmse(predictions: &Tensor, targets: &Tensor) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let sq: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}
