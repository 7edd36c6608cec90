//! Distribution summaries extracted from predicted sample sets.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Variance floor applied to sample moments.
pub const MOMENT_VAR_FLOOR: f64 = 1e-8;

/// Disjoint closed intervals covering at least `level` of the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    /// Fraction of samples inside the selected bins.
    pub achieved_mass: f64,
}

impl IntervalSet {
    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn contains(&self, v: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= v && v <= hi)
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Contract(format!("level must be in (0, 1), got {level}")));
    }
    Ok(())
}

/// Per-dimension mean and 1/(M−1) variance of an `[M, d]` sample set.
pub fn sample_moments(samples: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = samples.rows();
    if samples.shape().len() != 2 || m < 2 {
        return Err(Error::Contract(format!(
            "moments need an [M ≥ 2, d] sample set, got {:?}",
            samples.shape()
        )));
    }
    let d = samples.row_width();
    let mut mean = vec![0.0; d];
    for row in samples.data().chunks_exact(d) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for row in samples.data().chunks_exact(d) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu).powi(2);
        }
    }
    var.iter_mut()
        .for_each(|v| *v = (*v / (m - 1) as f64).max(MOMENT_VAR_FLOOR));
    Ok((mean, var))
}

/// Moments of every input in an `[N, M, d]` batch, as `[N, d]` tensors.
pub fn batch_moments(samples: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = samples.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [N, M, d], got {shape:?}")));
    }
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let mut means = Vec::with_capacity(n * d);
    let mut vars = Vec::with_capacity(n * d);
    for i in 0..n {
        let set = Tensor::new(vec![m, d], samples.row(i).to_vec())?;
        let (mu, v) = sample_moments(&set)?;
        means.extend(mu);
        vars.extend(v);
    }
    Ok((Tensor::new(vec![n, d], means)?, Tensor::new(vec![n, d], vars)?))
}

/// Linear-interpolation quantile of ascending `sorted` values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn central_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if samples.len() < 2 {
        return Err(Error::Contract("central interval needs at least 2 samples".into()));
    }
    let s = sorted_copy(samples);
    Ok((
        quantile_sorted(&s, (1.0 - level) / 2.0),
        quantile_sorted(&s, (1.0 + level) / 2.0),
    ))
}

struct Histogram {
    lo: f64,
    width: f64,
    counts: Vec<usize>,
}

impl Histogram {
    fn new(samples: &[f64], bins: usize) -> Self {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for &v in samples {
            let idx = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[idx.min(bins - 1)] += 1;
        }
        Self { lo, width, counts }
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width
    }

    fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width
    }
}

pub fn default_bins(m: usize) -> usize {
    ((m as f64).sqrt().ceil() as usize).max(1)
}

fn check_hist_input(samples: &[f64], bins: usize) -> Result<()> {
    if samples.len() < 10 {
        return Err(Error::Contract("histogram summaries need at least 10 samples".into()));
    }
    if bins == 0 {
        return Err(Error::Contract("bins must be at least 1".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("samples must be finite".into()));
    }
    Ok(())
}

/// Highest-density intervals by histogram thresholding. `bins` defaults to
/// ⌈√M⌉.
pub fn hpd_intervals(samples: &[f64], level: f64, bins: Option<usize>) -> Result<IntervalSet> {
    check_level(level)?;
    let bins = bins.unwrap_or_else(|| default_bins(samples.len()));
    check_hist_input(samples, bins)?;
    let hist = Histogram::new(samples, bins);
    let total = samples.len() as f64;

    let mut order: Vec<usize> = (0..bins).collect();
    order.sort_by(|&a, &b| hist.counts[b].cmp(&hist.counts[a]));
    let mut selected = vec![false; bins];
    let mut mass = 0usize;
    for i in order {
        if mass as f64 / total >= level {
            break;
        }
        selected[i] = true;
        mass += hist.counts[i];
    }

    let mut intervals = Vec::new();
    let mut i = 0;
    while i < bins {
        if !selected[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < bins && selected[i] {
            i += 1;
        }
        intervals.push((hist.edge(start), hist.edge(i)));
    }
    Ok(IntervalSet {
        intervals,
        level,
        achieved_mass: mass as f64 / total,
    })
}

/// Center of the fullest histogram bin; ties go to the lowest bin.
pub fn mode_estimate(samples: &[f64], bins: Option<usize>) -> Result<f64> {
    let bins = bins.unwrap_or_else(|| default_bins(samples.len()));
    check_hist_input(samples, bins)?;
    let hist = Histogram::new(samples, bins);
    let mut best = 0;
    for (i, &c) in hist.counts.iter().enumerate() {
        if c > hist.counts[best] {
            best = i;
        }
    }
    Ok(hist.center(best))
}
