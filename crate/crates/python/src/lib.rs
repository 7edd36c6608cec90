//! Python bindings. Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use samplenet_core::data::{gen_multimodal_toy, gen_unimodal_toy, Dataset, TOY_NOISE_STD};
use samplenet_core::diffmath::{Rng, Tensor};
use samplenet_core::evaluation::{evaluate_model, predictive_samples};
use samplenet_core::network::{
    load_checkpoint, save_checkpoint, train, Activation, Checkpoint, Head, HistoryEntry, MlpConfig,
    Objective, SampleNetModel, TrainSchedule,
};
use samplenet_core::scoring::{BaselineConfig, LossConfig};
use samplenet_core::transport::{PointCloud, Prior, SinkhornConfig};
use samplenet_core::{evaluation, scoring, summaries, transport, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Graph(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected a non-empty 2-d list"));
    }
    Tensor::from_rows(&rows).map_err(py_err)
}

fn cube(sets: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let n = sets.len();
    let m = sets.first().map_or(0, Vec::len);
    let d = sets.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * m * d);
    for set in &sets {
        if set.len() != m || set.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("samples must be a rectangular [N][M][d] list"));
        }
        set.iter().for_each(|r| data.extend_from_slice(r));
    }
    Tensor::new(vec![n, m, d], data).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.row_width().max(1)).map(<[f64]>::to_vec).collect()
}

fn to_cube(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let d = *t.shape().last().unwrap();
    (0..t.rows())
        .map(|i| t.row(i).chunks(d).map(<[f64]>::to_vec).collect())
        .collect()
}

fn parse_prior(name: &str) -> PyResult<Prior> {
    name.parse().map_err(py_err)
}

/// Energy score of `[N][M][d]` samples against `[N][d]` targets.
#[pyfunction]
fn energy_score(samples: Vec<Vec<Vec<f64>>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
    scoring::energy_score(&cube(samples)?, &matrix(targets)?).map_err(py_err)
}

#[pyfunction]
fn gaussian_nll(mean: Vec<Vec<f64>>, var: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
    scoring::gaussian_nll(&matrix(mean)?, &matrix(var)?, &matrix(targets)?).map_err(py_err)
}

/// Debiased Sinkhorn divergence between two uniformly weighted point sets.
#[pyfunction]
#[pyo3(signature = (a, b, epsilon = 0.0025, max_iters = 200, tol = 1e-6))]
fn sinkhorn_divergence(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, epsilon: f64, max_iters: usize, tol: f64) -> PyResult<f64> {
    let a = PointCloud::uniform(matrix(a)?).map_err(py_err)?;
    let b = PointCloud::uniform(matrix(b)?).map_err(py_err)?;
    let cfg = SinkhornConfig { epsilon, max_iters, tol };
    transport::sinkhorn_divergence(&a, &b, &cfg).map_err(py_err)
}

/// Per-dimension normalization of an `[M][d]` sample set; returns the
/// normalized samples and the collapsed-dimension flags.
#[pyfunction]
#[pyo3(signature = (samples, prior = "gaussian"))]
fn normalize_samples(samples: Vec<Vec<f64>>, prior: &str) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let (t, flags) = transport::normalize_tensor(&matrix(samples)?, parse_prior(prior)?).map_err(py_err)?;
    Ok((to_rows(&t), flags))
}

#[pyfunction]
fn sample_moments(samples: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    summaries::sample_moments(&matrix(samples)?).map_err(py_err)
}

#[pyfunction]
fn central_interval(values: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    summaries::central_interval(&values, level).map_err(py_err)
}

/// Returns `(intervals, achieved_mass)`.
#[pyfunction]
#[pyo3(signature = (values, level, bins = None))]
fn hpd_intervals(values: Vec<f64>, level: f64, bins: Option<usize>) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let set = summaries::hpd_intervals(&values, level, bins).map_err(py_err)?;
    Ok((set.intervals, set.achieved_mass))
}

#[pyfunction]
#[pyo3(signature = (values, bins = None))]
fn mode_estimate(values: Vec<f64>, bins: Option<usize>) -> PyResult<f64> {
    summaries::mode_estimate(&values, bins).map_err(py_err)
}

/// Two-sample KS test; returns `(D, p_value)`.
#[pyfunction]
fn ks_two_sided(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = evaluation::ks_two_sided(&a, &b).map_err(py_err)?;
    Ok((r.d, r.p_value))
}

fn columns(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    (ds.x().data().to_vec(), ds.y().data().to_vec())
}

/// Unimodal sinusoid toy; returns `(x, y)` with outliers appended last.
#[pyfunction]
#[pyo3(signature = (n, outliers = 0, seed = 0, noise_std = TOY_NOISE_STD))]
fn gen_unimodal(n: usize, outliers: usize, seed: u64, noise_std: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let ds = gen_unimodal_toy(n, outliers, noise_std, &mut Rng::new(seed)).map_err(py_err)?;
    Ok(columns(&ds))
}

#[pyfunction]
#[pyo3(signature = (n, seed = 0, noise_std = TOY_NOISE_STD))]
fn gen_multimodal(n: usize, seed: u64, noise_std: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let ds = gen_multimodal_toy(n, noise_std, &mut Rng::new(seed)).map_err(py_err)?;
    Ok(columns(&ds))
}

/// A SampleNet (sample head) or variance network (Gaussian head).
#[pyclass(name = "Model", module = "samplenet", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: SampleNetModel,
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Dataset> {
    Dataset::new(matrix(x)?, matrix(y)?).map_err(py_err)
}

#[pymethods]
impl PyModel {
    /// `m` samples per input, or a Gaussian head when `gaussian` is true.
    #[new]
    #[pyo3(signature = (input_dim, output_dim = 1, hidden_sizes = vec![50], m = 100, activation = "tanh", gaussian = false, seed = 0))]
    fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_sizes: Vec<usize>,
        m: usize,
        activation: &str,
        gaussian: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let activation = match activation {
            "tanh" => Activation::Tanh,
            "elu" => Activation::Elu,
            other => return Err(PyValueError::new_err(format!("unknown activation `{other}`"))),
        };
        let head = if gaussian {
            Head::Gaussian { d: output_dim }
        } else {
            Head::Samples { m, d: output_dim }
        };
        let cfg = MlpConfig { input_dim, hidden_sizes, activation, head };
        let inner = SampleNetModel::new(cfg, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn is_gaussian(&self) -> bool {
        matches!(self.inner.config().head, Head::Gaussian { .. })
    }

    /// `[N][M][d]` predictive samples; Gaussian heads draw `m` samples.
    #[pyo3(signature = (x, m = None, seed = 0))]
    fn sample(&self, x: Vec<Vec<f64>>, m: Option<usize>, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let s = predictive_samples(&self.inner, &matrix(x)?, m, seed).map_err(py_err)?;
        Ok(to_cube(&s))
    }

    /// Mean and variance rows of a Gaussian head.
    fn predict_gaussian(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (mean, var) = self.inner.forward_gaussian(&matrix(x)?).map_err(py_err)?;
        Ok((to_rows(&mean), to_rows(&var)))
    }

    /// Trains in place and returns the per-step losses. Sample heads use
    /// the energy score plus `eta` times the Sinkhorn term; Gaussian heads
    /// use β-NLL.
    #[pyo3(signature = (x, y, steps = 2500, lr = 1e-2, batch = 256, k = None, l = 1, eta = 0.0,
                        prior = "gaussian", sinkhorn_iters = 200, beta = 0.5, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        steps: usize,
        lr: f64,
        batch: usize,
        k: Option<usize>,
        l: usize,
        eta: f64,
        prior: &str,
        sinkhorn_iters: usize,
        beta: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data = dataset(x, y)?;
        let objective = match self.inner.config().head {
            Head::Samples { m, .. } => Objective::SampleNet(LossConfig {
                m,
                k: k.unwrap_or(m),
                l,
                eta,
                prior: parse_prior(prior)?,
                sinkhorn_iters,
                ..Default::default()
            }),
            Head::Gaussian { .. } => Objective::BetaNll(BaselineConfig { beta }),
        };
        let sched = TrainSchedule {
            max_steps: steps,
            minibatch_size: batch,
            learning_rate: lr,
            seed,
            ..Default::default()
        };
        let model = self.inner.clone();
        let result = py
            .detach(|| train(&model, &data, None, &objective, &sched))
            .map_err(py_err)?;
        self.inner = result.model;
        Ok(result
            .history
            .iter()
            .filter_map(|h| match h {
                HistoryEntry::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect())
    }

    /// `{"es", "nll", "rmse"}` on the given rows.
    #[pyo3(signature = (x, y, m = None, seed = 0))]
    fn evaluate(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, m: Option<usize>, seed: u64) -> PyResult<(f64, f64, f64)> {
        let rec = evaluate_model(&self.inner, &dataset(x, y)?, m, seed).map_err(py_err)?;
        Ok((rec.es, rec.nll, rec.rmse))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_model(&self.inner, None, None)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(|c| c.model()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(input_dim={}, hidden_sizes={:?}, head={:?})",
            c.input_dim, c.hidden_sizes, c.head
        )
    }
}

#[pymodule]
fn samplenet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_nll, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_samples, m)?)?;
    m.add_function(wrap_pyfunction!(sample_moments, m)?)?;
    m.add_function(wrap_pyfunction!(central_interval, m)?)?;
    m.add_function(wrap_pyfunction!(hpd_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(mode_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(ks_two_sided, m)?)?;
    m.add_function(wrap_pyfunction!(gen_unimodal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_multimodal, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_round_trip() {
        let sets = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]];
        let t = cube(sets.clone()).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(to_cube(&t), sets);
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0], vec![2.5]];
        assert_eq!(to_rows(&matrix(rows.clone()).unwrap()), rows);
    }
}
