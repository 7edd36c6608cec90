//! Entropic optimal transport between empirical measures and the debiased
//! Sinkhorn Divergence used to regularize predicted sample sets.
//!
//! Ground cost is `C(x, y) = ½‖x − y‖²`. Potentials are updated in the log
//! domain with symmetric (averaged) steps, and the taped variant differentiates
//! through every executed iteration.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Distribution, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::scoring::LossConfig;

/// Scale below which a normalized dimension is treated as collapsed.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// `U((0,1)^d)`; samples are min-max scaled per dimension.
    Uniform,
    /// `N(0, I)`; samples are standardized per dimension.
    #[default]
    Gaussian,
}

impl std::str::FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Prior::Uniform),
            "gaussian" => Ok(Prior::Gaussian),
            other => Err(Error::Config(format!("unknown prior '{other}'"))),
        }
    }
}

/// Weighted point set `K × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Cloud with uniform weights `1/K`.
    pub fn uniform(points: Tensor) -> Result<Self> {
        let k = points.rows();
        Self::new(points, vec![1.0 / k as f64; k])
    }

    pub fn new(points: Tensor, weights: Vec<f64>) -> Result<Self> {
        if points.shape().len() != 2 || points.rows() == 0 {
            return Err(Error::Shape(format!(
                "point cloud must be K × d with K ≥ 1, got {:?}",
                points.shape()
            )));
        }
        if weights.len() != points.rows() {
            return Err(Error::Shape("one weight per point required".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(
                "weights must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.row_width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0025,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// `⟨f, a⟩ + ⟨g, b⟩` at the last iterate.
    pub value: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Dense state of one solve, kept for the reverse sweep.
struct Solve {
    n: usize,
    m: usize,
    cost: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    /// iterates `(f_t, g_t)` for `t = 0..=iterations`
    history: Vec<(Vec<f64>, Vec<f64>)>,
    /// softmax weights `(P, Q)` behind each iterate, when small enough to keep
    weights: Vec<(Vec<f64>, Vec<f64>)>,
    converged: bool,
    eps: f64,
}

/// Weight matrices are cached for the reverse sweep up to this many entries.
const WEIGHT_CACHE_LIMIT: usize = 1 << 18;

fn squared_cost(x: &[f64], y: &[f64], d: usize) -> Vec<f64> {
    let (n, m) = (x.len() / d, y.len() / d);
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &y[j * d..(j + 1) * d];
            let sq: f64 = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
            cost[i * m + j] = 0.5 * sq;
        }
    }
    cost
}

/// `out_i = −ε log Σ_j exp(log_w_j + (pot_j − C_ij)/ε)`; `transpose` switches
/// the reduction to run over rows of `C`. When `weights` is given, the
/// normalized softmax terms are written to it laid out like `C`.
#[allow(clippy::too_many_arguments)]
fn softmin(
    cost: &[f64],
    n: usize,
    m: usize,
    log_w: &[f64],
    pot: &[f64],
    eps: f64,
    transpose: bool,
    mut weights: Option<&mut [f64]>,
) -> Vec<f64> {
    let (outer, inner) = if transpose { (m, n) } else { (n, m) };
    let inv_eps = 1.0 / eps;
    let mut out = vec![0.0; outer];
    let mut buf = vec![0.0; inner];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut top = f64::NEG_INFINITY;
        for (k, b) in buf.iter_mut().enumerate() {
            let c = if transpose { cost[k * m + o] } else { cost[o * m + k] };
            *b = log_w[k] + (pot[k] - c) * inv_eps;
            top = top.max(*b);
        }
        let mut s = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - top).exp();
            s += *b;
        }
        *slot = -eps * (top + s.ln());
        if let Some(w) = weights.as_deref_mut() {
            let inv_s = 1.0 / s;
            for (k, b) in buf.iter().enumerate() {
                let idx = if transpose { k * m + o } else { o * m + k };
                w[idx] = b * inv_s;
            }
        }
    }
    out
}

/// Recomputes the softmax weights of [`softmin`] from its output.
#[allow(clippy::too_many_arguments)]
fn softmin_weights(
    cost: &[f64],
    n: usize,
    m: usize,
    log_w: &[f64],
    pot: &[f64],
    out: &[f64],
    eps: f64,
    transpose: bool,
) -> Vec<f64> {
    let inv_eps = 1.0 / eps;
    let mut w = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let ij = i * m + j;
            w[ij] = if transpose {
                (log_w[i] + (pot[i] - cost[ij] + out[j]) * inv_eps).exp()
            } else {
                (log_w[j] + (pot[j] - cost[ij] + out[i]) * inv_eps).exp()
            };
        }
    }
    w
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&v| v.ln()).collect()
}

fn transposed(p: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = p[i * m + j];
        }
    }
    t
}

/// Runs the averaged Sinkhorn updates. For identical inputs `f_t == g_t`
/// exactly, so only one half is computed. `keep_weights` caches the softmax
/// weights for a later reverse sweep.
fn solve(
    x: &[f64],
    y: &[f64],
    d: usize,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
    keep_weights: bool,
) -> Result<Solve> {
    cfg.validate()?;
    let (n, m) = (a.len(), b.len());
    let symmetric = x == y && a == b;
    let cost = squared_cost(x, y, d);
    let (log_a, log_b) = (log_weights(a), log_weights(b));
    let eps = cfg.epsilon;
    let keep = keep_weights && 2 * n * m * (cfg.max_iters + 1) <= WEIGHT_CACHE_LIMIT;
    let mut weights = Vec::new();

    let half_step = |f: &[f64], g: &[f64], weights: &mut Vec<(Vec<f64>, Vec<f64>)>| {
        let mut p = keep.then(|| vec![0.0; n * m]);
        let tf = softmin(&cost, n, m, &log_b, g, eps, false, p.as_deref_mut());
        let (tg, q) = if symmetric {
            (tf.clone(), p.as_ref().map(|p| transposed(p, n, m)))
        } else {
            let mut q = keep.then(|| vec![0.0; n * m]);
            (softmin(&cost, n, m, &log_a, f, eps, true, q.as_deref_mut()), q)
        };
        if let (Some(p), Some(q)) = (p, q) {
            weights.push((p, q));
        }
        (tf, tg)
    };

    let history0 = half_step(&vec![0.0; n], &vec![0.0; m], &mut weights);
    let mut history = vec![history0];
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let (f, g) = history.last().unwrap();
        let (tf, tg) = half_step(f, g, &mut weights);
        let f_new: Vec<f64> = f.iter().zip(&tf).map(|(p, q)| 0.5 * (p + q)).collect();
        let g_new: Vec<f64> = g.iter().zip(&tg).map(|(p, q)| 0.5 * (p + q)).collect();
        let change = f
            .iter()
            .zip(&f_new)
            .chain(g.iter().zip(&g_new))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        if !change.is_finite() {
            return Err(Error::Numeric("non-finite Sinkhorn potential".into()));
        }
        history.push((f_new, g_new));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Solve {
        n,
        m,
        cost,
        log_a,
        log_b,
        history,
        weights,
        converged,
        eps,
    })
}

impl Solve {
    fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        let (f, g) = self.history.last().unwrap();
        let fa: f64 = f.iter().zip(a).map(|(p, q)| p * q).sum();
        let gb: f64 = g.iter().zip(b).map(|(p, q)| p * q).sum();
        fa + gb
    }

    fn result(&self, a: &[f64], b: &[f64]) -> SinkhornResult {
        let (f, g) = self.history.last().unwrap();
        SinkhornResult {
            value: self.value(a, b),
            f: f.clone(),
            g: g.clone(),
            iterations: self.history.len() - 1,
            converged: self.converged,
        }
    }

    /// Weights `(P, Q)` used to produce `(Tf, Tg)` from iterate `t − 1`;
    /// `t = 0` is the start from zero potentials.
    fn weights_at(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        if let Some((p, q)) = self.weights.get(t) {
            return (p.clone(), q.clone());
        }
        let (n, m, eps) = (self.n, self.m, self.eps);
        let (f_prev, g_prev) = if t == 0 {
            (vec![0.0; n], vec![0.0; m])
        } else {
            self.history[t - 1].clone()
        };
        let tf = softmin(&self.cost, n, m, &self.log_b, &g_prev, eps, false, None);
        let tg = softmin(&self.cost, n, m, &self.log_a, &f_prev, eps, true, None);
        (
            softmin_weights(&self.cost, n, m, &self.log_b, &g_prev, &tf, eps, false),
            softmin_weights(&self.cost, n, m, &self.log_a, &f_prev, &tg, eps, true),
        )
    }

    /// Adjoint of the cost matrix for an upstream scalar gradient `u`.
    fn cost_adjoint(&self, a: &[f64], b: &[f64], u: f64) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut fa: Vec<f64> = a.iter().map(|w| u * w).collect();
        let mut ga: Vec<f64> = b.iter().map(|w| u * w).collect();
        let mut cbar = vec![0.0; n * m];
        for t in (1..self.history.len()).rev() {
            let (p, q) = self.weights_at(t);
            let mut f_next: Vec<f64> = fa.iter().map(|v| 0.5 * v).collect();
            let mut g_next: Vec<f64> = ga.iter().map(|v| 0.5 * v).collect();
            for i in 0..n {
                for j in 0..m {
                    let ij = i * m + j;
                    f_next[i] -= 0.5 * ga[j] * q[ij];
                    g_next[j] -= 0.5 * fa[i] * p[ij];
                    cbar[ij] += 0.5 * (fa[i] * p[ij] + ga[j] * q[ij]);
                }
            }
            fa = f_next;
            ga = g_next;
        }
        let (p, q) = self.weights_at(0);
        for i in 0..n {
            for j in 0..m {
                let ij = i * m + j;
                cbar[ij] += fa[i] * p[ij] + ga[j] * q[ij];
            }
        }
        cbar
    }
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "point clouds live in different dimensions: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Entropic OT value `W_ε(a, b)` with potentials and convergence info.
pub fn entropic_ot(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    check_pair(a, b)?;
    let s = solve(a.points.data(), b.points.data(), a.dim(), &a.weights, &b.weights, cfg, false)?;
    let out = s.result(&a.weights, &b.weights);
    if !out.converged {
        log::warn!(
            "Sinkhorn did not reach tol {} within {} iterations",
            cfg.tol,
            cfg.max_iters
        );
    }
    Ok(out)
}

/// `S_ε(a, b) = W_ε(a, b) − ½(W_ε(a, a) + W_ε(b, b))`.
pub fn sinkhorn_divergence(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    let ab = entropic_ot(a, b, cfg)?;
    let aa = entropic_ot(a, a, cfg)?;
    let bb = entropic_ot(b, b, cfg)?;
    Ok(ab.value - 0.5 * (aa.value + bb.value))
}

/// Taped `W_ε` between point sets `x: [n, d]` and `y: [m, d]` with the given
/// weights. The result is differentiable in both point sets.
pub fn entropic_ot_var<'t>(
    x: Var<'t>,
    y: Var<'t>,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(Var<'t>, SinkhornResult)> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::Shape(format!("cannot transport {sx:?} onto {sy:?}")));
    }
    if sx[0] != a.len() || sy[0] != b.len() {
        return Err(Error::Shape("one weight per point required".into()));
    }
    let d = sx[1];
    let (xv, yv) = (x.value(), y.value());
    let s = solve(&xv, &yv, d, a, b, cfg, true)?;
    let result = s.result(a, b);
    let (a, b) = (a.to_vec(), b.to_vec());
    let (n, m) = (s.n, s.m);
    let var = x.tape().push_op(
        &[x, y],
        vec![1],
        Rc::new(vec![result.value]),
        Box::new(move |g, pg| {
            let cbar = s.cost_adjoint(&a, &b, g[0]);
            if pg.wants(0) {
                let gx = pg.slot(0);
                for i in 0..n {
                    for j in 0..m {
                        let w = cbar[i * m + j];
                        for c in 0..d {
                            gx[i * d + c] += w * (xv[i * d + c] - yv[j * d + c]);
                        }
                    }
                }
            }
            if pg.wants(1) {
                let gy = pg.slot(1);
                for i in 0..n {
                    for j in 0..m {
                        let w = cbar[i * m + j];
                        for c in 0..d {
                            gy[j * d + c] += w * (yv[j * d + c] - xv[i * d + c]);
                        }
                    }
                }
            }
        }),
    );
    Ok((var, result))
}

/// Taped Sinkhorn Divergence between uniformly weighted point sets.
pub fn sinkhorn_divergence_var<'t>(x: Var<'t>, y: Var<'t>, cfg: &SinkhornConfig) -> Result<Var<'t>> {
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / m as f64; m];
    let (xy, _) = entropic_ot_var(x, y, &a, &b, cfg)?;
    let (xx, _) = entropic_ot_var(x, x, &a, &a, cfg)?;
    let yy = if y.requires_grad() {
        entropic_ot_var(y, y, &b, &b, cfg)?.0
    } else {
        let v = solve(&y.value(), &y.value(), y.shape()[1], &b, &b, cfg, false)?.value(&b, &b);
        x.tape().scalar(v)
    };
    Ok(xy.sub(xx.add(yy).scale(0.5)))
}

/// Normalized samples plus per-dimension collapse flags.
pub struct Normalized<'t> {
    pub samples: Var<'t>,
    pub degenerate: Vec<bool>,
}

impl Normalized<'_> {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Maps a `[M, d]` sample set to the prior's scale, differentiably through
/// the statistics. Uniform prior: per-dimension min-max to `[0, 1]`.
/// Gaussian prior: per-dimension `(x − mean) / std` with population std.
/// Collapsed dimensions are mapped to zeros and flagged.
pub fn normalize_samples<'t>(samples: Var<'t>, prior: Prior) -> Result<Normalized<'t>> {
    let shape = samples.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "normalize_samples expects [M, d], got {shape:?}"
        )));
    }
    let d = shape[1];
    let tape = samples.tape();
    let (center, scale) = match prior {
        Prior::Uniform => {
            let lo = samples.min_rows();
            (lo, samples.max_rows().sub(lo))
        }
        Prior::Gaussian => {
            let mean = samples.mean_rows();
            let var = samples.sub_row(mean).square().mean_rows();
            (mean, var.sqrt())
        }
    };
    let scale_v = scale.value();
    let degenerate: Vec<bool> = scale_v.iter().map(|&s| !(s > SCALE_FLOOR)).collect();
    let shifted = samples.sub_row(center);
    let out = if degenerate.iter().any(|&x| x) {
        let lift: Vec<f64> = scale_v
            .iter()
            .zip(&degenerate)
            .map(|(&s, &dg)| if dg { 1.0 - s } else { 0.0 })
            .collect();
        let mask: Vec<f64> = degenerate.iter().map(|&dg| if dg { 0.0 } else { 1.0 }).collect();
        let safe = scale.add(tape.constant(vec![d], lift));
        shifted.div_row(safe).mul_row(tape.constant(vec![d], mask))
    } else {
        shifted.div_row(scale)
    };
    Ok(Normalized {
        samples: out,
        degenerate,
    })
}

/// Untaped convenience wrapper around [`normalize_samples`].
pub fn normalize_tensor(samples: &Tensor, prior: Prior) -> Result<(Tensor, Vec<bool>)> {
    let tape = crate::diffmath::Tape::new();
    let n = normalize_samples(tape.leaf(samples), prior)?;
    Ok((n.samples.to_tensor(), n.degenerate))
}

/// Fresh `K` draws from the prior with uniform weights.
pub fn sample_prior(prior: Prior, k: usize, d: usize, rng: &mut Rng) -> Result<PointCloud> {
    let dist = match prior {
        Prior::Uniform => Distribution::Uniform01,
        Prior::Gaussian => Distribution::StandardNormal,
    };
    PointCloud::uniform(rng.draw(dist, &[k, d])?)
}

/// Counters collected while evaluating [`minibatch_sinkhorn`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkhornStats {
    pub divergences: usize,
    pub degenerate_skipped: usize,
    pub unconverged_solves: usize,
}

/// Minibatch Sinkhorn regularizer over a `[N, M, d]` sample tensor: for each
/// input and repetition, `K` samples are drawn without replacement,
/// normalized, and compared against `K` fresh prior draws. Inputs whose
/// subset collapses in some dimension contribute zero.
pub fn minibatch_sinkhorn<'t>(
    samples: Var<'t>,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<(Var<'t>, SinkhornStats)> {
    cfg.validate()?;
    let shape = samples.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("samples must be [N, M, d], got {shape:?}")));
    }
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    if m != cfg.m {
        return Err(Error::Config(format!(
            "loss configured for M = {} but got {m} samples",
            cfg.m
        )));
    }
    let sinkhorn = cfg.sinkhorn();
    let flat = samples.reshape(vec![n * m, d]);
    let tape = samples.tape();
    let weights = vec![1.0 / cfg.k as f64; cfg.k];
    let mut stats = SinkhornStats::default();
    let mut terms = Vec::with_capacity(n * cfg.l);
    for row in 0..n {
        for _ in 0..cfg.l {
            let pick: Vec<usize> = rng
                .choose_without_replacement(m, cfg.k)
                .into_iter()
                .map(|i| row * m + i)
                .collect();
            let prior = sample_prior(cfg.prior, cfg.k, d, rng)?;
            let subset = flat.select_rows(&pick);
            let norm = normalize_samples(subset, cfg.prior)?;
            if norm.any_degenerate() {
                stats.degenerate_skipped += 1;
                continue;
            }
            let y = tape.leaf(prior.points());
            let (xy, r1) = entropic_ot_var(norm.samples, y, &weights, &weights, &sinkhorn)?;
            let (xx, r2) = entropic_ot_var(norm.samples, norm.samples, &weights, &weights, &sinkhorn)?;
            let yy = solve(prior.points().data(), prior.points().data(), d, &weights, &weights, &sinkhorn, false)?;
            stats.unconverged_solves +=
                usize::from(!r1.converged) + usize::from(!r2.converged) + usize::from(!yy.converged);
            let self_terms = xx.add_scalar(yy.value(&weights, &weights)).scale(0.5);
            terms.push(xy.sub(self_terms));
            stats.divergences += 1;
        }
    }
    let total = if terms.is_empty() {
        // keep the result attached to the graph
        samples.sum().scale(0.0)
    } else {
        Var::add_n(&terms)
    };
    Ok((total.scale(1.0 / (n * cfg.l) as f64), stats))
}
