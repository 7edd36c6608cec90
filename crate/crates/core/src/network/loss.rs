use crate::diffmath::{Rng, Tensor, Var};
use crate::error::Result;
use crate::scoring::{minibatch_energy_score, LossConfig};
use crate::transport::{minibatch_sinkhorn, SinkhornStats};

/// The two terms of the SampleNet objective and their weighted sum.
pub struct CombinedLoss<'t> {
    pub total: Var<'t>,
    pub energy: Var<'t>,
    /// `None` when `η = 0`; the regularizer is then never evaluated.
    pub regularizer: Option<Var<'t>>,
    pub stats: SinkhornStats,
}

/// `L_ES + η · L_S` over a `[N, M, d]` sample tensor. The energy term draws
/// its subsets from `rng` first, then the regularizer draws its own.
pub fn combined_loss<'t>(
    samples: Var<'t>,
    targets: &Tensor,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<CombinedLoss<'t>> {
    cfg.validate()?;
    if samples.shape().get(1) != Some(&cfg.m) {
        return Err(crate::Error::Config(format!(
            "loss configured for M = {} but samples are {:?}",
            cfg.m,
            samples.shape()
        )));
    }
    let energy = minibatch_energy_score(samples, targets, cfg.k, cfg.l, rng)?;
    if cfg.eta == 0.0 {
        return Ok(CombinedLoss {
            total: energy,
            energy,
            regularizer: None,
            stats: SinkhornStats::default(),
        });
    }
    let (reg, stats) = minibatch_sinkhorn(samples, cfg, rng)?;
    Ok(CombinedLoss {
        total: energy.add(reg.scale(cfg.eta)),
        energy,
        regularizer: Some(reg),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Distribution, Tape};
    use crate::testutil::check_gradient;
    use crate::transport::Prior;

    fn cfg(eta: f64, prior: Prior) -> LossConfig {
        LossConfig {
            m: 4,
            k: 4,
            l: 1,
            eta,
            prior,
            epsilon: 0.05,
            sinkhorn_iters: 20,
            sinkhorn_tol: 0.0,
        }
    }

    #[test]
    fn eta_zero_is_the_energy_score() {
        let mut rng = Rng::new(1);
        let s = rng.draw(Distribution::StandardNormal, &[3, 4, 2]).unwrap();
        let y = rng.draw(Distribution::StandardNormal, &[3, 2]).unwrap();
        let tape = Tape::new();
        let c = cfg(0.0, Prior::Gaussian);
        let total = combined_loss(tape.leaf(&s), &y, &c, &mut Rng::new(4)).unwrap();
        let es = minibatch_energy_score(tape.leaf(&s), &y, 4, 1, &mut Rng::new(4)).unwrap();
        assert_eq!(total.total.item(), es.item());
        assert!(total.regularizer.is_none());
    }

    #[test]
    fn terms_combine_linearly() {
        let mut rng = Rng::new(2);
        let s = rng.draw(Distribution::StandardNormal, &[2, 4, 1]).unwrap();
        let y = rng.draw(Distribution::StandardNormal, &[2, 1]).unwrap();
        let tape = Tape::new();
        let out = combined_loss(tape.leaf(&s), &y, &cfg(2.0, Prior::Uniform), &mut Rng::new(5)).unwrap();
        let (a, b) = (out.energy.item(), out.regularizer.unwrap().item());
        assert!((out.total.item() - (a + 2.0 * b)).abs() < 1e-12);
    }

    #[test]
    fn negative_eta_is_rejected() {
        let tape = Tape::new();
        let s = tape.constant(vec![1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let y = Tensor::zeros(&[1, 1]);
        assert!(combined_loss(s, &y, &cfg(-1.0, Prior::Gaussian), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn single_sample_reduces_to_distance() {
        let tape = Tape::new();
        let s = tape.constant(vec![1, 1, 2], vec![3.0, 4.0]);
        let y = Tensor::zeros(&[1, 2]);
        let c = LossConfig {
            m: 1,
            k: 1,
            ..LossConfig::default()
        };
        let out = combined_loss(s, &y, &c, &mut Rng::new(0)).unwrap();
        assert_eq!(out.total.item(), 5.0);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        for prior in [Prior::Uniform, Prior::Gaussian] {
            for eta in [0.0, 0.5] {
                let s = rng.draw(Distribution::StandardNormal, &[2, 4, 1]).unwrap();
                let y = rng.draw(Distribution::StandardNormal, &[2, 1]).unwrap();
                let c = cfg(eta, prior);
                check_gradient(&s, 1e-3, |_, v| {
                    combined_loss(v, &y, &c, &mut Rng::new(9)).unwrap().total
                });
            }
        }
    }
}
