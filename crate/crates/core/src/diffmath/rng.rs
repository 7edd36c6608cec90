use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::{check_shape, numel, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    StandardNormal,
    Uniform01,
}

/// Seeded ChaCha8 stream. Distinct `(seed, stream)` pairs never overlap.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer over `(base, index)`, used to derive per-run seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Splits off a child generator; the parent advances by one draw.
    pub fn fork(&mut self) -> Rng {
        let child = self.inner.random::<u64>();
        Rng::new(child)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn draw(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let n = numel(shape);
        let data: Vec<f64> = match dist {
            Distribution::Uniform01 => (0..n).map(|_| self.uniform()).collect(),
            Distribution::StandardNormal => (0..n).map(|_| self.normal()).collect(),
        };
        Tensor::new(shape.to_vec(), data)
    }

    /// First `k` entries of a partial Fisher-Yates shuffle of `0..n`.
    pub fn choose_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.choose_without_replacement(n, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = Rng::new(42).draw(Distribution::Uniform01, &[4]).unwrap();
        let b = Rng::new(42).draw(Distribution::Uniform01, &[4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dim_is_rejected() {
        assert!(Rng::new(0).draw(Distribution::Uniform01, &[3, 0]).is_err());
        assert!(Rng::new(0).draw(Distribution::StandardNormal, &[]).is_err());
    }

    #[test]
    fn uniform_moments() {
        let t = Rng::new(1).draw(Distribution::Uniform01, &[100_000]).unwrap();
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let mean = t.data().iter().sum::<f64>() / 1e5;
        // standard error sqrt(1/12/1e5) ~ 9e-4
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let t = Rng::new(2).draw(Distribution::StandardNormal, &[100_000]).unwrap();
        let mean = t.data().iter().sum::<f64>() / 1e5;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e5;
        // standard error of the variance sqrt(2/1e5) ~ 4.5e-3
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn streams_differ() {
        let a = Rng::with_stream(7, 0).draw(Distribution::Uniform01, &[8]).unwrap();
        let b = Rng::with_stream(7, 1).draw(Distribution::Uniform01, &[8]).unwrap();
        assert_ne!(a, b);
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
    }

    #[test]
    fn partial_shuffle_is_distinct() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let mut pick = rng.choose_without_replacement(10, 6);
            pick.sort_unstable();
            pick.dedup();
            assert_eq!(pick.len(), 6);
            assert!(pick.iter().all(|&i| i < 10));
        }
    }
}
