use samplenet::diffmath::{Distribution, Rng, Tape, Tensor};
use samplenet::scoring::{energy_score, gaussian_nll, minibatch_energy_score};

/// Mean ES of `m` forecast samples from `N(mu, sigma²)` over targets from `N(0, 1)`.
fn expected_es(mu: f64, sigma: f64, m: usize, n: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let z = rng.draw(Distribution::StandardNormal, &[n, m, 1]).unwrap();
    let samples: Vec<f64> = z.data().iter().map(|v| mu + sigma * v).collect();
    let y = rng.draw(Distribution::StandardNormal, &[n, 1]).unwrap();
    energy_score(&Tensor::new(vec![n, m, 1], samples).unwrap(), &y).unwrap()
}

#[test]
fn energy_score_prefers_the_true_distribution() {
    let truth = expected_es(0.0, 1.0, 50, 4000, 1);
    for (mu, sigma) in [(0.5, 1.0), (-0.5, 1.0), (0.0, 0.5), (0.0, 2.0)] {
        let other = expected_es(mu, sigma, 50, 4000, 1);
        assert!(other > truth, "N({mu}, {sigma}²) scored {other} vs {truth}");
    }
}

#[test]
fn single_sample_subsets_average_to_the_fit_term() {
    let mut rng = Rng::new(2);
    for m in 2..=5 {
        let x = rng.draw(Distribution::StandardNormal, &[1, m, 2]).unwrap();
        let y = rng.draw(Distribution::StandardNormal, &[1, 2]).unwrap();
        let fit: f64 = x
            .data()
            .chunks(2)
            .map(|p| ((p[0] - y.data()[0]).powi(2) + (p[1] - y.data()[1]).powi(2)).sqrt())
            .sum::<f64>()
            / m as f64;
        let enumerated: f64 = (0..m)
            .map(|i| {
                let one = Tensor::new(vec![1, 1, 2], x.data()[2 * i..2 * i + 2].to_vec()).unwrap();
                energy_score(&one, &y).unwrap()
            })
            .sum::<f64>()
            / m as f64;
        assert!((fit - enumerated).abs() < 1e-12);
    }
}

#[test]
fn many_repetitions_approach_the_subset_average() {
    let (m, k) = (5, 3);
    let x = Rng::new(3).draw(Distribution::StandardNormal, &[1, m, 1]).unwrap();
    let y = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
    let mut subsets = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                subsets.push([a, b, c]);
            }
        }
    }
    let exact: f64 = subsets
        .iter()
        .map(|s| {
            let t = Tensor::new(vec![1, k, 1], s.iter().map(|&i| x.data()[i]).collect()).unwrap();
            energy_score(&t, &y).unwrap()
        })
        .sum::<f64>()
        / subsets.len() as f64;
    let tape = Tape::new();
    let mc = minibatch_energy_score(tape.leaf(&x), &y, k, 20_000, &mut Rng::new(4)).unwrap().item();
    assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
}

#[test]
fn gaussian_nll_is_minimized_at_the_true_variance() {
    let n = 20_000;
    let y = Rng::new(5).draw(Distribution::StandardNormal, &[n, 1]).unwrap();
    let mean = Tensor::zeros(&[n, 1]);
    let at = |v: f64| gaussian_nll(&mean, &Tensor::new(vec![n, 1], vec![v; n]).unwrap(), &y).unwrap();
    let best = at(1.0);
    assert!(at(0.8) > best && at(1.25) > best);
}
