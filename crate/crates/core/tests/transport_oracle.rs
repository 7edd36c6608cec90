use samplenet::diffmath::{Distribution, Rng, Tape, Tensor};
use samplenet::scoring::LossConfig;
use samplenet::transport::{
    entropic_ot, minibatch_sinkhorn, sinkhorn_divergence, PointCloud, Prior, SinkhornConfig,
};

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain alternating log-domain Sinkhorn, run for a fixed number of sweeps.
fn dense_ot(x: &[f64], a: &[f64], y: &[f64], b: &[f64], eps: f64, iters: usize) -> f64 {
    let cost = |i: usize, j: usize| 0.5 * (x[i] - y[j]).powi(2);
    let mut f = vec![0.0; x.len()];
    let mut g = vec![0.0; y.len()];
    for _ in 0..iters {
        for i in 0..x.len() {
            f[i] = -eps * log_sum_exp((0..y.len()).map(|j| b[j].ln() + (g[j] - cost(i, j)) / eps));
        }
        for j in 0..y.len() {
            g[j] = -eps * log_sum_exp((0..x.len()).map(|i| a[i].ln() + (f[i] - cost(i, j)) / eps));
        }
    }
    f.iter().zip(a).map(|(f, a)| f * a).sum::<f64>() + g.iter().zip(b).map(|(g, b)| g * b).sum::<f64>()
}

fn cloud(points: &[f64], weights: &[f64]) -> PointCloud {
    PointCloud::new(Tensor::new(vec![points.len(), 1], points.to_vec()).unwrap(), weights.to_vec()).unwrap()
}

#[test]
fn three_atom_clouds_match_the_dense_oracle() {
    let (x, a) = ([-0.5, 0.2, 1.1], [0.2, 0.5, 0.3]);
    let (y, b) = ([0.0, 0.9, 1.7], [0.4, 0.4, 0.2]);
    for eps in [0.05, 0.2, 1.0] {
        let cfg = SinkhornConfig { epsilon: eps, max_iters: 5000, tol: 1e-13 };
        let got = entropic_ot(&cloud(&x, &a), &cloud(&y, &b), &cfg).unwrap();
        assert!(got.converged);
        let oracle = dense_ot(&x, &a, &y, &b, eps, 10_000);
        assert!((got.value - oracle).abs() < 1e-8, "eps {eps}: {} vs {oracle}", got.value);

        let div = sinkhorn_divergence(&cloud(&x, &a), &cloud(&y, &b), &cfg).unwrap();
        let oracle_div = oracle
            - 0.5 * (dense_ot(&x, &a, &x, &a, eps, 10_000) + dense_ot(&y, &b, &y, &b, eps, 10_000));
        assert!((div - oracle_div).abs() < 1e-8, "eps {eps}: {div} vs {oracle_div}");
    }
}

#[test]
fn large_epsilon_approaches_mean_cost() {
    let (x, a) = ([-1.0, 0.5], [0.5, 0.5]);
    let (y, b) = ([2.0, 3.0, 4.0], [0.2, 0.3, 0.5]);
    let cfg = SinkhornConfig { epsilon: 1e6, max_iters: 200, tol: 1e-14 };
    let got = entropic_ot(&cloud(&x, &a), &cloud(&y, &b), &cfg).unwrap().value;
    let mut product = 0.0;
    for i in 0..2 {
        for j in 0..3 {
            product += a[i] * b[j] * 0.5 * (x[i] - y[j]).powi(2);
        }
    }
    assert!((got - product).abs() < 1e-4, "{got} vs {product}");
}

#[test]
fn prior_shaped_samples_score_far_below_bimodal_ones() {
    let (n, m) = (8, 64);
    let mut rng = Rng::new(3);
    let gaussian = rng.draw(Distribution::StandardNormal, &[n, m, 1]).unwrap();
    let bimodal: Vec<f64> = (0..n * m)
        .map(|i| if i % 2 == 0 { -3.0 } else { 3.0 } + 0.1 * rng.normal())
        .collect();
    let bimodal = Tensor::new(vec![n, m, 1], bimodal).unwrap();
    let cfg = LossConfig { m, k: 32, l: 2, eta: 1.0, prior: Prior::Gaussian, ..Default::default() };
    let reg = |t: &Tensor| {
        let tape = Tape::new();
        minibatch_sinkhorn(tape.leaf(t), &cfg, &mut Rng::new(4)).unwrap().0.item()
    };
    let (near, far) = (reg(&gaussian), reg(&bimodal));
    assert!(far > 5.0 * near, "prior-shaped {near} vs bimodal {far}");
}

#[test]
fn collapsed_inputs_are_skipped_and_counted() {
    let (n, m) = (3, 6);
    let mut data = Rng::new(6).draw(Distribution::StandardNormal, &[n, m, 1]).unwrap().into_data();
    data[m..2 * m].fill(1.5);
    let t = Tensor::new(vec![n, m, 1], data).unwrap();
    let cfg = LossConfig { m, k: m, l: 2, eta: 1.0, ..Default::default() };
    let tape = Tape::new();
    let (value, stats) = minibatch_sinkhorn(tape.leaf(&t), &cfg, &mut Rng::new(1)).unwrap();
    assert_eq!(stats.degenerate_skipped, 2);
    assert!(value.item().is_finite());
}
