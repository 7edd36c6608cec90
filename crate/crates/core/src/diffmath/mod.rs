//! Tensors, seeded random streams and reverse-mode differentiation.

mod rng;
mod tape;
mod tensor;

use std::rc::Rc;

pub use rng::{derive_seed, Distribution, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Exponent applied to the Euclidean distance in [`pairwise_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistancePower {
    /// `‖a − b‖`
    One,
    /// `‖a − b‖²`
    Two,
}

/// `[m, d] × [k, d] → [m, k]` matrix of (squared) Euclidean distances.
///
/// The norm's subgradient at coincident points is taken to be zero.
pub fn pairwise_distance<'t>(a: Var<'t>, b: Var<'t>, power: DistancePower) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Shape(format!(
            "pairwise_distance expects matrices, got {sa:?} and {sb:?}"
        )));
    }
    if sa[1] != sb[1] {
        return Err(Error::Shape(format!(
            "trailing dims differ: {} vs {}",
            sa[1], sb[1]
        )));
    }
    let (m, k, d) = (sa[0], sb[0], sa[1]);
    let (av, bv) = (a.value(), b.value());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ai = &av[i * d..(i + 1) * d];
        for j in 0..k {
            let bj = &bv[j * d..(j + 1) * d];
            let sq: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            out[i * k + j] = match power {
                DistancePower::One => sq.sqrt(),
                DistancePower::Two => sq,
            };
        }
    }
    let out = Rc::new(out);
    let dist = Rc::clone(&out);
    Ok(a.tape().push_op(
        &[a, b],
        vec![m, k],
        out,
        Box::new(move |g, pg| {
            let mut ga = vec![0.0; m * d];
            let mut gb = vec![0.0; k * d];
            for i in 0..m {
                for j in 0..k {
                    let coef = match power {
                        DistancePower::One => {
                            let r = dist[i * k + j];
                            if r > 0.0 {
                                g[i * k + j] / r
                            } else {
                                0.0
                            }
                        }
                        DistancePower::Two => 2.0 * g[i * k + j],
                    };
                    if coef == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let diff = av[i * d + c] - bv[j * d + c];
                        ga[i * d + c] += coef * diff;
                        gb[j * d + c] -= coef * diff;
                    }
                }
            }
            pg.add(0, &ga);
            pg.add(1, &gb);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::check_gradient;

    #[test]
    fn distances_to_origin() {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 1], vec![0.0, 1.0]);
        let b = tape.constant(vec![1, 1], vec![0.0]);
        let d = pairwise_distance(a, b, DistancePower::One).unwrap();
        assert_eq!(d.shape(), vec![2, 1]);
        assert_eq!(d.value().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn self_distance_is_symmetric_with_zero_diagonal() {
        let tape = Tape::new();
        let x = Rng::new(5).draw(Distribution::StandardNormal, &[6, 3]).unwrap();
        let a = tape.leaf(&x);
        let d = pairwise_distance(a, a, DistancePower::One).unwrap().value();
        for i in 0..6 {
            assert_eq!(d[i * 6 + i], 0.0);
            for j in 0..6 {
                assert!((d[i * 6 + j] - d[j * 6 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = Rng::new(11);
        let x = rng.draw(Distribution::StandardNormal, &[5, 3]).unwrap();
        let y = rng.draw(Distribution::StandardNormal, &[4, 3]).unwrap();
        let tape = Tape::new();
        let d1 = pairwise_distance(tape.leaf(&x), tape.leaf(&y), DistancePower::One)
            .unwrap()
            .value();
        let d2 = pairwise_distance(tape.leaf(&x), tape.leaf(&y), DistancePower::Two)
            .unwrap()
            .value();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for c in 0..3 {
                    let diff = x.row(i)[c] - y.row(j)[c];
                    s += diff * diff;
                }
                assert!((d1[i * 4 + j] - s.sqrt()).abs() < 1e-12);
                assert!((d2[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![0.0; 4]);
        let b = tape.constant(vec![2, 3], vec![0.0; 6]);
        assert!(matches!(
            pairwise_distance(a, b, DistancePower::One),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        for power in [DistancePower::One, DistancePower::Two] {
            let x = rng.draw(Distribution::StandardNormal, &[4, 2]).unwrap();
            let y = rng.draw(Distribution::StandardNormal, &[3, 2]).unwrap();
            let w = rng.draw(Distribution::StandardNormal, &[4, 3]).unwrap();
            check_gradient(&x, 1e-4, |tape, xv| {
                let d = pairwise_distance(xv, tape.leaf(&y), power).unwrap();
                d.mul(tape.leaf(&w)).sum()
            });
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = Rng::new(3).draw(Distribution::StandardNormal, &[3, 2]).unwrap();
        check_gradient(&x, 1e-4, |tape, v| {
            let row = tape.constant(vec![2], vec![0.3, -1.2]);
            let a = v.tanh().add(v.elu()).add(v.softplus());
            let b = v.square().add_scalar(1.0).sqrt().ln();
            let c = a.mul(b).div_row(v.square().add_scalar(2.0).max_rows());
            let s = c.sub_row(row).mul_row(v.mean_rows()).add(v.exp().scale(0.1));
            s.select_rows(&[2, 0, 2])
                .sum()
                .add(v.min_rows().sum())
                .add(v.slice_cols(1, 1).softplus().sum())
        });
    }
}
