//! Finite-difference gradient oracle used by unit tests.

use crate::diffmath::{Tape, Tensor, Var};

/// Compares the taped gradient of `f` at `x` with central differences
/// (step 1e-5); relative error is measured against `max(1, |grad|)`.
pub(crate) fn check_gradient<F>(x: &Tensor, tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let loss = f(&tape, leaf);
    let grad = tape.backward(loss).unwrap().get_or_zeros(leaf);
    let eval = |t: &Tensor| {
        let tape = Tape::new();
        let v = tape.leaf(t);
        f(&tape, v).item()
    };
    let h = 1e-5;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(1.0);
        assert!(err < tol, "coordinate {i}: taped {} vs fd {fd} (rel {err})", grad[i]);
    }
}
