//! Central finite-difference gradient oracle.

use super::{branch, Tensor};
use crate::error::Result;
use crate::real::Real;

/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every element `i` of
/// `p`. `f` is re-evaluated from scratch for each perturbation and must be
/// deterministic.
pub fn finite_difference_grad<T: Real>(
    mut f: impl FnMut() -> Result<T>,
    p: &Tensor<T>,
    eps: T,
) -> Result<Vec<T>> {
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(p.numel());
    for i in 0..p.numel() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let plus = f();
        p.data_mut()[i] = orig - eps;
        let minus = f();
        p.data_mut()[i] = orig;
        out.push((plus? - minus?) / two_eps);
    }
    Ok(out)
}

/// Gradient norm below which [`relative_error`] stops dividing by the norm.
/// Central differences of an O(1) loss in double precision cannot resolve
/// a gradient of 1e-9 to five digits, so such gradients are held to an
/// absolute bound of `NORM_FLOOR` times the tolerance instead.
pub const NORM_FLOOR: f64 = 1e-6;

/// `||a - b||_2 / max(||a||_2, ||b||_2, NORM_FLOOR)`.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.max(nb).sqrt().max(NORM_FLOOR)
}

/// Outcome of comparing backward() against finite differences for one tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub abs_err: f64,
    pub analytic_norm: f64,
}

/// Runs `loss` once with gradients, then compares every listed leaf's
/// gradient with central differences of `loss`. The perturbed evaluations
/// replay the branch decisions of the first pass, so the differences stay
/// on the piece of the function that backward differentiates.
pub fn check_gradients<T: Real>(
    mut loss: impl FnMut() -> Result<Tensor<T>>,
    leaves: &[(String, Tensor<T>)],
    eps: T,
) -> Result<Vec<GradCheck>> {
    for (_, t) in leaves {
        t.zero_grad();
    }
    let (value, tape) = branch::record(&mut loss)?;
    value?.backward()?;
    let mut out = Vec::with_capacity(leaves.len());
    for (name, t) in leaves {
        let analytic = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
        let numeric = finite_difference_grad(|| Ok(branch::replay(&tape, &mut loss)??.item()), t, eps)?;
        out.push(GradCheck {
            name: name.clone(),
            rel_err: relative_error(&analytic, &numeric),
            abs_err: analytic.iter().zip(&numeric).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt(),
            analytic_norm: analytic.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}
