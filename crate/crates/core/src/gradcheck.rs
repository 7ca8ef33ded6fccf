//! Central-difference audit of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<T, F>(f: &mut F, x: &Tensor<T>) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let y = value.item().as_f64();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y}")));
    }
    Ok(y)
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `h`.
///
/// `f` receives a fresh tape and the tape handle of `x`; it must be
/// deterministic (train-mode batch norm is fine, dropout is not).
pub fn finite_diff_check<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.value(out);
    if y.len() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", y.item())));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(v) {
        Some(g) => g.data().iter().map(|g| g.as_f64()).collect(),
        None => alloc::vec![0.0; x.len()],
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + h);
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = T::of(orig.as_f64() - h);
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
