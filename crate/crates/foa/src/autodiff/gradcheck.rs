use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Compares the tape gradient of a scalar function against central
/// finite differences.
///
/// Returns `max_j |analytic_j - numeric_j| / max(1, |numeric_j|)`.
/// The numeric side only ever evaluates `f` forward.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    grad_check_with(&ParamStore::new(), f, x, eps)
}

/// [`grad_check`] for functions that read parameters from `store`; the
/// parameters are held fixed and only `x` is perturbed.
pub fn grad_check_with<F>(store: &ParamStore, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store).frozen();
        let v = tape.input(x.clone());
        let out = f(&mut tape, v)?;
        tape.backward(out)?.wrt(v)
    };

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::with_params(store).frozen();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        Ok(value.item())
    };

    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[j] += eps;
        let mut minus = x.clone();
        minus.data_mut()[j] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
