//! Central finite-difference checks of tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}

/// Denominator floor for parameter checks. Coordinates with an exactly zero
/// gradient (softmax shift directions) otherwise divide rounding noise by 1e-8.
pub const PARAM_FLOOR: f64 = 1e-6;

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1e-8, |central difference|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(x);
        finite(f(&tape, v)?.item(), "function value")
    };
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = f(&tape, x)?;
        finite(y.item(), "function value")?;
        tape.backward(y)?.wrt(x)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-8));
    }
    Ok(worst)
}

/// Location of the largest discrepancy found by [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Finite-difference check of `∂loss/∂θ` for every scalar of every
/// parameter in `store`, relative to `max(PARAM_FLOOR, |numeric|)`.
/// `loss` must be a deterministic function of the parameter values.
pub fn check_params<F>(store: &ParamStore, step: f64, loss: F) -> Result<ParamCheck>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        finite(loss(&tape, &bound)?.item(), "loss")
    };
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let l = loss(&tape, &bound)?;
        finite(l.item(), "loss")?;
        with_grads.accumulate(&tape.backward(l)?);
    }
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = with_grads.get(id).grad.data()[i];
            let err = rel_err(analytic, numeric, PARAM_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.param.is_empty() {
                report = ParamCheck {
                    max_rel_error: err.max(report.max_rel_error),
                    param: p.name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}
