use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of `|a - n| / max(REL_FLOOR, |a| + |n|)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Denominator floor; below it the error is effectively absolute, since
/// finite differences of an O(10) loss cannot resolve smaller gradients.
pub const REL_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(REL_FLOOR, analytic.abs() + numeric.abs())
}

/// Compares reverse-mode gradients of a scalar function of `params`
/// against the five-point central difference with step `epsilon`
/// (truncation error O(epsilon^4)).
pub fn grad_check<T, F>(params: &ParamSet<T>, f: F, epsilon: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_param_grads()
    };
    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item().to_f64_lossy())
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            let mut at = |k: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = orig + T::lit(k * epsilon);
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            probe.get_mut(id).data_mut()[j] = orig;
            if ![p1, m1, p2, m2].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    param: params.name(id).to_string(),
                    index: j,
                });
            }
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = analytic[id.index()].data()[j].to_f64_lossy();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over plain input tensors; `f` receives one leaf per input.
pub fn grad_check_inputs<T, F>(inputs: &[Tensor<T>], f: F, epsilon: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    let mut params = ParamSet::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("input{i}"), t.clone()))
        .collect();
    grad_check(
        &params,
        |tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            f(tape, &vars)
        },
        epsilon,
    )
}
