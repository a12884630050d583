//! Central finite-difference verification of tape gradients.

use super::{Param, Tape, TensorId};
use crate::error::Result;

/// Compare the tape gradient of `f` against central finite differences at the
/// current parameter values. Returns the maximum over all parameter coordinates of
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `f` must rebuild the loss from scratch on the tape it is given and be
/// deterministic; parameters are restored exactly before returning.
pub fn grad_check<F>(params: &mut [Param], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| p.leaf(&mut tape))
        .collect::<std::result::Result<_, _>>()?;
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(&ids)
        .map(|(p, &id)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |params: &mut [Param], f: &F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .map(|p| p.frozen_leaf(&mut tape))
            .collect::<std::result::Result<_, _>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = params[pi].values[j];
            params[pi].values[j] = orig + eps;
            let plus = eval(params, &f)?;
            params[pi].values[j] = orig - eps;
            let minus = eval(params, &f)?;
            params[pi].values[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / 1e-12f64.max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
