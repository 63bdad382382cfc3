//! Central finite-difference gradient checking.
//!
//! Only forward values are used to build the numeric estimate, so the check is
//! independent of the backward rules it verifies.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic and numeric gradients of a scalar function of `inputs`.
///
/// `build` receives a fresh evaluation tape and one handle per input and must
/// return a scalar loss.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.param(t))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let params: Vec<Tensor> = inputs.iter().map(|t| t.clone().into_param()).collect();
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|t| tape.param(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; params[k].len()];
        let analytic = tape.grad(*var).unwrap_or(&zeros).to_vec();
        for idx in 0..params[k].len() {
            let original = probe[k].values()[idx];
            probe[k].values_mut()[idx] = original + step;
            let plus = eval(&probe)?;
            probe[k].values_mut()[idx] = original - step;
            let minus = eval(&probe)?;
            probe[k].values_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !analytic[idx].is_finite() {
                return Err(Error::NonFinite("gradient check".into()));
            }
            let denom = analytic[idx].abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            let rel = (analytic[idx] - numeric).abs() / denom;
            worst.checked += 1;
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_input = k;
                worst.worst_index = idx;
            }
        }
    }
    Ok(worst)
}
