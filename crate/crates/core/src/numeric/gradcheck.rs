use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients that are
/// zero up to finite-difference noise do not produce huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-7;

/// Worst element of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Index into the `inputs` slice.
    pub input: usize,
    /// Flat element index within that input.
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients of the scalar function `f` against central
/// differences, element by element over every input.
///
/// `f` receives a fresh tape and one variable per input and must return a
/// one-element result. Relative error is `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("gradient check eps {eps} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = GradCheck { max_rel_err: 0.0, input: 0, element: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > worst.max_rel_err || !rel.is_finite() {
                worst = GradCheck { max_rel_err: rel, input: i, element: e, analytic: a, numeric };
            }
        }
    }
    Ok(worst)
}
