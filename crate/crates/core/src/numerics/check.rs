use super::{NumericsError, Tape, Tensor, Var};
use crate::Scalar;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F, Fun>(f: Fun, x: &Tensor<F>, step: F) -> Result<F, NumericsError>
where
    F: Scalar,
    Fun: for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>, NumericsError>,
{
    if step <= F::zero() {
        return Err(NumericsError::Contract {
            op: "finite_diff_check",
            msg: "step must be positive".into(),
        });
    }
    let tape = Tape::new();
    let input = tape.var(x.clone());
    let out = f(&tape, input)?;
    let grads = tape.backward(out)?;
    let zeros = vec![F::zero(); x.len()];
    let analytic = grads.wrt(input).unwrap_or(&zeros).to_vec();

    let eval = |probe: Tensor<F>| -> Result<F, NumericsError> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        Ok(f(&tape, v)?.item())
    };
    let two = F::lit(2.0);
    let mut worst = F::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let err = (a - numeric).abs() / a.abs().max(F::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Pins a closure to the higher-ranked signature [`finite_diff_check`] expects,
/// so it can be bound to a variable before use.
pub fn scalar_fn<F, Fun>(f: Fun) -> Fun
where
    F: Scalar,
    Fun: for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>, NumericsError>,
{
    f
}
