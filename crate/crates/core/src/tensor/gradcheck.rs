//! Central-difference gradient oracle.

use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns `max |analytic - numeric| / (|numeric| + 1e-8)` over every coordinate of `x`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Multi-input form of [`finite_diff_check`]; the maximum is taken over all inputs.
pub fn finite_diff_check_many<F, E>(f: F, xs: &[Tensor], step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_diff_check_floor(f, xs, step, 1e-8)
}

/// Like [`finite_diff_check_many`] with `floor` in place of `1e-8` in the denominator.
///
/// Useful when some coordinates have an exactly zero gradient, where the
/// difference quotient is pure roundoff.
pub fn finite_diff_check_floor<F, E>(f: F, xs: &[Tensor], step: f64, floor: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let eval = |inputs: &[Tensor], with_grad: bool| -> Result<(Tape, Vec<Var>, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(xs, true)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()).into());
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for coord in 0..xs[which].numel() {
            let orig = xs[which].data()[coord];
            probe[which].data_mut()[coord] = orig + step;
            let (t_plus, _, o_plus) = eval(&probe, false)?;
            probe[which].data_mut()[coord] = orig - step;
            let (t_minus, _, o_minus) = eval(&probe, false)?;
            probe[which].data_mut()[coord] = orig;
            let numeric = (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * step);
            let err = (grads[coord] - numeric).abs() / (numeric.abs() + floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
