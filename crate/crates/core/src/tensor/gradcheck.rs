use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |g_i − fd_i| / max(1, |fd_i|)`.
///
/// `f` records its computation on the tape it is handed, starting from the
/// leaf for `x`, and returns the scalar output.
pub fn finite_difference_check<'w, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'w>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("step h must be positive".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("input x".into()));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let y0 = tape.scalar(out);
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y0}")));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe, false);
        let out = f(&mut tape, v)?;
        let y = tape.scalar(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite(format!("f(x ± h) = {y}")))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
