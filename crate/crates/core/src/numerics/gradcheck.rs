use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point.clone());
        let y = f(&mut tape, xv)?;
        let v = tape.value(y);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).item().is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
