use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function at `point` against
/// central differences and returns the worst relative error
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` over all coordinates.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Argument(format!("gradient_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::dim("gradient_check", format!("function output shape {:?}", y.shape())));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value {y} at gradient_check probe")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(point.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.wrt(v);
    if !analytic.all_finite() {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
