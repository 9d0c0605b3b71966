//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::NotScalarRoot(tape.value(out).shape().to_vec()))?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue("gradient_check probe".into()));
    }
    Ok(v)
}

/// Largest relative disagreement between the tape gradient of a scalar
/// function of several inputs and central differences.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut probe = points.to_vec();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..a.numel() {
            let orig = points[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&f, &probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let an = a.data()[i];
            let err = (an - numeric).abs() / 1f64.max(an.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|t, v| f(t, v[0]), std::slice::from_ref(point), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_tight() {
        let err = gradient_check(|t, x| t.mul(x, x), &Tensor::scalar(3.0).unwrap(), DEFAULT_EPS).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let w = Tensor::vector(&[0.5, -2.0, 3.0]).unwrap();
        let err = gradient_check(
            |t, x| {
                let c = t.constant(w.clone());
                let p = t.mul(x, c)?;
                t.sum(p)
            },
            &Tensor::vector(&[1.0, 2.0, -1.0]).unwrap(),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // exp-like blowup via repeated squaring overflows at the probe points
        let f = |t: &mut Tape, x: Var| {
            let mut y = x;
            for _ in 0..12 {
                y = t.mul(y, y)?;
            }
            t.sum(y)
        };
        let r = gradient_check(f, &Tensor::scalar(1.5).unwrap(), DEFAULT_EPS);
        assert!(matches!(r, Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn rejects_bad_eps() {
        let r = gradient_check(|t, x| t.mul(x, x), &Tensor::scalar(1.0).unwrap(), 0.0);
        assert!(r.is_err());
    }
}
