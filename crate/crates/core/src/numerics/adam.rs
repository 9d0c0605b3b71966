use super::tensor::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters of the Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with zero moments for parameters of the given sizes.
    pub fn new(param_sizes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            t: 0,
            beta1,
            beta2,
            epsilon,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn with_defaults(param_sizes: &[usize]) -> Self {
        Self::new(param_sizes, 0.9, 0.999, 1e-8).expect("default Adam hyperparameters are valid")
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One bias-corrected Adam update of every parameter, in place.
///
/// Shapes are validated before any parameter is touched, so a failed call
/// leaves `params` and `state` unchanged.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.numel() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let data = p.data_mut();
        for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        ensure_finite(data, "adam_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        let mut st = AdamState::with_defaults(&[1]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.1).unwrap();
        assert!((p.item().unwrap() + 0.1).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::vector(&[0.3, -1.2, 4.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::with_defaults(&[3]);
        for _ in 0..25 {
            adam_step(&mut [&mut p], &[Tensor::zeros(vec![3])], &mut st, 0.5).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 25);
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::vector(&[0.1, 0.2]).unwrap();
            let mut st = AdamState::with_defaults(&[2]);
            for k in 0..50 {
                let g = Tensor::vector(&[(k as f64).sin(), (k as f64 * 0.7).cos()]).unwrap();
                adam_step(&mut [&mut p], &[g], &mut st, 1e-2).unwrap();
            }
            p.into_data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_leaves_state_untouched() {
        let mut p = Tensor::vector(&[1.0, 2.0]).unwrap();
        let mut st = AdamState::with_defaults(&[2]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(vec![3])], &mut st, 0.1);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(AdamState::new(&[1], 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::new(&[1], 0.9, 0.0, 1e-8).is_err());
    }
}
