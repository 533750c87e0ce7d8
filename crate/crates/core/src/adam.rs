//! Adam update with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{shape_string, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state. `m`/`v` start at zero, `step` at 0.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(param_shape: &[usize], config: AdamConfig) -> AdamState {
        AdamState {
            step: 0,
            m: Tensor::zeros(param_shape),
            v: Tensor::zeros(param_shape),
            config,
        }
    }
}

/// One bias-corrected Adam step, in place. Increments `state.step`.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::shape(
            "adam_step",
            shape_string(param.shape()),
            format!(
                "grad {}, state {}",
                shape_string(grad.shape()),
                shape_string(state.m.shape())
            ),
        ));
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let md = state.m.data_mut();
    let vd = state.v.data_mut();
    let pd = param.data_mut();
    let gd = grad.data();
    for i in 0..pd.len() {
        md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
        vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Scalar oracle: evaluate the Adam recurrence by hand for a constant
    // gradient, independent of the implementation above.
    fn scalar_oracle(p0: f64, g: f64, steps: u64, c: &AdamConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let m_hat = m / (1.0 - c.beta1.powi(t as i32));
            let v_hat = v / (1.0 - c.beta2.powi(t as i32));
            p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[3], AdamConfig::default());
        let before = p.clone();
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_scalar_oracle() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(0.3);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1], cfg.clone());
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = scalar_oracle(0.3, 1.0, 1, &cfg);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(-1.2);
        let g = Tensor::scalar(0.7);
        let mut st = AdamState::new(&[1], cfg.clone());
        adam_step(&mut p, &g, &mut st).unwrap();
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = scalar_oracle(-1.2, 0.7, 2, &cfg);
        assert!((p.item() - expected).abs() < 1e-14);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut st).is_err());
    }
}
