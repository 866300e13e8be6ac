//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per named parameter plus the shared step
/// counter. Fresh state is all zeros with step 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// Applies one bias-corrected update to every `(name, param, grad)`
    /// triple. Deterministic; parameters with zero gradient and zero state
    /// are left bit-identical.
    pub fn step_all<'a>(
        &mut self,
        cfg: &AdamConfig,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, param, grad) in params {
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name:?} at step {}",
                    self.step
                )));
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let (pd, md, vd, gd) = (
                param.data_mut(),
                m.data_mut(),
                v.data_mut(),
                grad.data(),
            );
            for i in 0..pd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new();
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        state
            .step_all(&cfg, std::iter::once(("w", &mut p, &g)))
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With fresh state, m_hat/sqrt(v_hat) = g/|g| elementwise.
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new();
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        state
            .step_all(&cfg, std::iter::once(("w", &mut p, &g)))
            .unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-5);
        assert!((p.data()[1] - (-1.9)).abs() < 1e-5);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize f(w) = (w-3)^2 from w=0 and cross-check against an
        // independent f64 recurrence of the same update rule.
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new();
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();

        let (mut om, mut ov, mut ow) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let w = p.data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (w - 3.0)]).unwrap();
            state
                .step_all(&cfg, std::iter::once(("w", &mut p, &g)))
                .unwrap();

            let og = 2.0 * (ow - 3.0);
            om = 0.9 * om + 0.1 * og;
            ov = 0.999 * ov + 0.001 * og * og;
            let m_hat = om / (1.0 - 0.9f64.powi(t));
            let v_hat = ov / (1.0 - 0.999f64.powi(t));
            ow -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

            assert!(
                (p.data()[0] as f64 - ow).abs() < 1e-3,
                "diverged from oracle at step {t}: {} vs {ow}",
                p.data()[0]
            );
        }
        assert!((p.data()[0] - 3.0).abs() < 0.5, "w = {}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new();
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![f32::NAN]).unwrap();
        assert!(matches!(
            state.step_all(&cfg, std::iter::once(("w", &mut p, &g))),
            Err(Error::Numeric(_))
        ));
    }
}
