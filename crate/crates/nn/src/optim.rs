//! Adam optimizer with bias correction.

use crate::error::{NnError, Result};
use crate::layers::Param;
use crate::tensor::Scalar;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// beta1 = 0.5 is the GAN setting; the U-Net uses [`Adam::standard`].
    pub fn new(lr: f64, beta1: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn standard(lr: f64) -> Self {
        Self::new(lr, 0.9)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter walk. Slot order must match across calls
    /// (it does, as long as the same model produces the walk).
    pub fn step<T: Scalar>(&mut self, params: &mut [Param<'_, T>]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "adam: {} slots vs {} params",
                self.slots.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (param, slot) in params.iter_mut().zip(&mut self.slots) {
            if param.value.len() != slot.m.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "adam: parameter '{}' changed size",
                    param.name
                )));
            }
            for i in 0..param.value.len() {
                let g = param.grad[i].to_f64();
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGrad {
                        param: format!("{}[{i}]", param.name),
                    });
                }
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                param.value[i] = T::from_f64(param.value[i].to_f64() - delta);
            }
        }
        Ok(())
    }
}
