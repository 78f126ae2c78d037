//! AdamW with decoupled weight decay, and the learning-rate schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

/// `eta(t) = eta_min + (lr0 - eta_min) * (1 + cos(pi * t / t_max)) / 2`
/// for the cosine schedule; the constant schedule returns `lr0`.
pub fn learning_rate(schedule: LrSchedule, epoch: usize, t_max: usize, lr0: f64, lr_min: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => lr0,
        LrSchedule::Cosine => {
            let t = epoch.min(t_max) as f64 / t_max.max(1) as f64;
            lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Per-parameter moment state keyed by parameter name. Parameters that
/// never step (frozen) accumulate no state.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: HashMap<String, Slot<T>>,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: HashMap::new() }
    }

    /// One decoupled-decay update:
    /// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &[T],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} entries, parameter has {}",
                grad.len(),
                param.numel()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        let n = param.numel();
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Slot { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 });
        slot.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(slot.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(slot.t as i32));
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(weight_decay);
        let eps = T::from_f64(self.eps);
        for ((w, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let (lr0, lr_min, t_max) = (1e-3, 1e-6, 200);
        let at = |t| learning_rate(LrSchedule::Cosine, t, t_max, lr0, lr_min);
        assert_eq!(at(0), lr0);
        assert!((at(t_max) - lr_min).abs() < 1e-18);
        assert!((at(t_max / 2) - (lr0 + lr_min) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_strictly_decreasing() {
        let at = |t| learning_rate(LrSchedule::Cosine, t, 100, 1e-2, 1e-6);
        for t in 0..100 {
            assert!(at(t + 1) < at(t), "not decreasing at {t}");
        }
        // constant mode stays put
        assert_eq!(learning_rate(LrSchedule::Constant, 57, 100, 3e-4, 1e-6), 3e-4);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // lambda = 0, constant gradient, from zero state: the
        // bias-corrected first step is lr * g / (|g| + eps) ~ lr.
        let mut opt = AdamW::<f64>::new();
        let mut w = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = [0.3, -0.7];
        opt.step("w", &mut w, &g, 1e-2, 0.0).unwrap();
        assert!((w.data()[0] - (1.0 - 1e-2)).abs() < 1e-6);
        assert!((w.data()[1] - (-2.0 + 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_decay() {
        let mut opt = AdamW::<f64>::new();
        let mut w = Tensor::new(vec![1], vec![2.0]).unwrap();
        opt.step("w", &mut w, &[0.0], 0.1, 1e-1).unwrap();
        assert!((w.data()[0] - 2.0 * (1.0 - 0.1 * 1e-1)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = AdamW::<f64>::new();
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        match opt.step("enc0.conv0.weight", &mut w, &[f64::NAN], 0.1, 0.0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("enc0.conv0.weight")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
