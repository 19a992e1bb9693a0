//! AdamW with decoupled weight decay, and cosine annealing with warm restarts.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One AdamW update over a flat parameter vector:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
///
/// Nothing is modified when the gradient is rejected.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {} grads {} state {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if !(lr > 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::ConfigInvalid(format!("lr {lr}, weight decay {weight_decay}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + state.eps) + weight_decay * params[i]);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
    pub cycles: usize,
}

impl ScheduleConfig {
    pub fn single(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            total_epochs,
            cycles: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "need base_lr > min_lr >= 0, got {} and {}",
                self.base_lr, self.min_lr
            )));
        }
        if self.total_epochs == 0 || self.cycles == 0 || self.total_epochs % self.cycles != 0 {
            return Err(Error::ConfigInvalid(format!(
                "{} cycles must evenly divide {} epochs",
                self.cycles, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn cycle_len(&self) -> usize {
        self.total_epochs / self.cycles
    }
}

/// Learning rate at the start of `epoch`. Phases restart every cycle; the end
/// of the schedule (`epoch == total_epochs`) is the final cycle's minimum.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if epoch > cfg.total_epochs {
        return Err(Error::ConfigInvalid(format!(
            "epoch {epoch} beyond schedule of {}",
            cfg.total_epochs
        )));
    }
    let len = cfg.cycle_len();
    let phase = if epoch == cfg.total_epochs { len } else { epoch % len };
    let cos = (std::f64::consts::PI * phase as f64 / len as f64).cos();
    Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) / 2.0 * (1.0 + cos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_by_hand() {
        let mut theta = [1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut theta, &[1.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(theta[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)));
        assert!((theta[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = [0.7, -2.0];
        let mut s = AdamWState::new(2);
        adamw_step(&mut theta, &[0.0, 0.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(theta, [0.7, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decoupled_decay() {
        let mut theta = [1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut theta, &[0.0], &mut s, 0.1, 0.1).unwrap();
        assert!((theta[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn matches_plain_adam_over_ten_steps() {
        // Independent Adam recurrence written out in closed form per step.
        let grads = [0.5, -1.0, 0.25, 2.0, -0.75, 0.1, 0.0, -3.0, 1.5, 0.3];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let mut theta = [0.2];
        let mut s = AdamWState::new(1);
        let mut expect = 0.2;
        let (mut m, mut v) = (0.0, 0.0);
        for (k, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            expect -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            adamw_step(&mut theta, &[g], &mut s, lr, 0.0).unwrap();
            assert!((theta[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs_without_mutation() {
        let mut theta = [1.0, 2.0];
        let mut s = AdamWState::new(2);
        assert!(matches!(
            adamw_step(&mut theta, &[1.0, f64::NAN], &mut s, 0.1, 0.0),
            Err(Error::NonFiniteGradient(_))
        ));
        assert!(matches!(
            adamw_step(&mut theta, &[1.0], &mut s, 0.1, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(theta, [1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn cosine_spot_values() {
        let cfg = ScheduleConfig::single(2e-3, 20);
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 2e-3);
        assert!(cosine_lr(20, &cfg).unwrap().abs() < 1e-18);
        assert!((cosine_lr(10, &cfg).unwrap() - 1e-3).abs() < 1e-18);
        assert!(cosine_lr(21, &cfg).is_err());
    }

    #[test]
    fn warm_restarts() {
        let cfg = ScheduleConfig {
            base_lr: 1.0,
            min_lr: 0.0,
            total_epochs: 20,
            cycles: 10,
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1.0);
        assert!((cosine_lr(1, &cfg).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cosine_lr(2, &cfg).unwrap(), 1.0);
        let bad = ScheduleConfig { total_epochs: 15, ..cfg };
        assert!(matches!(cosine_lr(0, &bad), Err(Error::ConfigInvalid(_))));
    }

    proptest! {
        #[test]
        fn nonincreasing_within_cycle(cycles in 1usize..5, per in 1usize..8, base in 1e-4f64..1.0) {
            let cfg = ScheduleConfig { base_lr: base, min_lr: 0.0, total_epochs: cycles * per, cycles };
            for c in 0..cycles {
                for e in c * per..(c + 1) * per - 1 {
                    prop_assert!(cosine_lr(e + 1, &cfg).unwrap() <= cosine_lr(e, &cfg).unwrap());
                }
            }
        }
    }
}
