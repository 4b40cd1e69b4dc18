//! Adam with decoupled weight decay and a warm-up / linear-decay schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Learning-rate schedule. Each feature is switched off by `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: Option<u64>,
    pub decay_steps: Option<u64>,
}

impl Schedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: None,
            decay_steps: None,
        }
    }

    /// `min(1, step / warmup)`, or 1 when warm-up is off.
    pub fn warmup_factor(&self, step: u64) -> f64 {
        match self.warmup_steps {
            Some(w) if w > 0 => (step as f64 / w as f64).min(1.0),
            _ => 1.0,
        }
    }

    /// `max(0, 1 - post_warmup_step / decay_steps)`, or 1 when decay is off.
    pub fn decay_factor(&self, step: u64) -> f64 {
        match self.decay_steps {
            Some(d) if d > 0 => {
                let post = step.saturating_sub(self.warmup_steps.unwrap_or(0));
                (1.0 - post as f64 / d as f64).max(0.0)
            }
            _ => 1.0,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.base_lr * self.warmup_factor(step) * self.decay_factor(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight-decay coefficient; `None` disables it.
    pub weight_decay: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: Schedule,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig, schedule: Schedule) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            schedule,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients. Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        self.step += 1;
        let t = self.step;
        let lr = self.schedule.lr(t);
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
        let wd = weight_decay.unwrap_or(0.0);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if wd > 0.0 {
                    *w -= lr * wd * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        let s = Schedule {
            base_lr: 1.0,
            warmup_steps: Some(100),
            decay_steps: Some(1000),
        };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(1) - 0.01).abs() < 1e-15);
        assert_eq!(s.warmup_factor(100), 1.0);
        assert_eq!(s.lr(100), 1.0);
        assert!((s.lr(600) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr(1100), 0.0);
        assert_eq!(s.lr(5000), 0.0);
        let c = Schedule::constant(0.3);
        assert!((1..500).all(|t| c.lr(t) == 0.3));
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = Schedule {
            base_lr: 1e-3,
            warmup_steps: Some(50),
            decay_steps: Some(500),
        };
        let before = s.lr(49);
        let at = s.lr(50);
        let after = s.lr(51);
        assert!((at - before).abs() < 1e-3 / 40.0);
        assert!((at - after).abs() < 1e-3 / 400.0);
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default(), Schedule::constant(0.1));
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store, before);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        store.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default(), Schedule::constant(0.01));
        adam.step(&mut store);
        let w = store.value(id).data();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 2.0));
        let cfg = AdamConfig {
            weight_decay: Some(0.5),
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(&store, cfg, Schedule::constant(0.1));
        adam.step(&mut store);
        assert!((store.value(id).data()[0] - 1.9).abs() < 1e-12);
    }
}
