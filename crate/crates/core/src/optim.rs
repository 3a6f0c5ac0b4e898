//! SGD with momentum and the linear-warmup cosine learning-rate schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 0.0 }
    }
}

/// v ← μ·v + g + wd·θ;  θ ← θ − lr·v. Velocity buffers are created on first
/// touch and keyed by parameter id.
#[derive(Debug, Clone)]
pub struct Sgd<T: Element> {
    pub cfg: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg, velocity: Vec::new() }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
        lr: f64,
    ) -> Result<(), TensorError> {
        let mu = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        let lr = T::from_f64(lr);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), Vec::new());
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            if g.len() != p.value.numel() {
                return Err(TensorError::LengthMismatch {
                    op: "sgd_step",
                    shape: p.value.shape().to_vec(),
                    expected: p.value.numel(),
                    got: g.len(),
                });
            }
            let v = &mut self.velocity[id.0];
            if v.is_empty() {
                v.resize(g.len(), T::zero());
            }
            let theta = p.value.data_mut();
            for i in 0..g.len() {
                v[i] = mu * v[i] + g[i] + wd * theta[i];
                theta[i] -= lr * v[i];
            }
        }
        Ok(())
    }

    /// Velocity buffers in parameter-id order (empty until first touched).
    pub fn state(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn restore(&mut self, state: Vec<Vec<T>>) {
        self.velocity = state;
    }
}

/// Per-step learning rate: linear warmup then cosine decay to `min_lr`.
/// Rates are stated at reference batch 512 and scaled by batch/512.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    /// Reference-rate defaults: base 0.1, warmup start 0.001, floor 0.
    pub fn new(batch_size: usize, warmup_steps: u64, total_steps: u64) -> Self {
        ScheduleSpec {
            base_lr: 0.1,
            warmup_lr: 1e-3,
            min_lr: 0.0,
            batch_size,
            warmup_steps,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.batch_size == 0 {
            return Err(TensorError::invalid("schedule", "batch_size must be positive"));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(TensorError::invalid(
                "schedule",
                format!(
                    "need warmup_steps {} < total_steps {} and total > 0",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        for (name, v) in [("base_lr", self.base_lr), ("warmup_lr", self.warmup_lr), ("min_lr", self.min_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TensorError::invalid("schedule", format!("{name} {v} invalid")));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.batch_size as f64 / 512.0
    }

    /// Peak rate after the batch-size scaling rule.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.scale()
    }

    /// Starting rate after the batch-size scaling rule.
    pub fn start_lr(&self) -> f64 {
        self.warmup_lr * self.scale()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let peak = self.peak_lr();
        let start = self.start_lr();
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return start + (peak - start) * f;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr + (peak - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_two_step_hand_example() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        let mut opt = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 });
        let g = vec![(id, vec![0.5])];
        opt.step(&mut store, &g, 0.1).unwrap();
        // v = 0.5, theta = 1 - 0.05
        assert!((store.get(id).value.data()[0] - 0.95).abs() < 1e-15);
        opt.step(&mut store, &g, 0.1).unwrap();
        // v = 0.9*0.5 + 0.5 = 0.95, theta = 0.95 - 0.095
        assert!((store.get(id).value.data()[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_enters_velocity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![2.0]).unwrap(), true);
        let mut opt = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.1 });
        opt.step(&mut store, &[(id, vec![0.0])], 1.0).unwrap();
        // v = 0 + 0 + 0.1*2 = 0.2, theta = 2 - 0.2
        assert!((store.get(id).value.data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_frozen_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut store, &[(id, vec![5.0])], 0.1).unwrap();
        assert_eq!(store.get(id).value.data()[0], 1.0);
    }

    #[test]
    fn schedule_hits_published_anchors() {
        // batch 8 against reference 512: factor 1/64
        let s = ScheduleSpec::new(8, 200, 1200);
        s.validate().unwrap();
        assert!((s.lr_at(0) - 1.5625e-5).abs() < 1e-18);
        assert!((s.lr_at(200) - 1.5625e-3).abs() < 1e-18);
        assert!(s.lr_at(1199) < s.lr_at(1198));
        assert!(s.lr_at(1200) < 1e-12);
        assert!(s.lr_at(5000) < 1e-12);
    }

    #[test]
    fn schedule_shape_is_warmup_then_cosine() {
        let s = ScheduleSpec::new(8, 100, 1000);
        // continuity at the junction: the warmup line's endpoint is the peak,
        // which is exactly the cosine branch's first value
        let before = s.lr_at(99);
        let at = s.lr_at(100);
        assert!((at - s.peak_lr()).abs() < 1e-18);
        let warmup_slope = (s.peak_lr() - s.start_lr()) / 100.0;
        assert!((at - before - warmup_slope).abs() < 1e-12);
        // monotone up, then monotone down
        for step in 1..100 {
            assert!(s.lr_at(step) >= s.lr_at(step - 1));
        }
        for step in 101..1000 {
            assert!(s.lr_at(step) <= s.lr_at(step - 1));
        }
        // halfway through the cosine span the rate is half the peak
        assert!((s.lr_at(550) - 0.5 * s.peak_lr()).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_degenerate_spans() {
        assert!(ScheduleSpec::new(0, 10, 100).validate().is_err());
        assert!(ScheduleSpec::new(8, 100, 100).validate().is_err());
        assert!(ScheduleSpec::new(8, 0, 0).validate().is_err());
        assert!(ScheduleSpec::new(8, 0, 100).validate().is_ok());
    }
}
