//! AdamW with linear warmup and cosine decay.

use std::f64::consts::PI;

use crate::model::ParamLayout;

/// Learning rate as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, min_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = if warmup_fraction > 0.0 {
            ((warmup_fraction * total_steps as f64).ceil() as usize).max(1)
        } else {
            0
        };
        Self {
            peak,
            warmup_steps,
            total_steps,
            min_fraction,
        }
    }

    /// Rate used for the update at `step` (0-based).
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        let progress = if decay_steps <= 1 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / (decay_steps - 1) as f64).min(1.0)
        };
        let floor = self.peak * self.min_fraction;
        floor + (self.peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// Optimizer state: first and second moments plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub updates: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, layout: &ParamLayout) -> Self {
        let n = layout.total();
        Self::with_state(config, layout, vec![0.0; n], vec![0.0; n], 0)
    }

    pub fn with_state(config: AdamWConfig, layout: &ParamLayout, m: Vec<f64>, v: Vec<f64>, updates: u64) -> Self {
        let mut decay_mask = vec![false; layout.total()];
        for t in layout.tensors() {
            decay_mask[t.range()].fill(t.decay);
        }
        Self {
            config,
            m,
            v,
            updates,
            decay_mask,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.updates += 1;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.updates as i32);
        let c2 = 1.0 - beta2.powi(self.updates as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            if self.decay_mask[i] {
                params[i] -= lr * weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule::new(1.0, 0.1, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_abs_diff_eq!(s.at(0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(9), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(10), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(99), 0.1, epsilon = 1e-15);
        for step in 10..99 {
            assert!(s.at(step + 1) <= s.at(step));
        }
        let tiny = LrSchedule::new(2.0, 0.0, 0.5, 1);
        assert_eq!(tiny.at(0), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let config = ModelConfig {
            layers: 1,
            hidden_dim: 4,
            heads: 1,
            ffn_dim: 4,
            vocab_size: 8,
            max_seq_len: 4,
            timestep_dim: 4,
            ..ModelConfig::default()
        };
        let layout = ParamLayout::new(&config);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &layout);
        let mut params = vec![1.0; layout.total()];
        let grads: Vec<f64> = (0..layout.total())
            .map(|i| if i % 2 == 0 { 3.0 } else { -0.5 })
            .collect();
        opt.step(&mut params, &grads, 0.01);
        for (p, g) in params.iter().zip(&grads) {
            assert_abs_diff_eq!(*p, 1.0 - 0.01 * g.signum(), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let config = ModelConfig {
            layers: 1,
            hidden_dim: 4,
            heads: 1,
            ffn_dim: 4,
            vocab_size: 8,
            max_seq_len: 4,
            timestep_dim: 4,
            ..ModelConfig::default()
        };
        let layout = ParamLayout::new(&config);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(cfg, &layout);
        let before: Vec<f64> = (0..layout.total()).map(|i| (i as f64).sin()).collect();
        let mut params = before.clone();
        opt.step(&mut params, &vec![0.3; layout.total()], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
        let mut g = vec![3.0, 4.0];
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g, vec![3.0, 4.0]);
    }
}
