//! Adam with global-norm clipping and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::ParameterSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
}

impl OptimizerConfig {
    /// Short-horizon defaults for desk runs.
    pub fn desk(total_steps: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            base_lr: 3e-3,
            warmup_steps: (total_steps / 10).max(1),
            total_steps,
            clip_norm: 1.0,
        }
    }

    /// Full-scale pretraining values (500k steps, 10k warmup, lr 1e-4).
    pub fn full_scale() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-6,
            base_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 500_000,
            clip_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps <= self.warmup_steps {
            bail!(
                InvalidArgument,
                "total_steps {} must exceed warmup_steps {}",
                self.total_steps,
                self.warmup_steps
            );
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(InvalidArgument, "Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.base_lr >= 0.0 && self.clip_norm > 0.0) {
            bail!(InvalidArgument, "eps and clip_norm must be positive, base_lr non-negative");
        }
        Ok(())
    }

    /// Linear warmup from 0 to `base_lr` over `warmup_steps`, then linear
    /// decay to 0 at `total_steps` (and 0 after).
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if self.total_steps <= self.warmup_steps {
            bail!(
                InvalidArgument,
                "total_steps {} must exceed warmup_steps {}",
                self.total_steps,
                self.warmup_steps
            );
        }
        let lr = if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                self.base_lr
            } else {
                self.base_lr * step as f64 / self.warmup_steps as f64
            }
        } else if step >= self.total_steps {
            0.0
        } else {
            self.base_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        };
        Ok(lr)
    }
}

/// Moments and step counter; `step` counts completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        })
    }

    /// One bias-corrected Adam update, using the learning rate of the update's
    /// 1-based index. Gradients are first rescaled so their global norm is at
    /// most `clip_norm`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<StepStats> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            bail!(InvalidArgument, "gradient and parameter shapes differ");
        }
        if !grads.all_finite() {
            bail!(Numeric, "non-finite gradient at update {}", self.step + 1);
        }
        let grad_norm = grads.l2_norm();
        let clip = if grad_norm > self.config.clip_norm {
            self.config.clip_norm / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let lr = self.config.lr_at(self.step)?;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let it = params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.m.as_mut_slice().iter_mut().zip(self.v.as_mut_slice()));
        for ((p, &g), (m, v)) in it {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(StepStats { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sched(warmup: u64, total: u64) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 0.5,
            warmup_steps: warmup,
            total_steps: total,
            ..OptimizerConfig::desk(10)
        }
    }

    #[test]
    fn schedule_shape() {
        let c = sched(100, 1000);
        assert_eq!(c.lr_at(0).unwrap(), 0.0);
        assert_eq!(c.lr_at(100).unwrap(), 0.5);
        assert_eq!(c.lr_at(50).unwrap(), 0.25);
        // midpoint of decay: 550 -> 0.5 * 450/900
        assert!((c.lr_at(550).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(c.lr_at(1000).unwrap(), 0.0);
        assert_eq!(c.lr_at(5000).unwrap(), 0.0);
        assert!(sched(100, 100).lr_at(3).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup() {
        let c = sched(37, 400);
        let lrs: Vec<f64> = (0..=400).map(|s| c.lr_at(s).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, lrs[37]);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 0.5 / 37.0 + 1e-12);
        }
    }

    fn scalar_setup(g: f64) -> (ParameterSet, ParameterSet, OptimizerState) {
        let cfg = ModelConfig::tiny(4);
        let params = ParameterSet::init(&cfg, 0).unwrap();
        let mut grads = params.zeros_like();
        grads.as_mut_slice()[0] = g;
        let opt = OptimizerState::new(sched(0, 10), &params).unwrap();
        (params, grads, opt)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, _, mut opt) = scalar_setup(0.0);
        let before = p.clone();
        let zeros = p.zeros_like();
        opt.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_update_matches_hand_formula() {
        // g = 1 (below the clip threshold): m = 0.1, v = 0.001,
        // m_hat = 1, v_hat = 1, update = lr * 1 / (1 + eps), lr = lr_at(1)
        let (mut p, g, mut opt) = scalar_setup(1.0);
        let before = p.as_slice()[0];
        let lr = opt.config.lr_at(1).unwrap();
        opt.step(&mut p, &g).unwrap();
        let expected = before - lr * 1.0 / (1.0 + 1e-6);
        assert!((p.as_slice()[0] - expected).abs() < 1e-15);
        assert_eq!(p.as_slice()[1..], ParameterSet::init(&ModelConfig::tiny(4), 0).unwrap().as_slice()[1..]);
    }

    #[test]
    fn clipping_scales_gradient() {
        // norm 10 clipped to 1 behaves like a raw gradient of 1
        let (mut p1, g10, mut o1) = scalar_setup(10.0);
        let (mut p2, g1, mut o2) = scalar_setup(1.0);
        let s = o1.step(&mut p1, &g10).unwrap();
        assert_eq!(s.grad_norm, 10.0);
        o2.step(&mut p2, &g1).unwrap();
        assert_eq!(p1, p2);
        assert!((o1.m.as_slice()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut p, mut g, mut opt) = scalar_setup(1.0);
        g.as_mut_slice()[3] = f64::NAN;
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(opt.step, 0);
    }
}
