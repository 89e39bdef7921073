//! AdamW and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            *p -= decay * *p + lr * update;
        }
    }
}

/// Linear warmup from `max_lr / div_factor` to `max_lr` over the first
/// `pct_start` of training, then cosine annealing down to
/// `max_lr / (div_factor * final_div_factor)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, pct_start: f64) -> Result<Self> {
        let s = Self {
            max_lr,
            total_steps,
            pct_start,
            div_factor: 25.0,
            final_div_factor: 1e4,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr >= 0.0) || !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::InvalidArgument(
                "one-cycle needs max_lr >= 0 and pct_start in (0, 1)".into(),
            ));
        }
        if self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return Err(Error::InvalidArgument("division factors must be positive".into()));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        ((self.pct_start * self.total_steps as f64).round() as usize).max(1)
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / self.final_div_factor
    }

    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let up = self.warmup_steps();
        if step < up {
            let t = step as f64 / up as f64;
            return self.initial_lr() + t * (self.max_lr - self.initial_lr());
        }
        let down = self.total_steps.saturating_sub(up + 1).max(1);
        let t = ((step - up) as f64 / down as f64).min(1.0);
        self.final_lr() + 0.5 * (self.max_lr - self.final_lr()) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_a_noop() {
        let mut opt = AdamW::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        opt.step(&mut p, &[0.3, -0.1, 2.0], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // bias-corrected first step is g / (|g| + eps)
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[2.0, -0.5], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(1, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let s = OneCycle::new(1.25e-3, 1000, 0.3).unwrap();
        assert!((s.lr(0) - 1.25e-3 / 25.0).abs() < 1e-18);
        assert!((s.lr(300) - 1.25e-3).abs() < 1e-15);
        assert!((s.lr(999) - s.final_lr()).abs() < 1e-15);
        for i in 1..300 {
            assert!(s.lr(i) > s.lr(i - 1));
        }
        for i in 301..1000 {
            assert!(s.lr(i) < s.lr(i - 1));
        }
        assert!(OneCycle::new(1e-3, 10, 1.0).is_err());
    }
}
