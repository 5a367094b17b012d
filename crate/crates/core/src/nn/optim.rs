use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters and the linear warmup/decay schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 300,
            total_steps: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("epsilon must be positive and weight_decay non-negative".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Same settings with `total_steps` replaced; validated.
    pub fn with_total_steps(&self, total_steps: usize) -> Result<Self> {
        let cfg = OptimizerConfig {
            total_steps,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear ramp from 0 to `max_lr` over the warmup, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        cfg.max_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
        cfg.max_lr * (cfg.total_steps - step) as f64 / span
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with an explicit learning rate.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim(params.len(), grads.len(), "gradient"));
    }
    if state.m.len() != params.len() {
        return Err(Error::dim(params.len(), state.m.len(), "optimizer state"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p * decay - lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// AdamW update using the scheduled learning rate at `step`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    step: usize,
) -> Result<()> {
    adamw_update(params, grads, state, cfg, lr_schedule(step, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max_lr: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            max_lr,
            weight_decay: wd,
            warmup_steps: 0,
            total_steps: 1_000_000,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![0.5, -1.5, 3.0];
        let mut st = AdamState::new(3);
        for s in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut st, &cfg(0.1, 0.0), s).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.5, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adamw_update(&mut p, &[1.0], &mut st, &cfg(0.1, 0.0), 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
        let mut q = vec![0.0];
        let mut st = AdamState::new(1);
        adamw_update(&mut q, &[-250.0], &mut st, &cfg(0.1, 0.0), 0.1).unwrap();
        assert!((q[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn pure_weight_decay_is_multiplicative() {
        let c = cfg(0.1, 0.01);
        let mut p = vec![2.0];
        let mut st = AdamState::new(1);
        for _ in 0..10 {
            adamw_update(&mut p, &[0.0], &mut st, &c, 0.1).unwrap();
        }
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01f64).powi(10)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(adamw_update(&mut p, &[1.0], &mut st, &cfg(0.1, 0.0), 0.1).is_err());
        let mut st = AdamState::new(3);
        assert!(adamw_update(&mut p, &[1.0, 1.0], &mut st, &cfg(0.1, 0.0), 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let c = OptimizerConfig {
            warmup_steps: 300,
            total_steps: 1300,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(300, &c), c.max_lr);
        assert_eq!(lr_schedule(1300, &c), 0.0);
        assert!((lr_schedule(150, &c) - c.max_lr / 2.0).abs() < 1e-20);
        assert!((lr_schedule(800, &c) - c.max_lr / 2.0).abs() < 1e-20);
        let mut prev = 0.0;
        for s in 0..=300 {
            let lr = lr_schedule(s, &c);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 300..=1300 {
            let lr = lr_schedule(s, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::default().with_total_steps(300).is_err());
        assert!(OptimizerConfig::default().with_total_steps(301).is_ok());
        let parsed: OptimizerConfig = serde_json::from_str(r#"{"max_lr": 0.001}"#).unwrap();
        assert_eq!(parsed.max_lr, 0.001);
        assert_eq!(parsed.beta2, 0.999);
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"lr": 0.001}"#).is_err());
    }
}
