//! Adam, cosine-annealed learning rates and early stopping.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `name` identifies the block in diagnostics.
pub fn adam_step(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{name}: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("{name}: learning rate {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in block {name} at index {i}: {}",
            grads[i]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleMode {
    Constant,
    #[default]
    Cosine,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub mode: ScheduleMode,
}

pub fn cosine_lr(epoch: usize, schedule: &Schedule) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    Ok(match schedule.mode {
        ScheduleMode::Constant => schedule.base_lr,
        ScheduleMode::Cosine => {
            let frac = epoch as f64 / schedule.total_epochs as f64;
            schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Stop once the best value of a higher-is-better metric has gone `patience`
/// epochs without a strict improvement of at least `min_delta`.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> EarlyStop {
    let Some((&first, rest)) = history.split_first() else {
        return EarlyStop::Continue;
    };
    let mut best = first;
    let mut since = 0;
    for &v in rest {
        if v > best && v - best >= min_delta {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    if patience > 0 && since >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step("w", &mut p, &[0.0, 0.0], &mut s, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step("w", &mut p, &[1.0], &mut s, &AdamConfig::default(), 1e-3).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18, "{}", p[0]);
        assert!((p[0] + 9.99999995e-4).abs() < 1e-11);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        adam_step("w", &mut p, &[1.0], &mut s, &cfg, 1e-3).unwrap();
        let after_one = p[0];
        adam_step("w", &mut p, &[1.0], &mut s, &cfg, 1e-3).unwrap();
        assert!(after_one < 0.0 && p[0] < after_one);
    }

    #[test]
    fn nan_gradient_names_block() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let err = adam_step("w_k", &mut p, &[0.0, f64::NAN], &mut s, &AdamConfig::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("w_k"));
    }

    #[test]
    fn update_is_elementwise() {
        let g = [0.3, -1.2, 0.0, 2.5, -0.1, 0.7];
        let cfg = AdamConfig::default();
        let mut whole = vec![0.5; 6];
        let mut s = AdamState::new(6);
        adam_step("a", &mut whole, &g, &mut s, &cfg, 0.01).unwrap();
        for i in 0..6 {
            let mut one = vec![0.5];
            let mut si = AdamState::new(1);
            adam_step("b", &mut one, &g[i..=i], &mut si, &cfg, 0.01).unwrap();
            assert_eq!(one[0], whole[i]);
        }
    }

    #[test]
    fn cosine_examples() {
        let s = Schedule { base_lr: 0.2, total_epochs: 10, mode: ScheduleMode::Cosine };
        assert_eq!(cosine_lr(0, &s).unwrap(), 0.2);
        assert!((cosine_lr(5, &s).unwrap() - 0.1).abs() < 1e-15);
        assert!(cosine_lr(10, &s).is_err());
        let c = Schedule { mode: ScheduleMode::Constant, ..s };
        assert_eq!(cosine_lr(7, &c).unwrap(), 0.2);
        let lrs: Vec<f64> = (0..10).map(|e| cosine_lr(e, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop_check(&[0.1, 0.2, 0.3, 0.4], 2, 0.0), EarlyStop::Continue);
        assert_eq!(early_stop_check(&[0.5; 4], 3, 0.01), EarlyStop::Stop);
        let h = [0.5, 0.6, 0.59, 0.58, 0.57];
        assert_eq!(early_stop_check(&h[..4], 3, 0.0), EarlyStop::Continue);
        assert_eq!(early_stop_check(&h, 3, 0.0), EarlyStop::Stop);
    }
}
