//! Learning-rate schedule: linear warmup to the peak rate, then cosine,
//! linear, or constant behavior until the final step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Linear,
    Constant,
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Schedule::Cosine => write!(f, "cosine"),
            Schedule::Linear => write!(f, "linear"),
            Schedule::Constant => write!(f, "constant"),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "linear" => Ok(Schedule::Linear),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::InvalidConfig(format!("unknown schedule {other:?}"))),
        }
    }
}

/// Learning rate at `step` (0-based) out of `total_steps`.
pub fn lr_for(
    schedule: Schedule,
    max_lr: f64,
    warmup_steps: u64,
    step: u64,
    total_steps: u64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    if warmup_steps > total_steps {
        return Err(Error::InvalidConfig(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(max_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(match schedule {
        Schedule::Cosine => max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        Schedule::Linear => max_lr * (1.0 - progress),
        Schedule::Constant => max_lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        let lr = |step| lr_for(Schedule::Cosine, 1e-3, 100, step, 1000).unwrap();
        assert_eq!(lr(0), 0.0);
        assert!((lr(100) - 1e-3).abs() < 1e-15);
        assert!((lr(50) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn cosine_hits_zero_at_the_end() {
        let lr = lr_for(Schedule::Cosine, 1e-3, 100, 1000, 1000).unwrap();
        assert!(lr.abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint_is_half_max() {
        let lr = lr_for(Schedule::Cosine, 2e-3, 100, 550, 1000).unwrap();
        assert!((lr - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn linear_and_constant_shapes() {
        assert!((lr_for(Schedule::Linear, 1.0, 0, 250, 1000).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(lr_for(Schedule::Constant, 0.5, 0, 999, 1000).unwrap(), 0.5);
        assert_eq!(lr_for(Schedule::Linear, 1.0, 0, 1000, 1000).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_step_rejected() {
        assert!(lr_for(Schedule::Cosine, 1.0, 0, 1001, 1000).is_err());
        assert!(lr_for(Schedule::Cosine, 1.0, 2000, 0, 1000).is_err());
    }
}
