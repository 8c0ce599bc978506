use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// Straight line from the peak down to zero at the last step.
    #[default]
    Linear,
    Constant,
}

/// Linear ramp from 0 to `base_lr` over the first `warmup_fraction` of
/// `total_steps`, then `decay`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64, decay: Decay) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Argument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Argument(format!("step {step} beyond total {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Argument(format!("warmup_fraction {warmup_fraction} outside [0, 1)")));
    }
    let (t, total) = (step as f64, total_steps as f64);
    let warmup = warmup_fraction * total;
    if t < warmup {
        return Ok(base_lr * (t / warmup));
    }
    Ok(match decay {
        Decay::Constant => base_lr,
        Decay::Linear => base_lr * ((total - t) / (total - warmup)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        let lr = |s| lr_schedule(s, 1000, 1e-4, 0.1, Decay::Linear).unwrap();
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(100), 1e-4);
        assert_eq!(lr(1000), 0.0);
        assert!((lr(550) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(700, 1000, 1e-4, 0.1, Decay::Constant).unwrap(), 1e-4);
        assert!(lr_schedule(0, 0, 1e-4, 0.1, Decay::Linear).is_err());
        assert!(lr_schedule(1001, 1000, 1e-4, 0.1, Decay::Linear).is_err());
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_schedule(0, 10, 2.0, 0.0, Decay::Linear).unwrap(), 2.0);
    }
}
