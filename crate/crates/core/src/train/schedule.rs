use crate::error::{Error, Result};

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("training progress {p} outside [0, 1]")));
    }
    Ok(())
}

/// Adversarial weight `λ_p = 2 / (1 + exp(−gain·p)) − 1`.
pub fn lambda_schedule(p: f64, gain: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(2.0 / (1.0 + (-gain * p).exp()) - 1.0)
}

/// Annealed learning rate `α₀ / (1 + a·p)^b`.
pub fn lr_schedule(p: f64, base_lr: f64, a: f64, b: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(base_lr / (1.0 + a * p).powf(b))
}

/// Progress of step `step` (0-based) out of `total`: moves linearly from 0 at
/// the first step to 1 at the last.
pub fn progress(step: usize, total: usize) -> f64 {
    if total <= 1 {
        1.0
    } else {
        step.min(total - 1) as f64 / (total - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints() {
        assert_eq!(lambda_schedule(0.0, 10.0).unwrap(), 0.0);
        assert!((lambda_schedule(1.0, 10.0).unwrap() - 0.9999092).abs() <= 1e-6);
        assert!((lambda_schedule(0.5, 10.0).unwrap() - 0.9866143).abs() <= 1e-6);
        assert!(lambda_schedule(1.5, 10.0).is_err());
        assert!(lambda_schedule(-0.1, 10.0).is_err());
    }

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_schedule(0.0, 0.01, 10.0, 0.75).unwrap(), 0.01);
        assert!((lr_schedule(1.0, 0.01, 10.0, 0.75).unwrap() - 0.0016556).abs() <= 1e-6);
    }

    #[test]
    fn progress_spans_unit_interval() {
        assert_eq!(progress(0, 10), 0.0);
        assert_eq!(progress(9, 10), 1.0);
        assert_eq!(progress(0, 1), 1.0);
    }
}
