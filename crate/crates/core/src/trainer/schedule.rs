//! One-cycle learning-rate schedule with cosine warmup and anneal.

use crate::error::{Error, Result};

pub const WARMUP_FRACTION: f64 = 0.3;
pub const DIV_FACTOR: f64 = 25.0;
pub const FINAL_DIV_FACTOR: f64 = 1e4;

/// Index of the step that sits exactly on the peak.
pub fn peak_step(total_steps: u64) -> u64 {
    ((WARMUP_FRACTION * total_steps as f64).floor() as u64).max(1)
}

fn cosine(from: f64, to: f64, pct: f64) -> f64 {
    to + (from - to) * (1.0 + (std::f64::consts::PI * pct).cos()) / 2.0
}

/// Rises from `peak/25` to `peak` over the first 30% of steps, then falls
/// to `peak/25/1e4` at the last step.
pub fn onecycle_lr(step: u64, total_steps: u64, peak_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} out of range for {total_steps} total steps"
        )));
    }
    let initial = peak_lr / DIV_FACTOR;
    let last = initial / FINAL_DIV_FACTOR;
    let boundary = peak_step(total_steps);
    if step <= boundary {
        if step == boundary {
            return Ok(peak_lr);
        }
        return Ok(cosine(initial, peak_lr, step as f64 / boundary as f64));
    }
    let span = (total_steps - 1 - boundary) as f64;
    if step == total_steps - 1 {
        return Ok(last);
    }
    Ok(cosine(peak_lr, last, (step - boundary) as f64 / span))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let total = 1000;
        assert!((onecycle_lr(0, total, 1e-3).unwrap() - 4e-5).abs() < 1e-18);
        assert_eq!(onecycle_lr(300, total, 1e-3).unwrap(), 1e-3);
        assert!((onecycle_lr(999, total, 1e-3).unwrap() - 4e-9).abs() < 1e-20);
        assert!(onecycle_lr(1000, total, 1e-3).is_err());
    }

    #[test]
    fn single_maximum_at_boundary() {
        for total in [2u64, 3, 10, 150, 1001, 2000] {
            let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, 1e-3).unwrap()).collect();
            let max = lrs.iter().copied().fold(f64::MIN, f64::max);
            assert_eq!(max, 1e-3);
            assert_eq!(lrs.iter().filter(|&&v| v == max).count(), 1, "total {total}");
            assert_eq!(lrs.iter().position(|&v| v == max).unwrap() as u64, peak_step(total));
        }
    }

    #[test]
    fn monotone_phases_and_continuity() {
        let total = 2000;
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, 1e-3).unwrap()).collect();
        let b = peak_step(total) as usize;
        assert!(lrs[..=b].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[b..].windows(2).all(|w| w[1] <= w[0]));
        // no jumps larger than the steepest cosine slope allows
        let max_jump = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump < 1e-3 * std::f64::consts::PI / b as f64);
    }
}
