use std::f64::consts::PI;

use super::config::LrSchedule;

/// Learning rate for `epoch` (0-based) out of `total_epochs`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, total_epochs: usize) -> f64 {
    match *schedule {
        LrSchedule::StepDecay { lr0, factor, period } => lr0 * factor.powi((epoch / period) as i32),
        LrSchedule::Cosine { lr_hi, lr_lo } => {
            if total_epochs <= 1 {
                return lr_hi;
            }
            let progress = epoch as f64 / (total_epochs - 1) as f64;
            lr_lo + 0.5 * (lr_hi - lr_lo) * (1.0 + (PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_values() {
        let s = LrSchedule::StepDecay { lr0: 1e-3, factor: 0.9, period: 10 };
        assert_eq!(lr_at(&s, 0, 50), 1e-3);
        assert_eq!(lr_at(&s, 9, 50), 1e-3);
        assert!((lr_at(&s, 25, 50) - 8.1e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine { lr_hi: 1e-4, lr_lo: 1e-5 };
        assert_eq!(lr_at(&s, 0, 20), 1e-4);
        assert!((lr_at(&s, 19, 20) - 1e-5).abs() < 1e-20);
        let mid = lr_at(&s, 10, 21);
        assert!((mid - 5.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(&s, 0, 1), 1e-4);
    }
}
