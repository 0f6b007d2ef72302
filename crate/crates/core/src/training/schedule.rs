use crate::error::{Error, Result};

/// Warmup-then-exponential-decay learning rate.
///
/// Steps are 1-based. The rate ramps linearly from `init` at step 1 to
/// `max` at step `warmup`, then decays geometrically so that it reaches
/// `final_` after `horizon` further steps, and stays there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub init: f64,
    pub max: f64,
    pub final_: f64,
    pub warmup: usize,
    pub horizon: usize,
}

impl NoamSchedule {
    pub fn new(init: f64, max: f64, final_: f64, warmup: usize, horizon: usize) -> Result<Self> {
        if init > max {
            return Err(Error::config("lr_init", "must not exceed lr_max"));
        }
        if final_ > max {
            return Err(Error::config("lr_final", "must not exceed lr_max"));
        }
        if !(init > 0.0 && final_ > 0.0) {
            return Err(Error::config("lr_init", "learning rates must be positive"));
        }
        if warmup == 0 {
            return Err(Error::config("warmup_steps", "must be positive"));
        }
        Ok(Self {
            init,
            max,
            final_,
            warmup,
            horizon: horizon.max(1),
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        assert!(step >= 1, "steps are 1-based");
        if step < self.warmup {
            let frac = (step - 1) as f64 / (self.warmup - 1) as f64;
            return self.init + (self.max - self.init) * frac;
        }
        if step == self.warmup {
            return self.max;
        }
        let progress = (step - self.warmup) as f64 / self.horizon as f64;
        if progress >= 1.0 {
            return self.final_;
        }
        (self.max * (self.final_ / self.max).powf(progress)).max(self.final_)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoamSchedule::new(1e-3, 2e-3, 1e-3, 10, 90).unwrap();
        assert_eq!(s.lr(1), 1e-3);
        assert_eq!(s.lr(10), 2e-3);
        assert!((s.lr(100) - 1e-3).abs() < 1e-12);
        assert_eq!(s.lr(5000), 1e-3);
    }

    #[test]
    fn decay_formula_at_midpoint() {
        let s = NoamSchedule::new(1e-4, 2e-3, 1e-4, 4, 100).unwrap();
        let want = 2e-3 * (0.05f64).powf(0.5);
        assert!((s.lr(54) - want).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_warmup_and_monotone() {
        let s = NoamSchedule::new(1e-4, 2e-3, 1e-4, 20, 200).unwrap();
        assert!((s.lr(21) - s.lr(20)).abs() < 2e-3 * 0.02);
        for t in 1..20 {
            assert!(s.lr(t + 1) > s.lr(t));
        }
        for t in 20..300 {
            assert!(s.lr(t + 1) <= s.lr(t));
            assert!(s.lr(t) >= 1e-4);
        }
    }

    #[test]
    fn rejects_inverted_rates() {
        assert!(NoamSchedule::new(1e-3, 2e-3, 3e-3, 10, 10).is_err());
        assert!(NoamSchedule::new(3e-3, 2e-3, 1e-3, 10, 10).is_err());
    }
}
