/// Cosine annealing with warm restarts over whole epochs: the rate decays
/// from `base_lr` to `min_lr` across a period, then snaps back; each
/// period is `mult` times as long as the one before.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineWarmRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub initial_period: usize,
    pub mult: usize,
}

impl CosineWarmRestarts {
    pub fn new(base_lr: f64, min_lr: f64, initial_period: usize, mult: usize) -> Self {
        assert!(initial_period > 0, "period must be positive");
        assert!(mult > 0, "period multiplier must be positive");
        Self {
            base_lr,
            min_lr,
            initial_period,
            mult,
        }
    }

    /// Rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut start = 0usize;
        let mut period = self.initial_period;
        while epoch >= start + period {
            start += period;
            period = period.saturating_mul(self.mult);
        }
        let frac = (epoch - start) as f64 / period as f64;
        self.min_lr
            + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restarts_return_to_base() {
        let s = CosineWarmRestarts::new(0.1, 0.001, 10, 2);
        // Restart boundaries for period 10 then 20 then 40.
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(10), 0.1);
        assert_eq!(s.lr_at(30), 0.1);
        assert_eq!(s.lr_at(70), 0.1);
        // One epoch before each restart sits near the floor.
        for e in [9, 29, 69] {
            assert!(s.lr_at(e) < s.lr_at(e - 1));
            assert!(s.lr_at(e) > s.min_lr);
        }
    }

    #[test]
    fn halfway_through_first_period_is_midpoint() {
        let s = CosineWarmRestarts::new(0.2, 0.0, 10, 2);
        assert!((s.lr_at(5) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn monotone_within_a_period() {
        let s = CosineWarmRestarts::new(0.1, 0.001, 10, 2);
        for e in 1..10 {
            assert!(s.lr_at(e) < s.lr_at(e - 1), "epoch {e}");
        }
        for e in 11..30 {
            assert!(s.lr_at(e) < s.lr_at(e - 1), "epoch {e}");
        }
    }

    #[test]
    fn mult_one_keeps_constant_period() {
        let s = CosineWarmRestarts::new(1.0, 0.0, 5, 1);
        for k in 0..6 {
            assert_eq!(s.lr_at(5 * k), 1.0);
        }
    }
}
