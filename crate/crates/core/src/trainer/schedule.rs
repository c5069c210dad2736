use crate::error::{Error, Result};

/// Polynomial decay `base_lr * (1 - c/t)^0.9`.
pub fn lr_schedule(c: usize, t: usize, base_lr: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument(
            "total iterations must be positive".into(),
        ));
    }
    if c > t {
        return Err(Error::InvalidArgument(format!(
            "iteration {c} beyond total {t}"
        )));
    }
    Ok(base_lr * (1.0 - c as f64 / t as f64).powf(0.9))
}

/// Consistency ramp-up `exp(-5 (1 - E/L)^2)` until epoch `L`, then 1.
pub fn ramp_up_weight(epoch: usize, length: usize) -> f64 {
    if epoch >= length {
        return 1.0;
    }
    let x = 1.0 - epoch as f64 / length.max(1) as f64;
    (-5.0 * x * x).exp()
}

/// EMA decay: `rampup` while `epoch <= length`, `main` afterwards.
pub fn ema_decay(epoch: usize, length: usize, rampup: f64, main: f64) -> f64 {
    if epoch <= length {
        rampup
    } else {
        main
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lr_examples() {
        assert_eq!(lr_schedule(0, 3000, 0.01).unwrap(), 0.01);
        assert_eq!(lr_schedule(3000, 3000, 0.01).unwrap(), 0.0);
        let mid = lr_schedule(1500, 3000, 0.01).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.0053589).abs() < 1e-7);
        assert!(lr_schedule(3001, 3000, 0.01).is_err());
        assert!(lr_schedule(0, 0, 0.01).is_err());
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(ramp_up_weight(50, 50), 1.0);
        assert_eq!(ramp_up_weight(51, 50), 1.0);
        assert!((ramp_up_weight(0, 50) - 0.006_737_946_999).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_decay(10, 50, 0.99, 0.999), 0.99);
        assert_eq!(ema_decay(50, 50, 0.99, 0.999), 0.99);
        assert_eq!(ema_decay(51, 50, 0.99, 0.999), 0.999);
    }

    proptest! {
        #[test]
        fn lr_non_increasing(t in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let (a, b) = (a.min(t), b.min(t));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr_schedule(hi, t, 0.01).unwrap() <= lr_schedule(lo, t, 0.01).unwrap());
        }

        #[test]
        fn ramp_non_decreasing(l in 1usize..200, e in 0usize..300) {
            let w = ramp_up_weight(e, l);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!(ramp_up_weight(e + 1, l) >= w);
        }
    }
}
