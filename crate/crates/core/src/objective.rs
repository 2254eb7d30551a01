//! Weighted NELBO objective.
//!
//! Each sequence contributes `w(t) · CE_masked / L`, where
//! `w(t) = |α'_t|^p / (1 − α_t)` and `CE_masked` sums the cross-entropy over
//! masked positions only. Averaging over sequences with `t` drawn per
//! sequence is a single-sample estimate of the continuous-time integral.

use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;
use crate::TokenId;

/// What `p = 0` means for the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPowerMode {
    /// Keep `1 / (1 − α_t)`; only the derivative factor disappears.
    #[default]
    RetainRate,
    /// Drop the whole weight: plain masked cross-entropy.
    Unweighted,
}

impl ZeroPowerMode {
    pub fn name(&self) -> &'static str {
        match self {
            ZeroPowerMode::RetainRate => "retain_rate",
            ZeroPowerMode::Unweighted => "unweighted",
        }
    }
}

/// `|α'_t|^p / (1 − α_t)`.
pub fn nelbo_weight(schedule: &NoiseSchedule, t: f64, tau: f64, power: f64) -> Result<f64> {
    nelbo_weight_with(schedule, t, tau, power, ZeroPowerMode::RetainRate)
}

pub fn nelbo_weight_with(
    schedule: &NoiseSchedule,
    t: f64,
    tau: f64,
    power: f64,
    zero_power: ZeroPowerMode,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&power) {
        return Err(Error::Domain(format!("softening power must lie in [0,1], got {power}")));
    }
    let rate = schedule.masking_rate(t, tau)?;
    if power == 0.0 && zero_power == ZeroPowerMode::Unweighted {
        return Ok(1.0);
    }
    let derivative = schedule.alpha_prime_magnitude(t, tau)?;
    Ok(derivative.powf(power) / rate)
}

/// Sum over masked positions of `−log softmax(logits)[target]`, and the
/// number of masked positions. `logits` is row-major `len × vocab`.
pub fn masked_cross_entropy(
    logits: &[f64],
    vocab: usize,
    original: &[TokenId],
    mask_indicator: &[bool],
) -> Result<(f64, usize)> {
    if original.len() != mask_indicator.len() || logits.len() != original.len() * vocab {
        return Err(Error::Shape(format!(
            "logits of length {} do not match {} positions × {vocab} classes",
            logits.len(),
            original.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (pos, (&target, &masked)) in original.iter().zip(mask_indicator).enumerate() {
        if !masked {
            continue;
        }
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN logit at position {pos}")));
        }
        let target = target as usize;
        if target >= vocab {
            return Err(Error::Shape(format!("target id {target} outside vocab {vocab}")));
        }
        total += negative_log_softmax(row, target);
        count += 1;
    }
    Ok((total, count))
}

/// `−log softmax(row)[target]`, stable for large logits.
pub fn negative_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return if row[target] == f64::INFINITY {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    (max + log_sum - row[target]).max(0.0)
}

/// Loss contribution of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub weighted_loss: f64,
    pub raw_masked_ce_sum: f64,
    pub masked_count: usize,
    pub weight: f64,
    pub t: f64,
    pub sequence_length: usize,
}

impl LossBreakdown {
    pub fn new(weight: f64, t: f64, raw_masked_ce_sum: f64, masked_count: usize, sequence_length: usize) -> Self {
        let weighted_loss = if masked_count == 0 || sequence_length == 0 {
            0.0
        } else {
            weight * raw_masked_ce_sum / sequence_length as f64
        };
        Self {
            weighted_loss,
            raw_masked_ce_sum,
            masked_count,
            weight,
            t,
            sequence_length,
        }
    }
}

/// Mean of the per-sequence weighted losses.
pub fn nelbo_loss(batch: &[LossBreakdown]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(batch.iter().map(|b| b.weighted_loss).sum::<f64>() / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::ScheduleKind;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn linear_weight_ignores_power() {
        let s = NoiseSchedule::linear();
        for i in 1..=10 {
            let t = i as f64 / 11.0;
            for p in [0.0, 0.1, 0.5, 1.0] {
                assert_abs_diff_eq!(nelbo_weight(&s, t, 0.0, p).unwrap(), 1.0 / t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cosine_weight_closed_form() {
        let s = NoiseSchedule::cosine();
        for t in [0.1, 0.4, 0.8] {
            let expected = FRAC_PI_2 * (FRAC_PI_2 * (1.0 - t)).sin() / (1.0 - (FRAC_PI_2 * (1.0 - t)).cos());
            assert_abs_diff_eq!(nelbo_weight(&s, t, 0.0, 1.0).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_power_modes() {
        let s = NoiseSchedule::with_default_clamp(ScheduleKind::SIMPLE_GAUSSIAN).unwrap();
        let rate = s.masking_rate(0.3, 0.0).unwrap();
        assert_abs_diff_eq!(nelbo_weight(&s, 0.3, 0.0, 0.0).unwrap(), 1.0 / rate, epsilon = 1e-12);
        let w = nelbo_weight_with(&s, 0.3, 0.0, 0.0, ZeroPowerMode::Unweighted).unwrap();
        assert_eq!(w, 1.0);
        assert!(nelbo_weight(&s, 0.3, 0.0, 1.5).is_err());
        assert!(nelbo_weight(&s, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let vocab = 7;
        let logits = vec![0.0; 3 * vocab];
        assert_eq!(
            masked_cross_entropy(&logits, vocab, &[1, 2, 3], &[false; 3]).unwrap(),
            (0.0, 0)
        );
        let (ce, n) = masked_cross_entropy(&logits, vocab, &[1, 2, 3], &[false, true, false]).unwrap();
        assert_eq!(n, 1);
        assert_abs_diff_eq!(ce, (vocab as f64).ln(), epsilon = 1e-12);

        let mut confident = vec![0.0; vocab];
        confident[2] = 800.0;
        let (ce, _) = masked_cross_entropy(&confident, vocab, &[2], &[true]).unwrap();
        assert!(ce < 1e-300);

        let mut nan = vec![0.0; vocab];
        nan[0] = f64::NAN;
        assert!(matches!(
            masked_cross_entropy(&nan, vocab, &[2], &[true]),
            Err(Error::Numeric(_))
        ));
        // Unmasked NaN rows are never read.
        assert!(masked_cross_entropy(&nan, vocab, &[2], &[false]).is_ok());
        assert!(masked_cross_entropy(&logits, vocab, &[1, 2], &[true, true]).is_err());
    }

    #[test]
    fn loss_arithmetic() {
        let b = LossBreakdown::new(2.0, 0.5, 3.0, 2, 6);
        assert_eq!(nelbo_loss(&[b]).unwrap(), 1.0);
        let empty = LossBreakdown::new(5.0, 0.5, 0.0, 0, 6);
        assert_eq!(empty.weighted_loss, 0.0);
        assert_eq!(nelbo_loss(&[empty, empty]).unwrap(), 0.0);
        assert!(nelbo_loss(&[]).is_err());
    }

    #[test]
    fn linear_uniform_model_gives_two_ln_v() {
        let vocab = 11;
        let len = 9;
        let s = NoiseSchedule::linear();
        let weight = nelbo_weight(&s, 0.5, 0.0, 1.0).unwrap();
        let logits = vec![0.25; len * vocab];
        let original: Vec<TokenId> = (0..len as TokenId).map(|i| 5 + i % 6).collect();
        let (ce, n) = masked_cross_entropy(&logits, vocab, &original, &vec![true; len]).unwrap();
        let loss = nelbo_loss(&[LossBreakdown::new(weight, 0.5, ce, n, len)]).unwrap();
        assert_abs_diff_eq!(loss, 2.0 * (vocab as f64).ln(), epsilon = 1e-12);
    }
}
