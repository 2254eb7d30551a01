//! Noise schedules for continuous-time masked diffusion.
//!
//! Every schedule is a map from diffusion time `t ∈ (0,1)` (and training
//! progress `τ ∈ [0,1]`) to a masking rate `1 − α_t`. Distributional
//! schedules are defined through their quantile function: with `t` uniform,
//! `Q(t)` has the stated distribution, and `|α'_t| = 1 / pdf(Q(t))`.
//!
//! Note the cosine schedule uses `α_t = cos(π/2 · (1 − t))`, so its masking
//! rate *decreases* in `t`, while every other schedule is non-decreasing.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default clamp keeping masking rates inside `[ε, 1 − ε]`.
pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-4;

/// Absolute tolerance of the mixture quantile bisection.
const BISECTION_TOL: f64 = 1e-10;

/// Seed of [`NoiseSchedule::expected_masking_rate`].
const EXPECTATION_SEED: u64 = 0x005e_ed0f_5c4e_d01e;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `1 − α_t = t`.
    Linear,
    /// `α_t = cos(π/2 · (1 − t))`.
    Cosine,
    /// Masking rates distributed as `N(mean, std²)`.
    SimpleGaussian { mean: f64, std: f64 },
    /// Masking rates distributed as
    /// `w1·N(mu1, sigma1²) + (1 − w1)·N(μ₂(τ), sigma2²)` with
    /// `μ₂(τ) = mu2_lo + (mu2_hi − mu2_lo)(1 − e^(−τ))`.
    BimodalGaussian {
        w1: f64,
        mu1: f64,
        sigma1: f64,
        mu2_lo: f64,
        mu2_hi: f64,
        sigma2: f64,
    },
    /// Degenerate schedule with a constant masking rate (classic MLM).
    Fixed { rate: f64 },
}

impl ScheduleKind {
    /// `N(0.3, 0.1²)`.
    pub const SIMPLE_GAUSSIAN: ScheduleKind = ScheduleKind::SimpleGaussian { mean: 0.3, std: 0.1 };

    /// Left mode `0.6·N(0.12, 0.02²)`, right mode drifting from 0.4 towards
    /// 0.85 with `σ₂ = 0.08`.
    pub const BIMODAL_GAUSSIAN: ScheduleKind = ScheduleKind::BimodalGaussian {
        w1: 0.6,
        mu1: 0.12,
        sigma1: 0.02,
        mu2_lo: 0.4,
        mu2_hi: 0.85,
        sigma2: 0.08,
    };

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::SimpleGaussian { .. } => "simple_gaussian",
            ScheduleKind::BimodalGaussian { .. } => "bimodal_gaussian",
            ScheduleKind::Fixed { .. } => "fixed",
        }
    }
}

/// A validated schedule: a [`ScheduleKind`] plus its clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    clamp_epsilon: f64,
}

/// One draw of diffusion time and its masking rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSample {
    pub t: f64,
    pub masking_rate: f64,
    pub tau: f64,
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl fmt::Display for MonteCarloEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ± {:.6} (n = {})", self.mean, self.std_error, self.samples)
    }
}

fn finite_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}

fn normal(mean: f64, std: f64) -> Normal {
    // Parameters are validated at construction.
    Normal::new(mean, std).expect("validated gaussian parameters")
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, clamp_epsilon: f64) -> Result<Self> {
        if !(clamp_epsilon > 0.0 && clamp_epsilon <= 0.01) {
            return Err(Error::Domain(format!(
                "clamp_epsilon must lie in (0, 0.01], got {clamp_epsilon}"
            )));
        }
        match kind {
            ScheduleKind::Linear | ScheduleKind::Cosine => {}
            ScheduleKind::SimpleGaussian { mean, std } => {
                finite("mean", mean)?;
                finite_positive("std", std)?;
            }
            ScheduleKind::BimodalGaussian {
                w1,
                mu1,
                sigma1,
                mu2_lo,
                mu2_hi,
                sigma2,
            } => {
                finite("mu1", mu1)?;
                finite_positive("sigma1", sigma1)?;
                finite_positive("sigma2", sigma2)?;
                if !(w1 > 0.0 && w1 < 1.0) {
                    return Err(Error::Domain(format!("w1 must lie in (0,1), got {w1}")));
                }
                let in_unit = |v: f64| v > 0.0 && v < 1.0;
                if !(in_unit(mu2_lo) && in_unit(mu2_hi) && mu2_lo < mu2_hi) {
                    return Err(Error::Domain(format!(
                        "need 0 < mu2_lo < mu2_hi < 1, got {mu2_lo}, {mu2_hi}"
                    )));
                }
            }
            ScheduleKind::Fixed { rate } => {
                if !(rate > 0.0 && rate < 1.0) {
                    return Err(Error::Domain(format!("fixed rate must lie in (0,1), got {rate}")));
                }
            }
        }
        Ok(Self { kind, clamp_epsilon })
    }

    pub fn with_default_clamp(kind: ScheduleKind) -> Result<Self> {
        Self::new(kind, DEFAULT_CLAMP_EPSILON)
    }

    pub fn linear() -> Self {
        Self::with_default_clamp(ScheduleKind::Linear).unwrap()
    }

    pub fn cosine() -> Self {
        Self::with_default_clamp(ScheduleKind::Cosine).unwrap()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn clamp_epsilon(&self) -> f64 {
        self.clamp_epsilon
    }

    /// Whether the masking rate decreases as `t` grows.
    pub fn is_decreasing(&self) -> bool {
        matches!(self.kind, ScheduleKind::Cosine)
    }

    fn check_domain(t: f64, tau: f64) -> Result<()> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("t must lie in (0,1), got {t}")));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("tau must lie in [0,1], got {tau}")));
        }
        Ok(())
    }

    fn clamp(&self, rate: f64) -> f64 {
        rate.clamp(self.clamp_epsilon, 1.0 - self.clamp_epsilon)
    }

    /// Mean of the drifting right mode, `μ₂(τ)`. Defined for any `τ ≥ 0`.
    /// Returns `None` for non-bimodal schedules.
    pub fn right_mode_mean(&self, tau: f64) -> Option<f64> {
        match self.kind {
            ScheduleKind::BimodalGaussian { mu2_lo, mu2_hi, .. } => Some(right_mode_mean(mu2_lo, mu2_hi, tau)),
            _ => None,
        }
    }

    /// Unclamped quantile of the masking-rate distribution.
    fn raw_rate(&self, t: f64, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::Cosine => 1.0 - (FRAC_PI_2 * (1.0 - t)).cos(),
            ScheduleKind::SimpleGaussian { mean, std } => normal(mean, std).inverse_cdf(t),
            ScheduleKind::BimodalGaussian { .. } => self.mixture(tau).quantile(t),
            ScheduleKind::Fixed { rate } => rate,
        }
    }

    fn mixture(&self, tau: f64) -> Mixture {
        match self.kind {
            ScheduleKind::BimodalGaussian {
                w1,
                mu1,
                sigma1,
                mu2_lo,
                mu2_hi,
                sigma2,
            } => Mixture {
                w1,
                left: normal(mu1, sigma1),
                right: normal(right_mode_mean(mu2_lo, mu2_hi, tau), sigma2),
                lo: (mu1 - 40.0 * sigma1).min(mu2_lo - 40.0 * sigma2),
                hi: (mu1 + 40.0 * sigma1).max(mu2_hi + 40.0 * sigma2),
            },
            _ => unreachable!("mixture of a non-bimodal schedule"),
        }
    }

    /// `1 − α_t`, clamped into `[ε, 1 − ε]`.
    pub fn masking_rate(&self, t: f64, tau: f64) -> Result<f64> {
        Self::check_domain(t, tau)?;
        Ok(self.clamp(self.raw_rate(t, tau)))
    }

    /// `|dα_t/dt|`. For distributional schedules this is `1 / pdf` at the
    /// (clamped) masking rate.
    pub fn alpha_prime_magnitude(&self, t: f64, tau: f64) -> Result<f64> {
        Self::check_domain(t, tau)?;
        let value = match self.kind {
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Cosine => FRAC_PI_2 * (FRAC_PI_2 * (1.0 - t)).sin(),
            ScheduleKind::SimpleGaussian { mean, std } => {
                let rate = self.clamp(self.raw_rate(t, tau));
                1.0 / normal(mean, std).pdf(rate)
            }
            ScheduleKind::BimodalGaussian { .. } => {
                let mixture = self.mixture(tau);
                let rate = self.clamp(mixture.quantile(t));
                1.0 / mixture.pdf(rate)
            }
            ScheduleKind::Fixed { .. } => 0.0,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(format!(
                "alpha' overflow for {} at t = {t}, tau = {tau}",
                self.kind.name()
            )))
        }
    }

    /// Draws `t ~ U(0,1)` and maps it through the schedule.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R, tau: f64) -> Result<TimeSample> {
        let t = loop {
            let t: f64 = rng.random();
            if t > 0.0 {
                break t;
            }
        };
        Ok(TimeSample {
            t,
            masking_rate: self.masking_rate(t, tau)?,
            tau,
        })
    }

    /// Monte-Carlo estimate of `E[1 − α_t]` with a fixed internal seed.
    pub fn expected_masking_rate(&self, tau: f64, n_samples: usize) -> Result<MonteCarloEstimate> {
        if n_samples < 10_000 {
            return Err(Error::Domain(format!(
                "expected_masking_rate needs at least 10^4 samples, got {n_samples}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EXPECTATION_SEED);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            let rate = self.sample_time(&mut rng, tau)?.masking_rate;
            sum += rate;
            sum_sq += rate * rate;
        }
        let n = n_samples as f64;
        let mean = sum / n;
        let variance = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
        Ok(MonteCarloEstimate {
            mean,
            std_error: (variance / n).sqrt(),
            samples: n_samples,
        })
    }

    /// Finds a `t` whose masking rate is `rate`, by bisection on the
    /// monotone map `t ↦ 1 − α_t`. Rates outside the reachable range
    /// resolve to the nearest endpoint.
    pub fn time_for_rate(&self, rate: f64, tau: f64) -> Result<f64> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Domain(format!("rate must lie in (0,1), got {rate}")));
        }
        if let ScheduleKind::Fixed { .. } = self.kind {
            return Ok(0.5);
        }
        let decreasing = self.is_decreasing();
        let (mut lo, mut hi) = (f64::EPSILON, 1.0 - f64::EPSILON);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let m = self.masking_rate(mid, tau)?;
            if (m < rate) != decreasing {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn right_mode_mean(lo: f64, hi: f64, tau: f64) -> f64 {
    lo + (hi - lo) * (1.0 - (-tau).exp())
}

struct Mixture {
    w1: f64,
    left: Normal,
    right: Normal,
    lo: f64,
    hi: f64,
}

impl Mixture {
    fn cdf(&self, x: f64) -> f64 {
        self.w1 * self.left.cdf(x) + (1.0 - self.w1) * self.right.cdf(x)
    }

    fn pdf(&self, x: f64) -> f64 {
        self.w1 * self.left.pdf(x) + (1.0 - self.w1) * self.right.pdf(x)
    }

    fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (self.lo, self.hi);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}
