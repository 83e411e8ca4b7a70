//! Limited frame vote: an iterative sigma-clipped mean over per-frame live
//! probabilities, plus plain mean / median baselines.
//!
//! Each round computes the mean `E` and population standard deviation `σ` of
//! the retained frames and stops once `σ <= τ`; otherwise frames outside the
//! open band `(E - λσ, E + λσ)` are dropped and the round repeats. Retained
//! frames are tracked with a mask, so a genuine probability of exactly 0 is
//! never mistaken for a dropped frame. A round that drops nothing ends the
//! vote (fixpoint), as does the `max_iter` cap.
//!
//! Sums are taken over the retained values in sorted order, which makes
//! every result bit-for-bit independent of frame order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frames this close to the band edge, relative to the band, count as on it.
/// Symmetric frames (two frames with λ = 1, for instance) sit exactly on the
/// edge and must not be split by rounding in the mean.
const EDGE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LfvError {
    #[error("no frame probabilities to aggregate")]
    EmptyInput,
    #[error("frame {index} has probability {value} outside [0, 1]")]
    OutOfRangeProbability { index: usize, value: f64 },
    #[error("invalid vote config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfvConfig {
    /// Band half-width in standard deviations.
    pub lambda: f64,
    /// Spread at or below which the vote stops.
    pub tau: f64,
    /// Round cap; `None` means the frame count.
    pub max_iter: Option<usize>,
}

impl Default for LfvConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            tau: 0.1,
            max_iter: None,
        }
    }
}

impl LfvConfig {
    pub fn new(lambda: f64, tau: f64) -> Self {
        Self {
            lambda,
            tau,
            max_iter: None,
        }
    }

    pub fn validate(&self) -> Result<(), LfvError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(LfvError::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(LfvError::InvalidConfig(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.max_iter == Some(0) {
            return Err(LfvError::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SigmaBelowTau,
    /// A round dropped no frame (or would have dropped every frame).
    Fixpoint,
    MaxIter,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::SigmaBelowTau => "sigma_below_tau",
            Termination::Fixpoint => "fixpoint",
            Termination::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    /// Mean of the retained frames.
    pub expectation: f64,
    pub retained: Vec<bool>,
    pub iterations: usize,
    pub termination: Termination,
    /// `σ` computed in each round, in order.
    pub sigmas: Vec<f64>,
}

impl VoteResult {
    pub fn retained_count(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }
}

fn validate_probs(probs: &[f64]) -> Result<(), LfvError> {
    if probs.is_empty() {
        return Err(LfvError::EmptyInput);
    }
    match probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(index) => Err(LfvError::OutOfRangeProbability {
            index,
            value: probs[index],
        }),
        None => Ok(()),
    }
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean of ascending `values`, shifted by the minimum so that constant
/// inputs reproduce their value exactly.
fn sorted_mean(values: &[f64]) -> f64 {
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let offset = values.iter().map(|v| v - lo).sum::<f64>() / values.len() as f64;
    (lo + offset).clamp(lo, hi)
}

/// Mean and population standard deviation of ascending `values`.
fn mean_and_sigma(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = sorted_mean(values);
    let mut sq: Vec<f64> = values.iter().map(|p| (p - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}

pub fn limited_frame_vote(probs: &[f64], cfg: &LfvConfig) -> Result<VoteResult, LfvError> {
    cfg.validate()?;
    validate_probs(probs)?;
    let max_iter = cfg.max_iter.unwrap_or(probs.len()).max(1);
    let mut retained = vec![true; probs.len()];
    let mut sigmas = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let kept = sorted(probs.iter().zip(&retained).filter(|(_, &r)| r).map(|(&p, _)| p));
        let (mean, sigma) = mean_and_sigma(&kept);
        sigmas.push(sigma);
        let done = |termination| VoteResult {
            expectation: mean,
            retained: retained.clone(),
            iterations,
            termination,
            sigmas: sigmas.clone(),
        };
        if sigma <= cfg.tau {
            return Ok(done(Termination::SigmaBelowTau));
        }
        if iterations >= max_iter {
            return Ok(done(Termination::MaxIter));
        }
        let band = cfg.lambda * sigma * (1.0 - EDGE_RTOL);
        let next: Vec<bool> = probs
            .iter()
            .zip(&retained)
            .map(|(&p, &r)| r && (p - mean).abs() < band)
            .collect();
        if next == retained || !next.iter().any(|&r| r) {
            return Ok(done(Termination::Fixpoint));
        }
        retained = next;
    }
}

/// Arithmetic mean.
pub fn aggregate_mean(probs: &[f64]) -> Result<f64, LfvError> {
    if probs.is_empty() {
        return Err(LfvError::EmptyInput);
    }
    Ok(sorted_mean(&sorted(probs.iter().copied())))
}

/// Median; for even lengths the mean of the two central order statistics.
pub fn aggregate_median(probs: &[f64]) -> Result<f64, LfvError> {
    if probs.is_empty() {
        return Err(LfvError::EmptyInput);
    }
    let v = sorted(probs.iter().copied());
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_variance_stops_after_one_round() {
        let r = limited_frame_vote(&[0.9, 0.9, 0.9], &LfvConfig::new(2.0, 0.1)).unwrap();
        assert_eq!(r.expectation, 0.9);
        assert_eq!(r.sigmas, vec![0.0]);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.termination, Termination::SigmaBelowTau);
        assert_eq!(r.retained_count(), 3);
    }

    #[test]
    fn hand_derived_five_frame_case() {
        let p = [0.8, 0.82, 0.78, 0.81, 0.2];
        let r = limited_frame_vote(&p, &LfvConfig::new(1.0, 0.05)).unwrap();
        assert_eq!(r.iterations, 2);
        assert!((r.sigmas[0] - 0.241_362_8).abs() < 1e-6, "{}", r.sigmas[0]);
        assert!((r.sigmas[1] - 0.014_790_2).abs() < 1e-6, "{}", r.sigmas[1]);
        assert!((r.expectation - 0.8025).abs() < 1e-12);
        assert_eq!(r.retained, vec![true, true, true, true, false]);
        assert_eq!(r.termination, Termination::SigmaBelowTau);
    }

    #[test]
    fn wide_band_hits_fixpoint() {
        let r = limited_frame_vote(&[0.0, 1.0], &LfvConfig::new(3.0, 0.1)).unwrap();
        assert_eq!(r.termination, Termination::Fixpoint);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.expectation, 0.5);
        assert_eq!(r.retained_count(), 2);
    }

    #[test]
    fn symmetric_pair_on_the_edge_is_not_split() {
        let probs = [0.584839599209985, 0.1898834911422613];
        let r = limited_frame_vote(&probs, &LfvConfig::new(1.0, 0.05)).unwrap();
        assert_eq!(r.termination, Termination::Fixpoint);
        assert_eq!(r.retained, [true, true]);
        assert!((r.expectation - (probs[0] + probs[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_frames_are_kept_when_inliers() {
        let r = limited_frame_vote(&[0.0, 0.0, 0.0, 0.05], &LfvConfig::new(3.0, 0.01)).unwrap();
        assert_eq!(r.retained_count(), 4);
        assert!((r.expectation - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn max_iter_caps_rounds() {
        let cfg = LfvConfig {
            max_iter: Some(1),
            ..LfvConfig::new(1.0, 0.0)
        };
        let r = limited_frame_vote(&[0.8, 0.82, 0.78, 0.81, 0.2], &cfg).unwrap();
        assert_eq!(r.termination, Termination::MaxIter);
        assert_eq!(r.retained_count(), 5);
    }

    #[test]
    fn input_errors() {
        let cfg = LfvConfig::default();
        assert_eq!(limited_frame_vote(&[], &cfg), Err(LfvError::EmptyInput));
        assert_eq!(
            limited_frame_vote(&[0.5, 1.5], &cfg),
            Err(LfvError::OutOfRangeProbability { index: 1, value: 1.5 })
        );
        assert_eq!(aggregate_mean(&[]), Err(LfvError::EmptyInput));
        assert_eq!(aggregate_median(&[]), Err(LfvError::EmptyInput));
    }

    #[test]
    fn baselines() {
        assert_eq!(aggregate_mean(&[0.2, 0.8]).unwrap(), 0.5);
        assert_eq!(aggregate_mean(&[0.37]).unwrap(), 0.37);
        assert_eq!(aggregate_median(&[0.1, 0.9, 0.5]).unwrap(), 0.5);
        assert!((aggregate_median(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(aggregate_median(&[0.8, 0.8, 0.8, 0.0]).unwrap(), 0.8);
    }

    fn probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..40)
    }

    proptest! {
        #[test]
        fn expectation_within_input_range(p in probs(), lambda in 0.5f64..4.0, tau in 0.0f64..0.2) {
            let r = limited_frame_vote(&p, &LfvConfig::new(lambda, tau)).unwrap();
            let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.expectation >= lo && r.expectation <= hi);
            prop_assert!(r.retained_count() >= 1);
        }

        #[test]
        fn permutation_invariant(p in probs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = order.iter().map(|&i| p[i]).collect();
            let cfg = LfvConfig::new(1.5, 0.05);
            let a = limited_frame_vote(&p, &cfg).unwrap();
            let b = limited_frame_vote(&shuffled, &cfg).unwrap();
            prop_assert_eq!(a.expectation.to_bits(), b.expectation.to_bits());
            let permuted: Vec<bool> = order.iter().map(|&i| a.retained[i]).collect();
            prop_assert_eq!(permuted, b.retained);
            prop_assert_eq!(aggregate_mean(&p).unwrap().to_bits(), aggregate_mean(&shuffled).unwrap().to_bits());
        }

        #[test]
        fn rerun_on_retained_is_idempotent(p in probs(), lambda in 1.0f64..3.0) {
            let cfg = LfvConfig::new(lambda, 0.05);
            let first = limited_frame_vote(&p, &cfg).unwrap();
            if first.termination == Termination::MaxIter {
                return Ok(());
            }
            let kept: Vec<f64> = p.iter().zip(&first.retained).filter(|(_, &r)| r).map(|(&v, _)| v).collect();
            let again = limited_frame_vote(&kept, &cfg).unwrap();
            prop_assert_eq!(again.iterations, 1);
            prop_assert_eq!(again.expectation.to_bits(), first.expectation.to_bits());
        }

        #[test]
        fn constant_sequences_agree_across_aggregators(v in 0.0f64..=1.0, n in 1usize..30) {
            let p = vec![v; n];
            let lfv = limited_frame_vote(&p, &LfvConfig::default()).unwrap().expectation;
            prop_assert_eq!(lfv, aggregate_mean(&p).unwrap());
            prop_assert_eq!(lfv, aggregate_median(&p).unwrap());
        }
    }
}
