//! Trajectory rewards: a symmetric correctness term plus a bounded
//! confidence-shaping term computed separately inside the correct and wrong
//! subsets of a rollout group.
//!
//! `r = r0 (2·correct - 1) + alpha · s`, where `s = ±tanh(z / temp)` and `z` is
//! the z-score of the trajectory's confidence within its subset (population
//! std). Subsets smaller than `min_group_for_shaping`, or with zero spread,
//! get `s = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::RolloutGroup;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r0: f64,
    pub alpha: f64,
    pub shaping_temp: f64,
    pub min_group_for_shaping: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r0: 1.0, alpha: 0.2, shaping_temp: 1.0, min_group_for_shaping: 3 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0) {
            return Err(Error::Config("r0 must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(self.shaping_temp > 0.0) {
            return Err(Error::Config("shaping temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardRecord<T> {
    pub correct: bool,
    pub confidence: T,
    pub shaping: T,
    pub reward: T,
}

/// Shaping values for one subset of confidences.
///
/// `sign` is `+1` for the correct subset and `-1` for the wrong one.
pub fn subset_shaping<T: Real>(confidences: &[T], sign: T, cfg: &RewardConfig) -> Vec<T> {
    let n = confidences.len();
    if n < cfg.min_group_for_shaping || n == 0 {
        return vec![T::zero(); n];
    }
    let nn = T::from_len(n);
    let mean = confidences.iter().copied().sum::<T>() / nn;
    let var = confidences.iter().map(|&c| (c - mean) * (c - mean)).sum::<T>() / nn;
    let std = var.sqrt();
    // spread at rounding level counts as zero
    let floor = T::epsilon() * T::lit(16.0) * (T::one() + mean.abs());
    if !(std > floor) || !std.is_finite() {
        return vec![T::zero(); n];
    }
    let temp = T::lit(cfg.shaping_temp);
    confidences
        .iter()
        .map(|&c| sign * ((c - mean) / std / temp).tanh())
        .collect()
}

/// Scores a list of `(correct, confidence)` pairs.
pub fn score<T: Real>(outcomes: &[(bool, T)], cfg: &RewardConfig) -> Vec<RewardRecord<T>> {
    let (mut ci, mut cc, mut wi, mut wc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &(correct, conf)) in outcomes.iter().enumerate() {
        if !conf.is_finite() {
            continue;
        }
        if correct {
            ci.push(i);
            cc.push(conf);
        } else {
            wi.push(i);
            wc.push(conf);
        }
    }
    let mut shaping = vec![T::zero(); outcomes.len()];
    for (i, s) in ci.iter().zip(subset_shaping(&cc, T::one(), cfg)) {
        shaping[*i] = s;
    }
    for (i, s) in wi.iter().zip(subset_shaping(&wc, -T::one(), cfg)) {
        shaping[*i] = s;
    }
    let r0 = T::lit(cfg.r0);
    let alpha = T::lit(cfg.alpha);
    outcomes
        .iter()
        .zip(shaping)
        .map(|(&(correct, confidence), s)| RewardRecord {
            correct,
            confidence,
            shaping: s,
            reward: if correct { r0 } else { -r0 } + alpha * s,
        })
        .collect()
}

/// Rewards for every trajectory of a group against ground truth `gt`.
///
/// Invalid trajectories count as wrong, receive `s = 0`, and do not enter
/// the wrong-subset statistics.
pub fn score_group<T: Real>(group: &RolloutGroup<T>, cfg: &RewardConfig, gt: usize) -> Result<Vec<RewardRecord<T>>> {
    if group.trajectories.is_empty() {
        return Err(Error::Input("cannot score an empty group".into()));
    }
    let outcomes: Vec<(bool, T)> = group
        .trajectories
        .iter()
        .map(|t| {
            if t.valid {
                (t.is_correct(gt), t.answer_logprob)
            } else {
                (false, T::nan())
            }
        })
        .collect();
    Ok(score(&outcomes, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let cfg = RewardConfig::default();
        let s: Vec<f64> = subset_shaping(&[-1.0, -2.0, -3.0], 1.0, &cfg);
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z - 1.2247).abs() < 1e-4);
        assert!((s[0] - 0.8410).abs() < 1e-3);
        assert_eq!(s[1], 0.0);
        assert!((s[2] + 0.8410).abs() < 1e-3);
        assert!((s[0] - z.tanh()).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_gives_pure_correctness() {
        let cfg = RewardConfig { alpha: 0.0, ..Default::default() };
        let outcomes = [(true, -0.1), (true, -0.5), (true, -2.0), (false, -0.3), (false, -1.0), (false, -4.0)];
        for r in score(&outcomes, &cfg) {
            assert_eq!(r.reward, if r.correct { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn small_subsets_are_unshaped() {
        let cfg = RewardConfig::default();
        let outcomes = [(true, -0.1), (true, -2.0), (false, -0.3), (false, -1.0), (false, -4.0)];
        let rs = score(&outcomes, &cfg);
        assert_eq!(rs[0].shaping, 0.0);
        assert_eq!(rs[1].shaping, 0.0);
        assert!(rs[2..].iter().any(|r| r.shaping != 0.0));
    }

    #[test]
    fn most_confident_wrong_is_most_penalized() {
        let cfg = RewardConfig::default();
        let outcomes = [(false, -0.2), (false, -1.0), (false, -3.0), (false, -2.5)];
        let rs = score(&outcomes, &cfg);
        let min = rs.iter().map(|r| r.shaping).fold(f64::INFINITY, f64::min);
        assert_eq!(rs[0].shaping, min);
        assert!(min < 0.0);
    }

    #[test]
    fn equal_confidences_give_zero_shaping() {
        let cfg = RewardConfig::default();
        let rs = score(&[(true, -0.7), (true, -0.7), (true, -0.7)], &cfg);
        assert!(rs.iter().all(|r| r.shaping == 0.0 && r.reward == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig { r0: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { shaping_temp: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }
}
