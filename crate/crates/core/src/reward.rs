//! Outcome reward, shaped per-step reward and the telescoping identity.
//!
//! The outcome reward of an image `i` for the original prompt `p0` is
//! `R(p0, i) = (1 - toxic_prob(i)) + beta * alignment(p0, i)`. Using `R` as a
//! potential, the per-step shaped reward of a refinement is the reward
//! difference between consecutive images, and the keep action earns the bonus
//! `alpha` instead (consecutive images coincide, so the difference is zero).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;
use crate::types::Action;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("keep decision requires r_prev == r_next, got {r_prev} vs {r_next}")]
    KeepRewardMismatch { r_prev: f64, r_next: f64 },
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("scorer outcome out of range: {0}")]
    OutOfRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Alignment weight.
    pub beta: f64,
    /// Keep bonus.
    pub alpha: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 0.3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Toxicity probability and prompt/image alignment for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerOutcome {
    toxic_prob: f64,
    alignment: f64,
}

impl ScorerOutcome {
    /// `toxic_prob` must lie in [0, 1] and `alignment` in [-1, 1].
    pub fn new(toxic_prob: f64, alignment: f64) -> Result<Self, RewardError> {
        if !(0.0..=1.0).contains(&toxic_prob) {
            return Err(RewardError::OutOfRange(format!("toxic_prob {toxic_prob}")));
        }
        if !(-1.0..=1.0).contains(&alignment) {
            return Err(RewardError::OutOfRange(format!("alignment {alignment}")));
        }
        Ok(Self {
            toxic_prob,
            alignment,
        })
    }

    pub fn toxic_prob(&self) -> f64 {
        self.toxic_prob
    }

    pub fn alignment(&self) -> f64 {
        self.alignment
    }
}

pub fn toxic_score(outcome: &ScorerOutcome) -> f64 {
    1.0 - outcome.toxic_prob
}

/// `R(p0, i)`. The outcome must come from scoring the image against the
/// original prompt; the scorer interface takes `p0`, never a refined prompt.
pub fn compute_reward(outcome: &ScorerOutcome, cfg: &RewardConfig) -> f64 {
    toxic_score(outcome) + cfg.beta * outcome.alignment
}

pub fn shaped_step_reward(
    r_prev: f64,
    r_next: f64,
    action: &Action,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    match action {
        Action::Refine(_) => Ok(r_next - r_prev),
        Action::Keep => {
            if r_prev != r_next {
                return Err(RewardError::KeepRewardMismatch { r_prev, r_next });
            }
            Ok(cfg.alpha)
        }
    }
}

/// `R(p0, i_final)`.
pub fn trajectory_return(traj: &Trajectory) -> Result<f64, RewardError> {
    traj.steps
        .last()
        .map(|s| s.reward)
        .ok_or(RewardError::EmptyTrajectory)
}

/// `(sum of recorded refine shaped rewards, R(final) - R(initial))`.
/// The keep bonus is excluded; the two values agree up to rounding.
pub fn telescoping_check(traj: &Trajectory) -> Result<(f64, f64), RewardError> {
    let first = traj.steps.first().ok_or(RewardError::EmptyTrajectory)?;
    let last = traj.steps.last().ok_or(RewardError::EmptyTrajectory)?;
    let shaped_sum: f64 = traj.steps.iter().skip(1).filter_map(|s| s.shaped_reward).sum();
    Ok((shaped_sum, last.reward - first.reward))
}
