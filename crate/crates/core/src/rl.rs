//! Trajectory storage, discounted returns, and policy-gradient updates.
//!
//! Both agents collect `(state, action, log_prob, reward)` steps into a
//! [`Trajectory`] and update at episode (or period) boundaries. Credit
//! assignment uses return-to-go by default, with a whole-trajectory-return
//! mode behind [`ReturnMode::Total`] for fidelity experiments, and an
//! optional running-mean baseline for variance reduction.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::policy::{Action, PolicyGrad, PolicyParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Algorithm {
    Reinforce,
    Ppo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BaselineMode {
    None,
    RunningMean,
}

/// Per-step credit: return-to-go `G_t`, or the whole trajectory's discounted
/// return replicated to every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ReturnMode {
    ToGo,
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpdateConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    /// PPO clip width; must be positive when `algorithm` is [`Algorithm::Ppo`].
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub baseline: BaselineMode,
    pub return_mode: ReturnMode,
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite".into()));
        }
        if self.algorithm == Algorithm::Ppo {
            if !(self.clip_eps > 0.0) {
                return Err(Error::InvalidConfig("PPO clip width must be positive".into()));
            }
            if self.ppo_epochs == 0 {
                return Err(Error::InvalidConfig("PPO needs at least one epoch".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Action,
    /// Log-probability under the collection-time parameters (PPO ratio anchor).
    pub log_prob_old: f64,
    pub reward: f64,
}

/// Ordered steps with a discount factor. Returns are computed only once the
/// trajectory is frozen (no longer appended).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn new(gamma: f64) -> Self {
        Self { steps: Vec::new(), gamma }
    }

    pub fn push(&mut self, state: Vec<f64>, action: Action, log_prob_old: f64, reward: f64) {
        self.steps.push(Step { state, action, log_prob_old, reward });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }
}

/// Return-to-go per step: `G_t = sum_{u >= t} gamma^(u-t) r_u`, one backward
/// pass.
pub fn discounted_returns(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut returns = vec![0.0; traj.steps.len()];
    let mut acc = 0.0;
    for (slot, step) in returns.iter_mut().zip(&traj.steps).rev() {
        acc = step.reward + traj.gamma * acc;
        *slot = acc;
    }
    Ok(returns)
}

fn per_step_credit(traj: &Trajectory, mode: ReturnMode) -> Result<Vec<f64>> {
    let to_go = discounted_returns(traj)?;
    Ok(match mode {
        ReturnMode::ToGo => to_go,
        ReturnMode::Total => vec![to_go[0]; traj.steps.len()],
    })
}

/// Sliding-window mean of past returns, subtracted from step credits to
/// reduce gradient variance without bias.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunningBaseline {
    window: VecDeque<f64>,
    cap: usize,
}

impl RunningBaseline {
    pub fn new(cap: usize) -> Self {
        Self { window: VecDeque::with_capacity(cap.min(1024)), cap: cap.max(1) }
    }

    pub fn mean(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }

    pub fn push(&mut self, value: f64) {
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back(value);
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// What a policy update did, for training logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    /// False when the trajectory was empty or the gradient was non-finite.
    pub applied: bool,
    pub steps: usize,
    pub mean_advantage: f64,
}

impl UpdateReport {
    fn skipped() -> Self {
        Self { applied: false, steps: 0, mean_advantage: 0.0 }
    }
}

/// Accumulated REINFORCE gradient `sum_t grad log pi(a_t|s_t) * adv_t`.
pub fn reinforce_gradient(
    policy: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
) -> Result<PolicyGrad> {
    let mut grad = PolicyGrad::zeros_like(policy);
    for (step, &adv) in traj.steps.iter().zip(advantages) {
        let fwd = policy.forward(&step.state)?;
        policy.backward_into(&fwd, &step.action, adv, &mut grad)?;
    }
    Ok(grad)
}

/// One epoch's gradient of the clipped surrogate
/// `sum_t min(r_t adv_t, clip(r_t, 1-eps, 1+eps) adv_t)` with
/// `r_t = exp(log pi_new - log_prob_old)`. Steps where the clipped branch
/// binds contribute zero gradient.
pub fn ppo_epoch_gradient(
    policy: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<PolicyGrad> {
    let mut grad = PolicyGrad::zeros_like(policy);
    for (step, &adv) in traj.steps.iter().zip(advantages) {
        let fwd = policy.forward(&step.state)?;
        let log_prob_new = fwd.dist.log_prob(&step.action)?;
        let ratio = math::exp(log_prob_new - step.log_prob_old);
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        if unclipped <= clipped {
            policy.backward_into(&fwd, &step.action, ratio * adv, &mut grad)?;
        }
    }
    Ok(grad)
}

/// Value of the clipped surrogate objective at the current parameters.
pub fn clipped_surrogate(
    policy: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (step, &adv) in traj.steps.iter().zip(advantages) {
        let fwd = policy.forward(&step.state)?;
        let ratio = math::exp(fwd.dist.log_prob(&step.action)? - step.log_prob_old);
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        total += unclipped.min(clipped);
    }
    Ok(total)
}

fn advantages_and_feed(
    traj: &Trajectory,
    cfg: &UpdateConfig,
    baseline: &mut RunningBaseline,
) -> Result<Vec<f64>> {
    let credits = per_step_credit(traj, cfg.return_mode)?;
    let b = match cfg.baseline {
        BaselineMode::None => 0.0,
        BaselineMode::RunningMean => baseline.mean(),
    };
    let advantages = credits.iter().map(|&g| g - b).collect();
    if cfg.baseline == BaselineMode::RunningMean {
        for &g in &credits {
            baseline.push(g);
        }
    }
    Ok(advantages)
}

/// One REINFORCE step: accumulate `grad log pi * (G_t - b)` over the frozen
/// trajectory, then ascend.
pub fn reinforce_update(
    policy: &mut PolicyParams,
    traj: &Trajectory,
    cfg: &UpdateConfig,
    baseline: &mut RunningBaseline,
) -> Result<UpdateReport> {
    cfg.validate()?;
    if traj.is_empty() {
        return Ok(UpdateReport::skipped());
    }
    let advantages = advantages_and_feed(traj, cfg, baseline)?;
    let grad = reinforce_gradient(policy, traj, &advantages)?;
    let applied = policy.apply_update(&grad, cfg.lr);
    Ok(UpdateReport {
        applied,
        steps: traj.len(),
        mean_advantage: advantages.iter().sum::<f64>() / advantages.len() as f64,
    })
}

/// Clipped-PPO update: `ppo_epochs` passes of the clipped-surrogate gradient
/// against the collection-time log-probs, advantages fixed across epochs.
pub fn ppo_update(
    policy: &mut PolicyParams,
    traj: &Trajectory,
    cfg: &UpdateConfig,
    baseline: &mut RunningBaseline,
) -> Result<UpdateReport> {
    cfg.validate()?;
    if traj.is_empty() {
        return Ok(UpdateReport::skipped());
    }
    let advantages = advantages_and_feed(traj, cfg, baseline)?;
    let mut applied = true;
    for _ in 0..cfg.ppo_epochs {
        let grad = ppo_epoch_gradient(policy, traj, &advantages, cfg.clip_eps)?;
        applied &= policy.apply_update(&grad, cfg.lr);
    }
    Ok(UpdateReport {
        applied,
        steps: traj.len(),
        mean_advantage: advantages.iter().sum::<f64>() / advantages.len() as f64,
    })
}

/// Dispatch on `cfg.algorithm`.
pub fn policy_update(
    policy: &mut PolicyParams,
    traj: &Trajectory,
    cfg: &UpdateConfig,
    baseline: &mut RunningBaseline,
) -> Result<UpdateReport> {
    match cfg.algorithm {
        Algorithm::Reinforce => reinforce_update(policy, traj, cfg, baseline),
        Algorithm::Ppo => ppo_update(policy, traj, cfg, baseline),
    }
}
