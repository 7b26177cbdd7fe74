//! Two-agent orchestration: decider pool selection, aggregator fusion,
//! plurality voting, the warm-start training loop, and the periodic online
//! update schedule.
//!
//! Queries are processed strictly sequentially: the decider state at `t+1`
//! embeds the mask chosen at `t`, so nothing here is concurrent.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::QueryRecord;
use crate::diversity::{
    fleiss_kappa, focal_diversity, EnsembleMask, FailureHistory, DEFAULT_COLD_START_ROWS,
};
use crate::policy::{argmax, Action, HeadKind, PolicyParams};
use crate::rl::{
    policy_update, Algorithm, BaselineMode, ReturnMode, RunningBaseline, Trajectory, UpdateConfig,
    UpdateReport,
};
use crate::{Error, Result};

/// Version of the decider/aggregator state vector layouts.
pub const STATE_LAYOUT_VERSION: u32 = 1;

/// Sampling attempts before the empty-mask guard forces the top model in.
const EMPTY_MASK_RESAMPLES: usize = 10;

/// Engine configuration. Defaults follow the reference hyperparameters:
/// size penalty 0.1, discount 0.8, learning rate 0.001, PPO clip 0.02,
/// window 500, online updates every 10 queries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EngineConfig {
    /// Pool size N; 0 means "infer from data" and is rejected by `validate`.
    pub n_models: usize,
    /// Choice count k; 0 means "infer from data" and is rejected by `validate`.
    pub choices: usize,
    /// Hidden layer widths shared by both policy networks.
    pub hidden: Vec<usize>,
    /// Size-penalty constant in the decider reward.
    pub alpha: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Learning rate for both policies.
    pub lr: f64,
    /// PPO clip width.
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub algorithm: Algorithm,
    pub baseline: BaselineMode,
    pub baseline_window: usize,
    pub return_mode: ReturnMode,
    /// Warm-start episode count K.
    pub warmstart_episodes: usize,
    /// Failure-history window length T.
    pub window: usize,
    /// Queries between online policy updates.
    pub update_period: usize,
    pub seed: u64,
    /// Append per-model rolling accuracy to the decider state.
    pub rolling_accuracy_feature: bool,
    /// Window fill below which the decider falls back to the full mask and
    /// collects no training signal.
    pub cold_start_min: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_models: 0,
            choices: 0,
            hidden: vec![64],
            alpha: 0.1,
            gamma: 0.8,
            lr: 0.001,
            clip_eps: 0.02,
            ppo_epochs: 4,
            algorithm: Algorithm::Reinforce,
            baseline: BaselineMode::RunningMean,
            baseline_window: 100,
            return_mode: ReturnMode::ToGo,
            warmstart_episodes: 60,
            window: 500,
            update_period: 10,
            seed: 0,
            rolling_accuracy_feature: false,
            cold_start_min: DEFAULT_COLD_START_ROWS,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 || self.n_models > crate::diversity::MAX_POOL {
            return Err(Error::InvalidConfig("n_models must lie in 1..=64".into()));
        }
        if self.choices < 2 {
            return Err(Error::InvalidConfig("choices must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig("alpha must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        if self.update_period == 0 {
            return Err(Error::InvalidConfig("update period must be positive".into()));
        }
        self.update_config().validate()
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            algorithm: self.algorithm,
            lr: self.lr,
            clip_eps: self.clip_eps,
            ppo_epochs: self.ppo_epochs,
            baseline: self.baseline,
            return_mode: self.return_mode,
        }
    }

    /// Decider state layout: [mask bits (N), size fraction, focal diversity,
    /// Fleiss kappa, rolling accuracy (N, optional)].
    pub fn decider_input_dim(&self) -> usize {
        self.n_models + 3 + if self.rolling_accuracy_feature { self.n_models } else { 0 }
    }

    /// Aggregator state layout: [row-major N x k probabilities with
    /// unselected rows zeroed, mask bits (N)]. Fixed size for every mask.
    pub fn aggregator_input_dim(&self) -> usize {
        self.n_models * self.choices + self.n_models
    }
}

/// Decider reward: +1 when the prediction is correct, otherwise
/// `-1 - alpha * selected / pool`.
pub fn decider_reward(pred: usize, gold: usize, mask: &EnsembleMask, alpha: f64) -> f64 {
    if pred == gold {
        1.0
    } else {
        -1.0 - alpha * (mask.popcount() as f64 / mask.len() as f64)
    }
}

/// Aggregator reward: +1 correct, -1 otherwise.
pub fn aggregator_reward(pred: usize, gold: usize) -> f64 {
    if pred == gold {
        1.0
    } else {
        -1.0
    }
}

/// Plurality vote over the selected models' argmax answers.
///
/// Ties are broken by the larger probability mass summed over the selected
/// models for the tied choices, remaining ties by the lowest choice index.
pub fn plurality_vote(record: &QueryRecord, mask: &EnsembleMask) -> Result<usize> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if mask.len() != record.n_models() {
        return Err(Error::DimensionMismatch { expected: record.n_models(), got: mask.len() });
    }
    let mut votes = vec![0usize; record.k];
    let mut mass = vec![0.0f64; record.k];
    for model in mask.members() {
        let q = &record.outputs[model];
        votes[argmax(q)] += 1;
        for (m, &p) in mass.iter_mut().zip(q) {
            *m += p;
        }
    }
    let mut best = 0;
    for c in 1..record.k {
        if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    Ok(best)
}

/// Which policy a warm-start episode trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    Decider,
    Aggregator,
}

/// Per-episode training statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeStats {
    pub episode: usize,
    pub phase: Phase,
    pub mean_dec_reward: f64,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub mean_agg_reward: Option<f64>,
    /// Fraction of queries the episode's emitted prediction got right
    /// (interim vote in the decider phase, fused output afterwards).
    pub accuracy: f64,
    pub mean_pool_size: f64,
    pub update_applied: bool,
    pub update_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeStats>,
}

/// Result of one online or evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub final_choice: usize,
    pub interim: usize,
    pub mask: EnsembleMask,
    pub updated: bool,
}

struct DeciderDecision {
    mask: EnsembleMask,
    log_prob: f64,
    state: Vec<f64>,
    /// False when the cold-start fallback bypassed the policy.
    from_policy: bool,
}

/// Serializable snapshot of a full engine (checkpoint payload).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EngineSnapshot {
    pub config: EngineConfig,
    pub state_layout_version: u32,
    pub decider: PolicyParams,
    pub aggregator: PolicyParams,
    pub history: FailureHistory,
    pub prev_mask: EnsembleMask,
    pub rng_seed: [u8; 32],
    /// ChaCha word position split as (high, low) halves.
    pub rng_word_pos: (u64, u64),
    pub dec_trajectory: Trajectory,
    pub agg_trajectory: Trajectory,
    pub dec_baseline: RunningBaseline,
    pub agg_baseline: RunningBaseline,
    pub online_seen: u64,
    pub queries_seen: u64,
}

/// The two-agent ensemble engine.
#[derive(Clone)]
pub struct Engine {
    cfg: EngineConfig,
    decider: PolicyParams,
    aggregator: PolicyParams,
    history: FailureHistory,
    prev_mask: EnsembleMask,
    rng: ChaCha8Rng,
    dec_traj: Trajectory,
    agg_traj: Trajectory,
    dec_baseline: RunningBaseline,
    agg_baseline: RunningBaseline,
    online_seen: u64,
    queries_seen: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let decider = PolicyParams::init(
            HeadKind::BernoulliBranched,
            cfg.decider_input_dim(),
            &cfg.hidden,
            cfg.n_models,
            &mut rng,
        )?;
        let aggregator = PolicyParams::init(
            HeadKind::Categorical,
            cfg.aggregator_input_dim(),
            &cfg.hidden,
            cfg.choices,
            &mut rng,
        )?;
        let history = FailureHistory::new(cfg.n_models, cfg.window)?;
        let prev_mask = EnsembleMask::full(cfg.n_models)?;
        let gamma = cfg.gamma;
        let baseline_window = cfg.baseline_window;
        Ok(Self {
            cfg,
            decider,
            aggregator,
            history,
            prev_mask,
            rng,
            dec_traj: Trajectory::new(gamma),
            agg_traj: Trajectory::new(gamma),
            dec_baseline: RunningBaseline::new(baseline_window),
            agg_baseline: RunningBaseline::new(baseline_window),
            online_seen: 0,
            queries_seen: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn history(&self) -> &FailureHistory {
        &self.history
    }

    pub fn decider_params(&self) -> &PolicyParams {
        &self.decider
    }

    pub fn aggregator_params(&self) -> &PolicyParams {
        &self.aggregator
    }

    pub fn queries_seen(&self) -> u64 {
        self.queries_seen
    }

    fn validate_record(&self, rec: &QueryRecord) -> Result<()> {
        if rec.n_models() != self.cfg.n_models {
            return Err(Error::DimensionMismatch { expected: self.cfg.n_models, got: rec.n_models() });
        }
        if rec.k != self.cfg.choices {
            return Err(Error::DimensionMismatch { expected: self.cfg.choices, got: rec.k });
        }
        Ok(())
    }

    /// Diversity features of a mask over the current window; zeros when the
    /// window is empty or the mask has fewer than two members.
    fn mask_metrics(&self, mask: &EnsembleMask) -> Result<(f64, f64)> {
        if mask.popcount() < 2 || self.history.is_empty() {
            return Ok((0.0, 0.0));
        }
        let lambda = focal_diversity(&self.history, mask)?.lambda;
        let kappa = fleiss_kappa(&self.history, mask, self.cfg.choices)?;
        Ok((lambda, kappa))
    }

    /// Decider state: previous mask bits, its size fraction, its diversity
    /// features, optionally per-model rolling accuracy.
    fn decider_state(&self) -> Result<Vec<f64>> {
        let n = self.cfg.n_models;
        let mut state = Vec::with_capacity(self.cfg.decider_input_dim());
        for i in 0..n {
            state.push(if self.prev_mask.contains(i) { 1.0 } else { 0.0 });
        }
        state.push(self.prev_mask.popcount() as f64 / n as f64);
        let (lambda, kappa) = self.mask_metrics(&self.prev_mask)?;
        state.push(lambda);
        state.push(kappa);
        if self.cfg.rolling_accuracy_feature {
            state.extend(self.history.per_model_accuracy());
        }
        Ok(state)
    }

    /// Aggregator state: zero-padded N x k probability matrix plus mask bits.
    fn aggregator_state(&self, rec: &QueryRecord, mask: &EnsembleMask) -> Vec<f64> {
        let n = self.cfg.n_models;
        let k = self.cfg.choices;
        let mut state = vec![0.0; n * k + n];
        for model in mask.members() {
            state[model * k..(model + 1) * k].copy_from_slice(&rec.outputs[model]);
            state[n * k + model] = 1.0;
        }
        state
    }

    /// Run the decider. Training mode samples per-model Bernoulli actions
    /// (resampling empty masks up to a bound, then forcing the most likely
    /// model in); evaluation mode thresholds at 0.5 with the same guard.
    /// While the window is colder than `cold_start_min` the policy is
    /// bypassed and the full pool is used, with no training signal.
    fn decider_act(&mut self, train: bool) -> Result<DeciderDecision> {
        if self.history.len() < self.cfg.cold_start_min {
            return Ok(DeciderDecision {
                mask: EnsembleMask::full(self.cfg.n_models)?,
                log_prob: 0.0,
                state: Vec::new(),
                from_policy: false,
            });
        }
        let state = self.decider_state()?;
        let fwd = self.decider.forward(&state)?;
        let probs = fwd.dist.probs().to_vec();

        let mut bits: Option<Vec<bool>> = None;
        if train {
            for _ in 0..EMPTY_MASK_RESAMPLES {
                if let Action::Bits(sampled) = fwd.dist.sample(&mut self.rng) {
                    if sampled.iter().any(|&b| b) {
                        bits = Some(sampled);
                        break;
                    }
                }
            }
        } else {
            let thresholded: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
            if thresholded.iter().any(|&b| b) {
                bits = Some(thresholded);
            }
        }
        let bits = bits.unwrap_or_else(|| {
            let mut forced = vec![false; probs.len()];
            forced[argmax(&probs)] = true;
            forced
        });
        let action = Action::Bits(bits.clone());
        // log-prob of the mask actually emitted, forced or not
        let log_prob = fwd.dist.log_prob(&action)?;
        let mask = EnsembleMask::from_bools(&bits)?;
        Ok(DeciderDecision { mask, log_prob, state, from_policy: true })
    }

    /// Run the aggregator on the selected outputs; sampled in training mode,
    /// argmax in evaluation mode.
    fn aggregator_act(
        &mut self,
        rec: &QueryRecord,
        mask: &EnsembleMask,
        train: bool,
    ) -> Result<(usize, f64, Vec<f64>)> {
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let state = self.aggregator_state(rec, mask);
        let fwd = self.aggregator.forward(&state)?;
        let action = if train { fwd.dist.sample(&mut self.rng) } else { fwd.dist.greedy() };
        let log_prob = fwd.dist.log_prob(&action)?;
        let Action::Choice(choice) = action else {
            return Err(Error::InvalidConfig("aggregator emitted a non-categorical action".into()));
        };
        Ok((choice, log_prob, state))
    }

    fn push_history(&mut self, rec: &QueryRecord) -> Result<()> {
        let correctness = rec.model_correctness();
        let answers = rec.model_answers();
        self.history.push(&correctness, &answers)?;
        self.queries_seen += 1;
        Ok(())
    }

    fn update_policy(&mut self, phase: Phase) -> Result<UpdateReport> {
        let cfg = self.cfg.update_config();
        match phase {
            Phase::Decider => {
                policy_update(&mut self.decider, &self.dec_traj, &cfg, &mut self.dec_baseline)
            }
            Phase::Aggregator => {
                policy_update(&mut self.aggregator, &self.agg_traj, &cfg, &mut self.agg_baseline)
            }
        }
    }

    /// Warm-start training: episodes restart from the full pool; the first
    /// ceil(K/2) episodes collect interim plurality rewards and update the
    /// decider, the rest run the aggregator on the selected outputs and
    /// update it. The failure window is fed the full pool's correctness on
    /// every query.
    pub fn warm_start(&mut self, data: &[QueryRecord]) -> Result<TrainingLog> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.cfg.warmstart_episodes < 2 {
            return Err(Error::InvalidConfig("warm start needs at least 2 episodes".into()));
        }
        for rec in data {
            self.validate_record(rec)?;
            rec.validate()?;
        }

        let episodes = self.cfg.warmstart_episodes;
        let decider_episodes = episodes.div_ceil(2);
        let mut log = TrainingLog::default();
        for episode in 0..episodes {
            let phase = if episode < decider_episodes { Phase::Decider } else { Phase::Aggregator };
            self.prev_mask = EnsembleMask::full(self.cfg.n_models)?;
            self.dec_traj.clear();
            self.agg_traj.clear();

            let mut dec_reward_sum = 0.0;
            let mut agg_reward_sum = 0.0;
            let mut hits = 0usize;
            let mut pool_sum = 0usize;

            for rec in data {
                let decision = self.decider_act(true)?;
                let interim = plurality_vote(rec, &decision.mask)?;
                let r_dec = decider_reward(interim, rec.gold, &decision.mask, self.cfg.alpha);
                dec_reward_sum += r_dec;
                pool_sum += decision.mask.popcount();

                if decision.from_policy && phase == Phase::Decider {
                    self.dec_traj.push(
                        decision.state,
                        Action::Bits(decision.mask.to_bools()),
                        decision.log_prob,
                        r_dec,
                    );
                }

                let prediction = if phase == Phase::Aggregator {
                    let (choice, log_prob, state) =
                        self.aggregator_act(rec, &decision.mask, true)?;
                    let r_agg = aggregator_reward(choice, rec.gold);
                    agg_reward_sum += r_agg;
                    self.agg_traj.push(state, Action::Choice(choice), log_prob, r_agg);
                    choice
                } else {
                    interim
                };
                if prediction == rec.gold {
                    hits += 1;
                }

                self.push_history(rec)?;
                self.prev_mask = decision.mask;
            }

            let report = self.update_policy(phase)?;
            self.dec_traj.clear();
            self.agg_traj.clear();

            let n = data.len() as f64;
            log.episodes.push(EpisodeStats {
                episode,
                phase,
                mean_dec_reward: dec_reward_sum / n,
                mean_agg_reward: (phase == Phase::Aggregator).then_some(agg_reward_sum / n),
                accuracy: hits as f64 / n,
                mean_pool_size: pool_sum as f64 / n,
                update_applied: report.applied,
                update_steps: report.steps,
            });
        }
        Ok(log)
    }

    /// One online query. With feedback, both agents act with sampled actions,
    /// rewards are buffered (the decider reward uses the fused final answer),
    /// and both policies update every `update_period` feedback queries.
    /// Without feedback the step is pure inference: deterministic actions, no
    /// reward, no update, no history push.
    pub fn online_step(&mut self, rec: &QueryRecord, feedback: bool) -> Result<StepOutcome> {
        self.validate_record(rec)?;
        let decision = self.decider_act(feedback)?;
        let interim = plurality_vote(rec, &decision.mask)?;
        let (choice, log_prob, state) = self.aggregator_act(rec, &decision.mask, feedback)?;

        let mut updated = false;
        if feedback {
            let r_dec = decider_reward(choice, rec.gold, &decision.mask, self.cfg.alpha);
            if decision.from_policy {
                self.dec_traj.push(
                    decision.state,
                    Action::Bits(decision.mask.to_bools()),
                    decision.log_prob,
                    r_dec,
                );
            }
            let r_agg = aggregator_reward(choice, rec.gold);
            self.agg_traj.push(state, Action::Choice(choice), log_prob, r_agg);
            self.push_history(rec)?;
            self.online_seen += 1;
            if self.online_seen % self.cfg.update_period as u64 == 0 {
                self.update_policy(Phase::Decider)?;
                self.update_policy(Phase::Aggregator)?;
                self.dec_traj.clear();
                self.agg_traj.clear();
                updated = true;
            }
        }
        self.prev_mask = decision.mask;
        Ok(StepOutcome { final_choice: choice, interim, mask: decision.mask, updated })
    }

    /// Deterministic evaluation step: thresholded decider, argmax aggregator,
    /// history updated, parameters untouched.
    pub fn eval_step(&mut self, rec: &QueryRecord) -> Result<StepOutcome> {
        self.validate_record(rec)?;
        let decision = self.decider_act(false)?;
        let interim = plurality_vote(rec, &decision.mask)?;
        let (choice, _, _) = self.aggregator_act(rec, &decision.mask, false)?;
        self.push_history(rec)?;
        self.prev_mask = decision.mask;
        Ok(StepOutcome { final_choice: choice, interim, mask: decision.mask, updated: false })
    }

    /// Decider-only routing: evaluation-mode mask; a singleton mask answers
    /// with that model's argmax, anything larger with the plurality vote. No
    /// aggregator involved.
    pub fn route_step(&mut self, rec: &QueryRecord) -> Result<StepOutcome> {
        self.validate_record(rec)?;
        let decision = self.decider_act(false)?;
        let answer = route_answer(rec, &decision.mask)?;
        self.push_history(rec)?;
        self.prev_mask = decision.mask;
        Ok(StepOutcome { final_choice: answer, interim: answer, mask: decision.mask, updated: false })
    }

    /// Decider-only routing with feedback: sampled masks, interim plurality
    /// rewards, and periodic decider-only updates.
    pub fn route_feedback_step(&mut self, rec: &QueryRecord) -> Result<StepOutcome> {
        self.validate_record(rec)?;
        let decision = self.decider_act(true)?;
        let answer = route_answer(rec, &decision.mask)?;
        let r_dec = decider_reward(answer, rec.gold, &decision.mask, self.cfg.alpha);
        let mut updated = false;
        if decision.from_policy {
            self.dec_traj.push(
                decision.state,
                Action::Bits(decision.mask.to_bools()),
                decision.log_prob,
                r_dec,
            );
        }
        self.push_history(rec)?;
        self.online_seen += 1;
        if self.online_seen % self.cfg.update_period as u64 == 0 {
            self.update_policy(Phase::Decider)?;
            self.dec_traj.clear();
            updated = true;
        }
        self.prev_mask = decision.mask;
        Ok(StepOutcome { final_choice: answer, interim: answer, mask: decision.mask, updated })
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        let word_pos = self.rng.get_word_pos();
        EngineSnapshot {
            config: self.cfg.clone(),
            state_layout_version: STATE_LAYOUT_VERSION,
            decider: self.decider.clone(),
            aggregator: self.aggregator.clone(),
            history: self.history.clone(),
            prev_mask: self.prev_mask,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: ((word_pos >> 64) as u64, word_pos as u64),
            dec_trajectory: self.dec_traj.clone(),
            agg_trajectory: self.agg_traj.clone(),
            dec_baseline: self.dec_baseline.clone(),
            agg_baseline: self.agg_baseline.clone(),
            online_seen: self.online_seen,
            queries_seen: self.queries_seen,
        }
    }

    pub fn from_snapshot(snap: EngineSnapshot) -> Result<Self> {
        snap.config.validate()?;
        if snap.state_layout_version != STATE_LAYOUT_VERSION {
            return Err(Error::InvalidConfig("unsupported state layout version".into()));
        }
        if !snap.decider.all_finite() || !snap.aggregator.all_finite() {
            return Err(Error::NonFinite { what: "checkpoint parameters" });
        }
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_word_pos(((snap.rng_word_pos.0 as u128) << 64) | snap.rng_word_pos.1 as u128);
        Ok(Self {
            cfg: snap.config,
            decider: snap.decider,
            aggregator: snap.aggregator,
            history: snap.history,
            prev_mask: snap.prev_mask,
            rng,
            dec_traj: snap.dec_trajectory,
            agg_traj: snap.agg_trajectory,
            dec_baseline: snap.dec_baseline,
            agg_baseline: snap.agg_baseline,
            online_seen: snap.online_seen,
            queries_seen: snap.queries_seen,
        })
    }
}

/// Routing answer for a mask: the lone model's argmax, or the plurality vote.
fn route_answer(rec: &QueryRecord, mask: &EnsembleMask) -> Result<usize> {
    if mask.popcount() == 1 {
        let model = mask.members().next().expect("popcount checked");
        Ok(argmax(&rec.outputs[model]))
    } else {
        plurality_vote(rec, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticGenerator, SyntheticPoolSpec};

    fn record(outputs: Vec<Vec<f64>>, gold: usize) -> QueryRecord {
        QueryRecord {
            id: "q".into(),
            task: "t".into(),
            k: outputs[0].len(),
            gold,
            outputs,
            costs: None,
        }
    }

    #[test]
    fn plurality_strict_majority() {
        // votes B, B, C
        let rec = record(
            vec![
                vec![0.1, 0.8, 0.1],
                vec![0.2, 0.7, 0.1],
                vec![0.1, 0.2, 0.7],
            ],
            1,
        );
        let mask = EnsembleMask::full(3).unwrap();
        assert_eq!(plurality_vote(&rec, &mask).unwrap(), 1);
    }

    #[test]
    fn plurality_single_model_is_identity() {
        let rec = record(vec![vec![0.2, 0.3, 0.5], vec![0.9, 0.05, 0.05]], 0);
        let mask = EnsembleMask::single(0, 2).unwrap();
        assert_eq!(plurality_vote(&rec, &mask).unwrap(), 2);
    }

    #[test]
    fn plurality_tie_broken_by_mass() {
        // votes A and B; summed mass (0.9, 1.1) favors B
        let rec = record(vec![vec![0.6, 0.4], vec![0.3, 0.7]], 0);
        let mask = EnsembleMask::full(2).unwrap();
        assert_eq!(plurality_vote(&rec, &mask).unwrap(), 1);
    }

    #[test]
    fn plurality_rejects_empty_mask() {
        let rec = record(vec![vec![1.0, 0.0]], 0);
        let empty = EnsembleMask::new(0, 1).unwrap();
        assert_eq!(plurality_vote(&rec, &empty).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn rewards_direct_substitution() {
        let full8 = EnsembleMask::full(8).unwrap();
        assert_eq!(decider_reward(1, 1, &full8, 0.1), 1.0);
        assert_eq!(decider_reward(0, 1, &full8, 0.1), -1.1);
        let half = EnsembleMask::new(0b0000_1111, 8).unwrap();
        assert_eq!(decider_reward(0, 1, &half, 0.1), -1.05);
        assert_eq!(aggregator_reward(2, 2), 1.0);
        assert_eq!(aggregator_reward(2, 1), -1.0);
        assert_eq!(aggregator_reward(0, 0), 1.0);
    }

    fn tiny_config(n: usize, k: usize, seed: u64) -> EngineConfig {
        EngineConfig {
            n_models: n,
            choices: k,
            hidden: vec![8],
            seed,
            cold_start_min: 0,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn decider_eval_thresholds_probabilities() {
        let mut engine = Engine::new(tiny_config(3, 2, 1)).unwrap();
        // force head biases so eval-mode probabilities are (0.9, 0.2, 0.7)
        let logits = [2.1972245773362196, -1.3862943611198906, 0.8472978603872034];
        for (r, &logit) in logits.iter().enumerate() {
            for c in 0..engine.decider.head.cols {
                engine.decider.head.weights[r * engine.decider.head.cols + c] = 0.0;
            }
            engine.decider.head.bias[r] = logit;
        }
        for layer in &mut engine.decider.trunk {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let decision = engine.decider_act(false).unwrap();
        assert_eq!(decision.mask.to_bools(), vec![true, false, true]);
    }

    #[test]
    fn empty_guard_forces_most_likely_model() {
        let mut engine = Engine::new(tiny_config(3, 2, 2)).unwrap();
        // drive all inclusion probabilities to ~0, with model 1 least unlikely
        for layer in &mut engine.decider.trunk {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        engine.decider.head.weights.iter_mut().for_each(|w| *w = 0.0);
        engine.decider.head.bias = vec![-13.0, -10.0, -12.0];
        let decision = engine.decider_act(true).unwrap();
        assert_eq!(decision.mask.to_bools(), vec![false, true, false]);
        // eval mode hits the same guard without consuming randomness
        let decision = engine.decider_act(false).unwrap();
        assert_eq!(decision.mask.to_bools(), vec![false, true, false]);
    }

    #[test]
    fn aggregator_ignores_unselected_rows() {
        let mut engine = Engine::new(tiny_config(3, 4, 3)).unwrap();
        let mask = EnsembleMask::from_bools(&[true, false, true]).unwrap();
        let base = record(
            vec![
                vec![0.7, 0.1, 0.1, 0.1],
                vec![0.1, 0.7, 0.1, 0.1],
                vec![0.1, 0.1, 0.7, 0.1],
            ],
            0,
        );
        let (choice_a, _, state_a) = engine.aggregator_act(&base, &mask, false).unwrap();
        // permute the unselected model's output; the state must not change
        let mut permuted = base.clone();
        permuted.outputs[1] = vec![0.1, 0.1, 0.1, 0.7];
        let (choice_b, _, state_b) = engine.aggregator_act(&permuted, &mask, false).unwrap();
        assert_eq!(state_a, state_b);
        assert_eq!(choice_a, choice_b);
        // unselected rows are exactly zero
        assert!(state_a[4..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warm_start_loop_accounting_k2() {
        let mut cfg = tiny_config(2, 2, 4);
        cfg.warmstart_episodes = 2;
        let mut engine = Engine::new(cfg).unwrap();
        let data = vec![record(vec![vec![0.9, 0.1], vec![0.8, 0.2]], 0)];
        let log = engine.warm_start(&data).unwrap();
        let phases: Vec<Phase> = log.episodes.iter().map(|e| e.phase).collect();
        assert_eq!(phases, vec![Phase::Decider, Phase::Aggregator]);
    }

    #[test]
    fn warm_start_interim_equals_plurality_in_decider_phase() {
        let spec = SyntheticPoolSpec::independent(&[0.8, 0.6, 0.7], 4, 0.9, 20);
        let data = SyntheticGenerator::new(spec).unwrap().take_records(40);
        let mut cfg = tiny_config(3, 4, 5);
        cfg.warmstart_episodes = 2;
        cfg.cold_start_min = 0;
        let mut engine = Engine::new(cfg).unwrap();
        // Reproduce the decider-phase episode with a parallel engine whose rng
        // stream matches, and cross-check interim == plurality per query.
        let mut probe = Engine::new(engine.cfg.clone()).unwrap();
        let log = engine.warm_start(&data).unwrap();
        assert!(log.episodes[0].accuracy >= 0.0);

        probe.prev_mask = EnsembleMask::full(3).unwrap();
        let mut hits = 0usize;
        for rec in &data {
            let decision = probe.decider_act(true).unwrap();
            let interim = plurality_vote(rec, &decision.mask).unwrap();
            if interim == rec.gold {
                hits += 1;
            }
            probe.push_history(rec).unwrap();
            probe.prev_mask = decision.mask;
        }
        assert!((log.episodes[0].accuracy - hits as f64 / data.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn online_updates_fire_on_schedule() {
        let spec = SyntheticPoolSpec::independent(&[0.7, 0.7], 4, 0.9, 8);
        let mut gen = SyntheticGenerator::new(spec).unwrap();
        let mut cfg = tiny_config(2, 4, 6);
        cfg.update_period = 10;
        let mut engine = Engine::new(cfg).unwrap();
        let mut update_points = Vec::new();
        for i in 1..=25u64 {
            let rec = gen.next_record();
            let out = engine.online_step(&rec, true).unwrap();
            if out.updated {
                update_points.push(i);
            }
        }
        assert_eq!(update_points, vec![10, 20]);
        assert_eq!(engine.dec_traj.len(), 5);
        assert_eq!(engine.agg_traj.len(), 5);
    }

    #[test]
    fn no_feedback_leaves_parameters_bit_identical() {
        let spec = SyntheticPoolSpec::independent(&[0.7, 0.6], 4, 0.9, 9);
        let mut gen = SyntheticGenerator::new(spec).unwrap();
        let mut engine = Engine::new(tiny_config(2, 4, 7)).unwrap();
        let dec_before = engine.decider.clone();
        let agg_before = engine.aggregator.clone();
        for _ in 0..100 {
            let rec = gen.next_record();
            engine.online_step(&rec, false).unwrap();
        }
        assert_eq!(engine.decider, dec_before);
        assert_eq!(engine.aggregator, agg_before);
        assert_eq!(engine.online_seen, 0);
    }

    #[test]
    fn route_step_prefers_single_model_answer() {
        let mut engine = Engine::new(tiny_config(2, 3, 10)).unwrap();
        for layer in &mut engine.decider.trunk {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        engine.decider.head.weights.iter_mut().for_each(|w| *w = 0.0);
        engine.decider.head.bias = vec![5.0, -5.0];
        // model 0 picks choice 2, model 1 picks choice 0; routing follows model 0
        let rec = record(vec![vec![0.1, 0.2, 0.7], vec![0.8, 0.1, 0.1]], 2);
        let out = engine.route_step(&rec).unwrap();
        assert_eq!(out.mask.popcount(), 1);
        assert_eq!(out.final_choice, 2);
    }

    #[test]
    fn snapshot_round_trip_preserves_stream() {
        let spec = SyntheticPoolSpec::independent(&[0.7, 0.6, 0.8], 4, 0.9, 30);
        let data = SyntheticGenerator::new(spec.clone()).unwrap().take_records(50);
        let mut cfg = tiny_config(3, 4, 11);
        cfg.warmstart_episodes = 4;
        let mut engine = Engine::new(cfg).unwrap();
        engine.warm_start(&data).unwrap();

        let snap = engine.snapshot();
        let mut restored = Engine::from_snapshot(snap).unwrap();

        let mut gen = SyntheticGenerator::new(spec).unwrap();
        for _ in 0..30 {
            let rec = gen.next_record();
            let a = engine.online_step(&rec, true).unwrap();
            let b = restored.online_step(&rec, true).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(engine.decider, restored.decider);
        assert_eq!(engine.aggregator, restored.aggregator);
    }

    #[test]
    fn cold_start_bypasses_policy_with_full_mask() {
        let mut cfg = tiny_config(3, 4, 12);
        cfg.cold_start_min = 5;
        let mut engine = Engine::new(cfg).unwrap();
        let decision = engine.decider_act(true).unwrap();
        assert!(!decision.from_policy);
        assert_eq!(decision.mask.popcount(), 3);
    }
}
