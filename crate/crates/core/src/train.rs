//! Toy tabular refiner policy with supervised and group-relative training of
//! the single-generation surrogate objective.
//!
//! The surrogate for a pooled state `(p0, i)` and action `a` is
//! `q(s, a) = E_{i' ~ G(a)} R(p0, i') - R(p0, i)` for refinements and
//! `q(s, keep) = alpha`. Everything here works on a [`SyntheticWorld`] so the
//! objective can be evaluated exactly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::engine::hash64;
use crate::reward::RewardConfig;
use crate::synthworld::{
    sample_categorical, DeterministicPolicy, SyntheticWorld, TabularPolicy, WorldError,
};
use crate::types::{Action, ImageRef, PromptText, RefinementDecision};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("state (p0={p0}, outcome={outcome}) is outside the policy's state space")]
    UnknownState { p0: usize, outcome: usize },
    #[error("action {0} is outside the policy's action space")]
    UnknownAction(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image pool is empty")]
    EmptyPool,
    #[error(transparent)]
    World(#[from] WorldError),
}

/// A myopic state: original prompt index and current image outcome index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub p0: usize,
    pub outcome: usize,
}

impl State {
    pub fn new(p0: usize, outcome: usize) -> Self {
        Self { p0, outcome }
    }
}

/// Softmax with temperature, shifted by the row maximum.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Tabular softmax policy. Row `p0 * n_outcomes + outcome` holds the logits
/// of the `n_prompts + 1` actions; the last action is keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPolicy {
    pub n_prompts: usize,
    pub n_outcomes: usize,
    pub temperature: f64,
    pub logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn uniform(world: &SyntheticWorld, temperature: f64) -> Result<Self, TrainError> {
        let p = Self {
            n_prompts: world.n_prompts(),
            n_outcomes: world.n_outcomes(),
            temperature,
            logits: vec![vec![0.0; world.n_actions()]; world.n_prompts() * world.n_outcomes()],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.logits.len() != self.n_prompts * self.n_outcomes {
            return Err(TrainError::InvalidConfig("logits row count".into()));
        }
        if self
            .logits
            .iter()
            .any(|r| r.len() != self.n_actions() || r.iter().any(|l| !l.is_finite()))
        {
            return Err(TrainError::InvalidConfig("logits rows must be finite, n_prompts + 1 wide".into()));
        }
        Ok(())
    }

    pub fn matches_world(&self, world: &SyntheticWorld) -> bool {
        self.n_prompts == world.n_prompts() && self.n_outcomes == world.n_outcomes()
    }

    pub fn n_actions(&self) -> usize {
        self.n_prompts + 1
    }

    pub fn keep_action(&self) -> usize {
        self.n_prompts
    }

    pub fn contains(&self, s: State) -> bool {
        s.p0 < self.n_prompts && s.outcome < self.n_outcomes
    }

    pub fn row_index(&self, s: State) -> usize {
        s.p0 * self.n_outcomes + s.outcome
    }

    pub fn row(&self, s: State) -> &[f64] {
        &self.logits[self.row_index(s)]
    }

    fn row_mut(&mut self, s: State) -> &mut Vec<f64> {
        let i = self.row_index(s);
        &mut self.logits[i]
    }

    pub fn probs(&self, s: State) -> Vec<f64> {
        softmax(self.row(s), self.temperature)
    }

    pub fn greedy_action(&self, s: State) -> usize {
        argmax(&self.probs(s))
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let p: Self = serde_json::from_str(s)
            .map_err(|e| TrainError::InvalidConfig(format!("policy file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    /// Max-abs logit difference.
    pub fn max_abs_diff(&self, other: &ToyPolicy) -> f64 {
        self.logits
            .iter()
            .flatten()
            .zip(other.logits.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Max-abs action-probability difference over all states.
    pub fn max_prob_diff(&self, other: &ToyPolicy) -> f64 {
        let mut out = 0.0f64;
        for p0 in 0..self.n_prompts {
            for o in 0..self.n_outcomes {
                let s = State::new(p0, o);
                for (a, b) in self.probs(s).iter().zip(other.probs(s)) {
                    out = out.max((a - b).abs());
                }
            }
        }
        out
    }
}

impl TabularPolicy for ToyPolicy {
    fn action_probs(&self, p0: usize, outcome: usize) -> Vec<f64> {
        self.probs(State::new(p0, outcome))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Prompts for RL (`rl_prompts`) and the pool of `(p0, image)` pairs the
/// surrogate samples its starting images from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCorpus {
    pub rl_prompts: Vec<PromptText>,
    pub image_pool: Vec<(PromptText, ImageRef)>,
}

impl TrainCorpus {
    /// Pool containing every `(p0, outcome)` pair for the given prompts.
    pub fn full_support(world: &SyntheticWorld, rl_prompts: &[usize]) -> Self {
        let rl: Vec<PromptText> = rl_prompts.iter().map(|&p| world.prompts()[p].clone()).collect();
        let image_pool = rl_prompts
            .iter()
            .flat_map(|&p| (0..world.n_outcomes()).map(move |m| (p, m)))
            .map(|(p, m)| (world.prompts()[p].clone(), world.image(m)))
            .collect();
        Self { rl_prompts: rl, image_pool }
    }

    pub fn from_states(world: &SyntheticWorld, rl_prompts: &[usize], states: &[State]) -> Self {
        Self {
            rl_prompts: rl_prompts.iter().map(|&p| world.prompts()[p].clone()).collect(),
            image_pool: states
                .iter()
                .map(|s| (world.prompts()[s.p0].clone(), world.image(s.outcome)))
                .collect(),
        }
    }

    /// Maps the pool onto world states.
    pub fn pool_states(&self, world: &SyntheticWorld) -> Result<Vec<State>, TrainError> {
        if self.image_pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        self.image_pool
            .iter()
            .map(|(p0, img)| Ok(State::new(world.prompt_index(p0)?, world.outcome_index(img)?)))
            .collect()
    }

    /// Initial-prompt distribution induced by `rl_prompts` (duplicates add weight).
    pub fn prompt_distribution(&self, world: &SyntheticWorld) -> Result<Vec<f64>, TrainError> {
        if self.rl_prompts.is_empty() {
            return Err(TrainError::InvalidConfig("no RL prompts".into()));
        }
        let mut d = vec![0.0; world.n_prompts()];
        for p in &self.rl_prompts {
            d[world.prompt_index(p)?] += 1.0;
        }
        let n = self.rl_prompts.len() as f64;
        Ok(d.into_iter().map(|x| x / n).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Pooled states drawn per step; each gets its own group.
    pub states_per_step: usize,
    /// Optimization passes over each step's rollouts.
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coef: 0.0,
            learning_rate: 0.5,
            steps: 200,
            states_per_step: 4,
            inner_epochs: 2,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return bad("kl_coef must be >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.states_per_step < 1 || self.inner_epochs < 1 {
            return bad("states_per_step and inner_epochs must be >= 1");
        }
        Ok(())
    }
}

/// Group-standardized advantages with population standard deviation.
/// Groups whose std is below 1e-12 get all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// Exact per-action surrogate values `q(s, a)` (keep last).
pub fn surrogate_q(world: &SyntheticWorld, s: State, rcfg: &RewardConfig) -> Vec<f64> {
    let r_now = world.reward(s.p0, s.outcome, rcfg);
    let mut q: Vec<f64> = (0..world.n_prompts())
        .map(|a| world.expected_reward(s.p0, a, rcfg) - r_now)
        .collect();
    q.push(rcfg.alpha);
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSample {
    pub state: State,
    pub action: usize,
    pub shaped_reward: f64,
}

/// Shaped reward of taking `action` in `state`: the keep bonus for keep,
/// otherwise `R(p0, i') - R(p0, i)` with `i'` drawn from the action's prompt.
pub fn surrogate_reward_at<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    state: State,
    action: usize,
    rcfg: &RewardConfig,
    rng: &mut R,
) -> f64 {
    if action == world.keep_action() {
        return rcfg.alpha;
    }
    let next = world.sample_outcome(action, rng);
    world.reward(state.p0, next, rcfg) - world.reward(state.p0, state.outcome, rcfg)
}

/// Draws `(p0, i)` from the pool, an action from the policy, and the shaped
/// reward of that single generation.
pub fn surrogate_sample<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    rcfg: &RewardConfig,
    rng: &mut R,
) -> Result<SurrogateSample, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let state = pool[rng.random_range(0..pool.len())];
    if !policy.contains(state) {
        return Err(TrainError::UnknownState { p0: state.p0, outcome: state.outcome });
    }
    let action = sample_categorical(&policy.probs(state), rng);
    let shaped_reward = surrogate_reward_at(world, state, action, rcfg, rng);
    Ok(SurrogateSample { state, action, shaped_reward })
}

fn check_budget(world: &SyntheticWorld, pool: &[State]) -> Result<(), TrainError> {
    let needed = (pool.len() * world.n_actions() * world.n_outcomes()) as u64;
    if needed > crate::synthworld::DEFAULT_NODE_BUDGET {
        return Err(WorldError::WorldTooLarge {
            needed,
            budget: crate::synthworld::DEFAULT_NODE_BUDGET,
        }
        .into());
    }
    Ok(())
}

/// Exact surrogate objective: pool average of `sum_a pi(a|s) q(s, a)`.
pub fn exact_surrogate(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    rcfg: &RewardConfig,
) -> Result<f64, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    check_budget(world, pool)?;
    let mut total = 0.0;
    for &s in pool {
        let q = surrogate_q(world, s, rcfg);
        total += policy.probs(s).iter().zip(&q).map(|(p, q)| p * q).sum::<f64>();
    }
    Ok(total / pool.len() as f64)
}

/// Score-function gradient of [`exact_surrogate`] with respect to every logit:
/// `d/d theta[s][b] = w_s * pi(b|s) * (q(s, b) - v(s)) / temperature`.
pub fn surrogate_gradient(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    rcfg: &RewardConfig,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    check_budget(world, pool)?;
    let w = 1.0 / pool.len() as f64;
    let mut grad = vec![vec![0.0; policy.n_actions()]; policy.logits.len()];
    for &s in pool {
        let q = surrogate_q(world, s, rcfg);
        let pi = policy.probs(s);
        let v: f64 = pi.iter().zip(&q).map(|(p, q)| p * q).sum();
        let row = &mut grad[policy.row_index(s)];
        for b in 0..pi.len() {
            row[b] += w * pi[b] * (q[b] - v) / policy.temperature;
        }
    }
    Ok(grad)
}

/// Max-abs gap between [`surrogate_gradient`] and central differences with
/// step 1e-5 on every logit.
#[allow(clippy::needless_range_loop)]
pub fn gradient_check(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    rcfg: &RewardConfig,
) -> Result<f64, TrainError> {
    const H: f64 = 1e-5;
    let analytic = surrogate_gradient(policy, pool, world, rcfg)?;
    let mut probe = policy.clone();
    let mut worst = 0.0f64;
    for r in 0..policy.logits.len() {
        for b in 0..policy.n_actions() {
            let base = policy.logits[r][b];
            probe.logits[r][b] = base + H;
            let up = exact_surrogate(&probe, pool, world, rcfg)?;
            probe.logits[r][b] = base - H;
            let down = exact_surrogate(&probe, pool, world, rcfg)?;
            probe.logits[r][b] = base;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max((fd - analytic[r][b]).abs());
        }
    }
    Ok(worst)
}

/// Per-state argmax of `q(s, ·)`: the exact surrogate-optimal action.
/// Ties resolve to keep, then to the lowest prompt index.
pub fn surrogate_optimal_action(world: &SyntheticWorld, s: State, rcfg: &RewardConfig) -> usize {
    let q = surrogate_q(world, s, rcfg);
    let keep = world.keep_action();
    let mut best = keep;
    for a in 0..keep {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Keep probability summed over the distinct pooled states.
pub fn keep_mass(policy: &ToyPolicy, pool: &[State]) -> f64 {
    let distinct: BTreeSet<State> = pool.iter().copied().collect();
    distinct
        .into_iter()
        .map(|s| policy.probs(s)[policy.keep_action()])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SftExample {
    pub state: State,
    pub action: usize,
}

/// Maps `(p0, image, decision)` triples onto world states and action indices.
pub fn sft_examples(
    world: &SyntheticWorld,
    records: &[(PromptText, ImageRef, RefinementDecision)],
) -> Result<Vec<SftExample>, TrainError> {
    records
        .iter()
        .map(|(p0, img, d)| {
            let state = State::new(world.prompt_index(p0)?, world.outcome_index(img)?);
            let action = match &d.action {
                Action::Keep => world.keep_action(),
                Action::Refine(p) => world.prompt_index(p)?,
            };
            Ok(SftExample { state, action })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftReport {
    pub examples: usize,
    pub mean_log_likelihood_before: f64,
    pub mean_log_likelihood_after: f64,
}

fn mean_log_likelihood(policy: &ToyPolicy, data: &[SftExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter()
        .map(|e| policy.probs(e.state)[e.action].ln())
        .sum::<f64>()
        / data.len() as f64
}

/// Full-batch gradient ascent on the mean log-likelihood of the chosen actions.
pub fn sft_update(
    policy: &ToyPolicy,
    data: &[SftExample],
    lr: f64,
    epochs: usize,
) -> Result<(ToyPolicy, SftReport), TrainError> {
    for e in data {
        if !policy.contains(e.state) {
            return Err(TrainError::UnknownState { p0: e.state.p0, outcome: e.state.outcome });
        }
        if e.action >= policy.n_actions() {
            return Err(TrainError::UnknownAction(e.action));
        }
    }
    let before = mean_log_likelihood(policy, data);
    let mut out = policy.clone();
    if !data.is_empty() {
        let mut counts: BTreeMap<State, Vec<f64>> = BTreeMap::new();
        for e in data {
            counts.entry(e.state).or_insert_with(|| vec![0.0; policy.n_actions()])[e.action] += 1.0;
        }
        let n = data.len() as f64;
        let tau = policy.temperature;
        for _ in 0..epochs {
            for (&s, c) in &counts {
                let pi = out.probs(s);
                let total: f64 = c.iter().sum();
                let row = out.row_mut(s);
                for b in 0..pi.len() {
                    row[b] += lr * (c[b] - total * pi[b]) / (n * tau);
                }
            }
        }
    }
    let after = mean_log_likelihood(&out, data);
    Ok((
        out,
        SftReport {
            examples: data.len(),
            mean_log_likelihood_before: before,
            mean_log_likelihood_after: after,
        },
    ))
}

/// One sampled rollout, in the export format for external trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub p0: usize,
    pub outcome: usize,
    pub action: usize,
    pub shaped_reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoStats {
    pub mean_shaped_reward: f64,
    pub degenerate_groups: usize,
    pub rollouts: Vec<RolloutRecord>,
}

struct Group {
    state: State,
    actions: Vec<usize>,
    advantages: Vec<f64>,
}

/// One GRPO update.
///
/// Each of `states_per_step` pooled states gets a group of `group_size`
/// actions from the frozen policy; rewards are standardized within the group.
/// The clipped-ratio objective is then ascended for `inner_epochs` passes.
/// With `kl_coef > 0` the KL penalty toward the pre-step policy is applied
/// semi-implicitly: each touched row solves
/// `(I + lr * kl * w_s * F_s) delta = lr * g_s`, with `F_s` the softmax Fisher
/// matrix, which stays stable for arbitrarily large coefficients.
pub fn grpo_step(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    cfg: &GrpoConfig,
    rcfg: &RewardConfig,
    seed: u64,
) -> Result<(ToyPolicy, GrpoStats), TrainError> {
    grpo_step_indexed(policy, pool, world, cfg, rcfg, seed, 0)
}

fn grpo_step_indexed(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    cfg: &GrpoConfig,
    rcfg: &RewardConfig,
    seed: u64,
    step: usize,
) -> Result<(ToyPolicy, GrpoStats), TrainError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    if let Some(s) = pool.iter().find(|s| !policy.contains(**s)) {
        return Err(TrainError::UnknownState { p0: s.p0, outcome: s.outcome });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = policy.clone();

    let mut groups = Vec::with_capacity(cfg.states_per_step);
    let mut rollouts = Vec::with_capacity(cfg.states_per_step * cfg.group_size);
    let mut reward_sum = 0.0;
    let mut degenerate = 0;
    for _ in 0..cfg.states_per_step {
        let state = pool[rng.random_range(0..pool.len())];
        let probs = old.probs(state);
        let actions: Vec<usize> = (0..cfg.group_size)
            .map(|_| sample_categorical(&probs, &mut rng))
            .collect();
        let rewards: Vec<f64> = actions
            .iter()
            .map(|&a| surrogate_reward_at(world, state, a, rcfg, &mut rng))
            .collect();
        reward_sum += rewards.iter().sum::<f64>();
        let advantages = grpo_advantages(&rewards);
        if advantages.iter().all(|a| *a == 0.0) {
            degenerate += 1;
            debug!(?state, "degenerate group, no update");
        }
        for i in 0..actions.len() {
            rollouts.push(RolloutRecord {
                step,
                p0: state.p0,
                outcome: state.outcome,
                action: actions[i],
                shaped_reward: rewards[i],
                advantage: advantages[i],
            });
        }
        groups.push(Group { state, actions, advantages });
    }

    let tau = old.temperature;
    let n_samples = (cfg.states_per_step * cfg.group_size) as f64;
    let n_groups = cfg.states_per_step as f64;
    let mut state_weight: BTreeMap<State, f64> = BTreeMap::new();
    for g in &groups {
        *state_weight.entry(g.state).or_insert(0.0) += 1.0 / n_groups;
    }

    let mut cur = old.clone();
    for _ in 0..cfg.inner_epochs {
        let mut grads: BTreeMap<State, Vec<f64>> = state_weight
            .keys()
            .map(|&s| (s, vec![0.0; cur.n_actions()]))
            .collect();
        for g in &groups {
            let pi = cur.probs(g.state);
            let pi_old = old.probs(g.state);
            let grad = grads.get_mut(&g.state).expect("state registered");
            for (&a, &adv) in g.actions.iter().zip(&g.advantages) {
                if adv == 0.0 {
                    continue;
                }
                let ratio = pi[a] / pi_old[a];
                let clipped = (adv > 0.0 && ratio > 1.0 + cfg.clip_epsilon)
                    || (adv < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
                if clipped {
                    continue;
                }
                let scale = adv * ratio / (n_samples * tau);
                for b in 0..pi.len() {
                    let ind = if a == b { 1.0 } else { 0.0 };
                    grad[b] += scale * (ind - pi[b]);
                }
            }
        }
        let mut next = cur.clone();
        for (&s, g) in &grads {
            let pi = cur.probs(s);
            let w = state_weight[&s];
            let delta: Vec<f64> = if cfg.kl_coef == 0.0 {
                g.iter().map(|x| cfg.learning_rate * x).collect()
            } else {
                let pi_old = old.probs(s);
                let kl: f64 = pi
                    .iter()
                    .zip(&pi_old)
                    .map(|(p, q)| p * (p.max(1e-300).ln() - q.max(1e-300).ln()))
                    .sum();
                let n = pi.len();
                let rhs = DVector::from_fn(n, |c, _| {
                    let kl_grad = pi[c] * (pi[c].max(1e-300).ln() - pi_old[c].max(1e-300).ln() - kl) / tau;
                    cfg.learning_rate * (g[c] - cfg.kl_coef * w * kl_grad)
                });
                let c = cfg.learning_rate * cfg.kl_coef * w / (tau * tau);
                let a = DMatrix::from_fn(n, n, |i, j| {
                    let fisher = if i == j { pi[i] - pi[i] * pi[j] } else { -pi[i] * pi[j] };
                    (if i == j { 1.0 } else { 0.0 }) + c * fisher
                });
                let chol = a.cholesky().expect("I + cF is positive definite");
                chol.solve(&rhs).iter().copied().collect()
            };
            for (l, d) in next.row_mut(s).iter_mut().zip(delta) {
                *l += d;
            }
        }
        cur = next;
    }

    Ok((
        cur,
        GrpoStats {
            mean_shaped_reward: reward_sum / n_samples,
            degenerate_groups: degenerate,
            rollouts,
        },
    ))
}

/// `cfg.steps` GRPO steps with per-step seeds derived from `seed`.
pub fn train_grpo(
    policy: &ToyPolicy,
    pool: &[State],
    world: &SyntheticWorld,
    cfg: &GrpoConfig,
    rcfg: &RewardConfig,
    seed: u64,
) -> Result<(ToyPolicy, Vec<GrpoStats>), TrainError> {
    let mut cur = policy.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (next, stats) =
            grpo_step_indexed(&cur, pool, world, cfg, rcfg, hash64(&[seed, step as u64]), step)?;
        cur = next;
        history.push(stats);
    }
    Ok((cur, history))
}

/// Outcome of comparing the surrogate optimum with the exact multi-step optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceReport {
    pub t_max: u32,
    pub alpha: f64,
    /// Decision states reachable under some policy.
    pub reachable_states: Vec<State>,
    /// Reachable states absent from the pool.
    pub missing_states: Vec<State>,
    pub support_covered: bool,
    pub surrogate_policy: DeterministicPolicy,
    pub surrogate_eta: f64,
    pub best_policy: DeterministicPolicy,
    pub best_eta: f64,
    /// `None` when the claim's preconditions (full support, zero keep bonus)
    /// are not met.
    pub coincides: Option<bool>,
}

const COINCIDENCE_TOL: f64 = 1e-6;
const POLICY_ENUM_BUDGET: u64 = 1_000_000;

/// Finds the per-state surrogate optimum and the best deterministic policy for
/// the exact objective (by exhaustive enumeration over reachable decision
/// states), and compares their exact objective values.
#[allow(clippy::needless_range_loop)]
pub fn objective_coincidence_test(
    world: &SyntheticWorld,
    corpus: &TrainCorpus,
    rcfg: &RewardConfig,
    t_max: u32,
) -> Result<CoincidenceReport, TrainError> {
    let dist = corpus.prompt_distribution(world)?;
    let pool: BTreeSet<State> = corpus.pool_states(world)?.into_iter().collect();

    let any_emits: Vec<bool> = (0..world.n_outcomes())
        .map(|m| (0..world.n_prompts()).any(|q| world.emission_row(q)[m] > 0.0))
        .collect();
    let mut reachable = BTreeSet::new();
    if t_max >= 1 {
        for (p0, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for m in 0..world.n_outcomes() {
                let initial = world.emission_row(p0)[m] > 0.0;
                if initial || (t_max >= 2 && any_emits[m]) {
                    reachable.insert(State::new(p0, m));
                }
            }
        }
    }
    let missing: Vec<State> = reachable.difference(&pool).copied().collect();
    let support_covered = missing.is_empty();

    let mut surrogate_policy = DeterministicPolicy::always_keep(world);
    for &s in &pool {
        surrogate_policy.set(s.p0, s.outcome, surrogate_optimal_action(world, s, rcfg));
    }
    let surrogate_eta = world.exact_eta(&dist, &surrogate_policy, t_max, rcfg)?;

    let states: Vec<State> = reachable.iter().copied().collect();
    let n_actions = world.n_actions() as u64;
    let combos = n_actions
        .checked_pow(states.len() as u32)
        .filter(|c| *c <= POLICY_ENUM_BUDGET)
        .ok_or(WorldError::WorldTooLarge {
            needed: n_actions.saturating_pow(states.len() as u32),
            budget: POLICY_ENUM_BUDGET,
        })?;
    let mut best_policy = DeterministicPolicy::always_keep(world);
    let mut best_eta = f64::NEG_INFINITY;
    let mut candidate = DeterministicPolicy::always_keep(world);
    for code in 0..combos {
        let mut c = code;
        for s in &states {
            candidate.set(s.p0, s.outcome, (c % n_actions) as usize);
            c /= n_actions;
        }
        let eta = world.exact_eta(&dist, &candidate, t_max, rcfg)?;
        if eta > best_eta {
            best_eta = eta;
            best_policy = candidate.clone();
        }
    }

    let coincides = (support_covered && rcfg.alpha == 0.0)
        .then(|| (best_eta - surrogate_eta).abs() <= COINCIDENCE_TOL);
    Ok(CoincidenceReport {
        t_max,
        alpha: rcfg.alpha,
        reachable_states: states,
        missing_states: missing,
        support_covered,
        surrogate_policy,
        surrogate_eta,
        best_policy,
        best_eta,
        coincides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SyntheticWorld {
        SyntheticWorld::from_json(
            r#"{
              "prompts": ["a cat with a gun", "a cat with a toy water gun"],
              "outcomes": [[1.0, 0.0], [0.0, 1.0]],
              "emission": [[0.8, 0.2], [0.1, 0.9]],
              "toxic": [0.9, 0.05],
              "align": [[0.3, 0.25], [0.1, 0.4]]
            }"#,
        )
        .unwrap()
    }

    fn rcfg(alpha: f64) -> RewardConfig {
        RewardConfig { alpha, beta: 1.0 }
    }

    #[test]
    fn advantages_examples() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0]);
        assert!((a[0] + 1.2247).abs() < 1e-3 && a[1].abs() < 1e-12 && (a[2] - 1.2247).abs() < 1e-3);
        assert_eq!(grpo_advantages(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        let b = grpo_advantages(&[0.0, 1.0]);
        assert!((b[0] + 1.0).abs() < 1e-6 && (b[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, 0.0, -3.0], 0.5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[0] > 0.999);
    }

    #[test]
    fn forced_keep_sample_is_alpha() {
        let w = world();
        let mut pol = ToyPolicy::uniform(&w, 1.0).unwrap();
        for row in &mut pol.logits {
            row[2] = 1e3;
        }
        let pool = TrainCorpus::full_support(&w, &[0]).pool_states(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = surrogate_sample(&pol, &pool, &w, &rcfg(0.3), &mut rng).unwrap();
            assert_eq!(s.action, 2);
            assert_eq!(s.shaped_reward, 0.3);
        }
    }

    #[test]
    fn constant_reward_refines_score_zero() {
        let w = SyntheticWorld::from_json(
            r#"{"prompts":["a","b"],"outcomes":[[0],[1]],"emission":[[0.5,0.5],[0.2,0.8]],
                "toxic":[0.2,0.2],"align":[[0.1,0.1],[0.3,0.3]]}"#,
        )
        .unwrap();
        let pol = ToyPolicy::uniform(&w, 1.0).unwrap();
        let pool = TrainCorpus::full_support(&w, &[0, 1]).pool_states(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let s = surrogate_sample(&pol, &pool, &w, &rcfg(0.3), &mut rng).unwrap();
            if s.action != w.keep_action() {
                assert_eq!(s.shaped_reward, 0.0);
            }
        }
    }

    #[test]
    fn deterministic_difference() {
        // R(i) = 0.4 for outcome 0, R(i') = 0.9 for outcome 1, prompt 1 emits outcome 1
        let w = SyntheticWorld::from_json(
            r#"{"prompts":["a","b"],"outcomes":[[0],[1]],"emission":[[1,0],[0,1]],
                "toxic":[0.6,0.1],"align":[[0,0],[0,0]]}"#,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = surrogate_reward_at(&w, State::new(0, 0), 1, &rcfg(0.3), &mut rng);
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_surrogate_special_cases() {
        let w = world();
        let pool = TrainCorpus::full_support(&w, &[0, 1]).pool_states(&w).unwrap();
        let mut keep = ToyPolicy::uniform(&w, 1.0).unwrap();
        for row in &mut keep.logits {
            row[2] = 800.0;
        }
        assert!((exact_surrogate(&keep, &pool, &w, &rcfg(0.3)).unwrap() - 0.3).abs() < 1e-12);

        // alpha = 0, always refine with prompt 1
        let mut refine = ToyPolicy::uniform(&w, 1.0).unwrap();
        for row in &mut refine.logits {
            row[1] = 800.0;
        }
        let r = rcfg(0.0);
        let expected: f64 = pool
            .iter()
            .map(|s| w.expected_reward(s.p0, 1, &r) - w.reward(s.p0, s.outcome, &r))
            .sum::<f64>()
            / pool.len() as f64;
        assert!((exact_surrogate(&refine, &pool, &w, &r).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_fd_and_vanishes_for_constant_reward() {
        let w = world();
        let pool = TrainCorpus::full_support(&w, &[0, 1]).pool_states(&w).unwrap();
        let mut pol = ToyPolicy::uniform(&w, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in pol.logits.iter_mut().flatten() {
            *x = rng.random_range(-2.0..2.0);
        }
        assert!(gradient_check(&pol, &pool, &w, &rcfg(0.3)).unwrap() < 1e-5);

        let flat = SyntheticWorld::from_json(
            r#"{"prompts":["a","b"],"outcomes":[[0],[1]],"emission":[[0.5,0.5],[0.2,0.8]],
                "toxic":[0.2,0.2],"align":[[0.1,0.1],[0.3,0.3]]}"#,
        )
        .unwrap();
        let g0 = surrogate_gradient(&pol, &pool, &flat, &rcfg(0.0)).unwrap();
        assert!(g0.iter().flatten().all(|g| g.abs() < 1e-8));
        // with a keep bonus only the bonus term drives the gradient
        let g = surrogate_gradient(&pol, &pool, &flat, &rcfg(0.3)).unwrap();
        for s in &pool {
            let pi = pol.probs(*s);
            let row = &g[s.p0 * 2 + s.outcome];
            let w_s = 1.0 / pool.len() as f64;
            let keep_g = w_s * pi[2] * (0.3 - pi[2] * 0.3) / 0.7;
            assert!((row[2] - keep_g).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_point_mass_and_empty() {
        let w = world();
        let pol = ToyPolicy::uniform(&w, 1.0).unwrap();
        let data = vec![SftExample { state: State::new(0, 0), action: 1 }; 5];
        let (trained, rep) = sft_update(&pol, &data, 5.0, 2000).unwrap();
        assert!(trained.probs(State::new(0, 0))[1] > 0.99);
        assert!(rep.mean_log_likelihood_after > rep.mean_log_likelihood_before);
        let (same, _) = sft_update(&pol, &[], 5.0, 100).unwrap();
        assert_eq!(same, pol);
        let bad = vec![SftExample { state: State::new(7, 0), action: 0 }];
        assert!(matches!(sft_update(&pol, &bad, 1.0, 1), Err(TrainError::UnknownState { .. })));
    }

    #[test]
    fn zero_advantage_step_is_identity() {
        let flat = SyntheticWorld::from_json(
            r#"{"prompts":["a"],"outcomes":[[0]],"emission":[[1]],"toxic":[0.2],"align":[[0.1]]}"#,
        )
        .unwrap();
        // alpha equals every refine difference (0), so all rewards tie
        let pol = ToyPolicy::uniform(&flat, 1.0).unwrap();
        let pool = vec![State::new(0, 0)];
        for kl in [0.0, 0.5] {
            let cfg = GrpoConfig { kl_coef: kl, ..Default::default() };
            let (next, stats) = grpo_step(&pol, &pool, &flat, &cfg, &rcfg(0.0), 4).unwrap();
            assert_eq!(next, pol);
            assert_eq!(stats.degenerate_groups, cfg.states_per_step);
        }
    }

    #[test]
    fn dominant_action_gains_probability() {
        let w = SyntheticWorld::from_json(
            r#"{"prompts":["a","b"],"outcomes":[[0],[1]],"emission":[[1,0],[0,1]],
                "toxic":[0.9,0.0],"align":[[0,0],[0,0]]}"#,
        )
        .unwrap();
        let pol = ToyPolicy::uniform(&w, 1.0).unwrap();
        let s = State::new(0, 0);
        let cfg = GrpoConfig { learning_rate: 0.1, ..Default::default() };
        for seed in 0..10 {
            let (next, _) = grpo_step(&pol, &[s], &w, &cfg, &rcfg(0.3), seed).unwrap();
            assert!(next.probs(s)[1] > pol.probs(s)[1], "seed {seed}");
        }
    }

    #[test]
    fn huge_kl_anchors_policy() {
        let w = world();
        let pool = TrainCorpus::full_support(&w, &[0]).pool_states(&w).unwrap();
        let pol = ToyPolicy::uniform(&w, 1.0).unwrap();
        let cfg = GrpoConfig { kl_coef: 1e12, ..Default::default() };
        let (next, _) = grpo_step(&pol, &pool, &w, &cfg, &rcfg(0.3), 11).unwrap();
        assert!(next.max_prob_diff(&pol) < 1e-6);
        assert!(next.max_abs_diff(&pol) < 1e-6);
    }

    #[test]
    fn keep_threshold_semantics() {
        let w = world();
        let r = rcfg(0.3);
        for p0 in 0..2 {
            for m in 0..2 {
                let s = State::new(p0, m);
                let q = surrogate_q(&w, s, &r);
                let best_refine = q[..2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let a = surrogate_optimal_action(&w, s, &r);
                if best_refine < 0.3 {
                    assert_eq!(a, 2);
                } else if best_refine > 0.3 {
                    assert_ne!(a, 2);
                }
            }
        }
    }

    #[test]
    fn policy_json_roundtrip() {
        let w = world();
        let mut pol = ToyPolicy::uniform(&w, 0.5).unwrap();
        pol.logits[1][2] = 0.1 + 0.2;
        assert_eq!(ToyPolicy::from_json(&pol.to_json_pretty()).unwrap(), pol);
        assert!(ToyPolicy::from_json(r#"{"n_prompts":1,"n_outcomes":1,"temperature":0,"logits":[[0,0]]}"#).is_err());
    }
}
