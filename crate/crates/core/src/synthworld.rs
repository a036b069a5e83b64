//! A finite, fully enumerable stand-in for the generator and the scorers.
//!
//! A world has `P` prompts and `M` image outcomes. Each prompt emits an
//! outcome from its categorical emission row. Toxicity is a per-outcome table
//! and alignment a per-(original prompt, outcome) table. A refiner action is
//! "regenerate with prompt `a`" for any of the `P` prompts, or keep; action
//! index `P` is keep.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Generator, Refiner, Scorer};
use crate::error::BackendError;
use crate::reward::{compute_reward, RewardConfig, ScorerOutcome};
use crate::types::{ImageRef, PromptOrigin, PromptText, RefinementDecision};

pub const MAX_PROMPTS: usize = 32;
pub const MAX_OUTCOMES: usize = 16;
/// Work-unit budget for exact enumeration.
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

const ROW_SUM_TOL: f64 = 1e-9;

/// Pooled `(p0, outcome)` states of the benchmark world: the user prompt
/// with its toxic image and with its off-intent image.
pub const BENCHMARK_POOL: [(usize, usize); 2] = [(0, 0), (0, 2)];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("prompt {0:?} is not part of the world")]
    UnknownPrompt(String),
    #[error("image is not an outcome of the world")]
    UnknownImage,
    #[error("enumeration needs {needed} nodes, budget is {budget}")]
    WorldTooLarge { needed: u64, budget: u64 },
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("world file: {0}")]
    Io(#[from] std::io::Error),
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
}

/// On-disk world document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub prompts: Vec<String>,
    pub outcomes: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub toxic: Vec<f64>,
    pub align: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    prompts: Vec<PromptText>,
    outcomes: Vec<Vec<f64>>,
    emission: Vec<Vec<f64>>,
    toxic: Vec<f64>,
    align: Vec<Vec<f64>>,
}

/// Action probabilities of a tabular myopic policy over a world.
///
/// `action_probs(p0, outcome)` has length `n_prompts + 1`; the last entry is
/// keep.
pub trait TabularPolicy {
    fn action_probs(&self, p0: usize, outcome: usize) -> Vec<f64>;
}

impl SyntheticWorld {
    pub fn from_file_struct(f: WorldFile) -> Result<Self, WorldError> {
        let inv = |m: String| Err(WorldError::Invalid(m));
        let p = f.prompts.len();
        let m = f.outcomes.len();
        if p == 0 || p > MAX_PROMPTS {
            return inv(format!("{p} prompts, expected 1..={MAX_PROMPTS}"));
        }
        if m == 0 || m > MAX_OUTCOMES {
            return inv(format!("{m} outcomes, expected 1..={MAX_OUTCOMES}"));
        }
        let d = f.outcomes[0].len();
        if d == 0 {
            return inv("outcome feature dimension is 0".into());
        }
        for (k, o) in f.outcomes.iter().enumerate() {
            if o.len() != d {
                return inv(format!("outcome {k} has dimension {}, expected {d}", o.len()));
            }
            if o.iter().any(|x| !x.is_finite()) {
                return inv(format!("outcome {k} has non-finite features"));
            }
            if f.outcomes[..k].contains(o) {
                return inv(format!("outcome {k} duplicates an earlier feature vector"));
            }
        }
        if f.emission.len() != p {
            return inv(format!("emission has {} rows, expected {p}", f.emission.len()));
        }
        for (i, row) in f.emission.iter().enumerate() {
            if row.len() != m {
                return inv(format!("emission row {i} has {} entries, expected {m}", row.len()));
            }
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return inv(format!("emission row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return inv(format!("emission row {i} sums to {s}"));
            }
        }
        if f.toxic.len() != m {
            return inv(format!("toxic has {} entries, expected {m}", f.toxic.len()));
        }
        if f.toxic.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return inv("toxic entries must lie in [0, 1]".into());
        }
        if f.align.len() != p || f.align.iter().any(|r| r.len() != m) {
            return inv(format!("align must be {p}x{m}"));
        }
        if f.align.iter().flatten().any(|a| !(-1.0..=1.0).contains(a)) {
            return inv("align entries must lie in [-1, 1]".into());
        }
        let mut prompts = Vec::with_capacity(p);
        for (i, text) in f.prompts.into_iter().enumerate() {
            let pt = PromptText::new(text, PromptOrigin::User)
                .map_err(|e| WorldError::Invalid(format!("prompt {i}: {e}")))?;
            if prompts.iter().any(|q: &PromptText| q.as_str() == pt.as_str()) {
                return inv(format!("prompt {i} is duplicated"));
            }
            prompts.push(pt);
        }
        Ok(Self {
            prompts,
            outcomes: f.outcomes,
            emission: f.emission,
            toxic: f.toxic,
            align: f.align,
        })
    }

    pub fn to_file_struct(&self) -> WorldFile {
        WorldFile {
            prompts: self.prompts.iter().map(|p| p.as_str().to_string()).collect(),
            outcomes: self.outcomes.clone(),
            emission: self.emission.clone(),
            toxic: self.toxic.clone(),
            align: self.align.clone(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, WorldError> {
        Self::from_file_struct(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_struct()).expect("world serializes")
    }

    /// A random world with strictly positive emissions.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_prompts: usize,
        n_outcomes: usize,
        dim: usize,
    ) -> Result<Self, WorldError> {
        let prompts = (0..n_prompts).map(|i| format!("prompt {i}")).collect();
        let outcomes = (0..n_outcomes)
            .map(|k| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                // first coordinate tags the outcome so vectors are distinct
                v[0] = k as f64;
                v
            })
            .collect();
        let emission = (0..n_prompts)
            .map(|_| {
                let raw: Vec<f64> = (0..n_outcomes)
                    .map(|_| -rng.random_range(1e-3f64..1.0).ln())
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let toxic = (0..n_outcomes).map(|_| rng.random_range(0.0..=1.0)).collect();
        let align = (0..n_prompts)
            .map(|_| (0..n_outcomes).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Self::from_file_struct(WorldFile {
            prompts,
            outcomes,
            emission,
            toxic,
            align,
        })
    }

    /// Three prompts around "a cat with a gun", three outcomes (toxic,
    /// safe and on-intent, safe but off-intent). Starting from the user
    /// prompt, the best refinement improves the toxic image by 0.455 and the
    /// off-intent image by 0.155, so keep bonuses 0 / 0.3 / 0.6 give
    /// 0 / 1 / 2 keep states among [`BENCHMARK_POOL`].
    pub fn benchmark() -> Self {
        Self::from_json(include_str!("../worlds/benchmark.json")).expect("bundled world is valid")
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// `n_prompts + 1`.
    pub fn n_actions(&self) -> usize {
        self.prompts.len() + 1
    }

    pub fn keep_action(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompts(&self) -> &[PromptText] {
        &self.prompts
    }

    pub fn emission_row(&self, prompt: usize) -> &[f64] {
        &self.emission[prompt]
    }

    pub fn prompt_index(&self, prompt: &PromptText) -> Result<usize, WorldError> {
        self.prompts
            .iter()
            .position(|p| p.as_str() == prompt.as_str())
            .ok_or_else(|| WorldError::UnknownPrompt(prompt.as_str().to_string()))
    }

    pub fn outcome_index(&self, image: &ImageRef) -> Result<usize, WorldError> {
        match image {
            ImageRef::Synthetic { features } => self
                .outcomes
                .iter()
                .position(|o| o == features)
                .ok_or(WorldError::UnknownImage),
            ImageRef::External { .. } => Err(WorldError::UnknownImage),
        }
    }

    pub fn image(&self, outcome: usize) -> ImageRef {
        ImageRef::Synthetic {
            features: self.outcomes[outcome].clone(),
        }
    }

    pub fn scorer_outcome(&self, p0: usize, outcome: usize) -> ScorerOutcome {
        ScorerOutcome::new(self.toxic[outcome], self.align[p0][outcome])
            .expect("world tables validated on load")
    }

    /// `R(p0, outcome)`.
    pub fn reward(&self, p0: usize, outcome: usize, rcfg: &RewardConfig) -> f64 {
        compute_reward(&self.scorer_outcome(p0, outcome), rcfg)
    }

    /// `E_{m ~ emission[prompt]} R(p0, m)`.
    pub fn expected_reward(&self, p0: usize, prompt: usize, rcfg: &RewardConfig) -> f64 {
        self.emission[prompt]
            .iter()
            .enumerate()
            .map(|(m, &p)| p * self.reward(p0, m, rcfg))
            .sum()
    }

    /// Inverse-CDF draw from a prompt's emission row.
    pub fn sample_outcome<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> usize {
        sample_categorical(&self.emission[prompt], rng)
    }

    pub fn sample_image(&self, prompt: &PromptText, seed: u64) -> Result<ImageRef, WorldError> {
        let idx = self.prompt_index(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.image(self.sample_outcome(idx, &mut rng)))
    }

    fn check_budget(&self, needed: u64, budget: u64) -> Result<(), WorldError> {
        if needed > budget {
            return Err(WorldError::WorldTooLarge { needed, budget });
        }
        Ok(())
    }

    /// Values `V_k(m)` for `k = t_remaining`, computed by backward induction
    /// over every decision and emission branch.
    fn value_table<P: TabularPolicy + ?Sized>(
        &self,
        p0: usize,
        policy: &P,
        t_remaining: u32,
        rcfg: &RewardConfig,
        budget: u64,
    ) -> Result<Vec<f64>, WorldError> {
        let m = self.n_outcomes() as u64;
        let needed = (t_remaining as u64).max(1) * m * self.n_actions() as u64 * m;
        self.check_budget(needed, budget)?;

        let rewards: Vec<f64> = (0..self.n_outcomes()).map(|o| self.reward(p0, o, rcfg)).collect();
        let mut v = rewards.clone();
        let keep = self.keep_action();
        for _ in 0..t_remaining {
            let next: Vec<f64> = (0..self.n_outcomes())
                .map(|o| {
                    let probs = policy.action_probs(p0, o);
                    probs
                        .iter()
                        .enumerate()
                        .map(|(a, &pa)| {
                            if pa == 0.0 {
                                return 0.0;
                            }
                            let cont = if a == keep {
                                rewards[o]
                            } else {
                                dot(&self.emission[a], &v)
                            };
                            pa * cont
                        })
                        .sum()
                })
                .collect();
            v = next;
        }
        Ok(v)
    }

    /// Expected final reward from `current_outcome` with `t_remaining`
    /// refinement iterations left.
    pub fn exact_state_value<P: TabularPolicy + ?Sized>(
        &self,
        p0: usize,
        policy: &P,
        t_remaining: u32,
        current_outcome: usize,
        rcfg: &RewardConfig,
    ) -> Result<f64, WorldError> {
        let v = self.value_table(p0, policy, t_remaining, rcfg, DEFAULT_NODE_BUDGET)?;
        Ok(v[current_outcome])
    }

    /// `E_{p0 ~ dist} E_{i0 ~ G(p0)} V_{t_max}(i0)`: the exact multi-step
    /// objective.
    pub fn exact_eta<P: TabularPolicy + ?Sized>(
        &self,
        p0_dist: &[f64],
        policy: &P,
        t_max: u32,
        rcfg: &RewardConfig,
    ) -> Result<f64, WorldError> {
        self.exact_eta_with_budget(p0_dist, policy, t_max, rcfg, DEFAULT_NODE_BUDGET)
    }

    pub fn exact_eta_with_budget<P: TabularPolicy + ?Sized>(
        &self,
        p0_dist: &[f64],
        policy: &P,
        t_max: u32,
        rcfg: &RewardConfig,
        budget: u64,
    ) -> Result<f64, WorldError> {
        self.check_distribution(p0_dist)?;
        let mut eta = 0.0;
        for (p0, &w) in p0_dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let v = self.value_table(p0, policy, t_max, rcfg, budget)?;
            eta += w * dot(&self.emission[p0], &v);
        }
        Ok(eta)
    }

    /// `E[R(p0, i0)]` under the initial prompt distribution.
    pub fn expected_initial_reward(
        &self,
        p0_dist: &[f64],
        rcfg: &RewardConfig,
    ) -> Result<f64, WorldError> {
        self.check_distribution(p0_dist)?;
        Ok(p0_dist
            .iter()
            .enumerate()
            .map(|(p0, &w)| w * self.expected_reward(p0, p0, rcfg))
            .sum())
    }

    /// Exact expected sum of refine shaped rewards `R(i_{t+1}) - R(i_t)`
    /// along a trajectory (keep bonus excluded).
    pub fn exact_expected_shaped_sum<P: TabularPolicy + ?Sized>(
        &self,
        p0_dist: &[f64],
        policy: &P,
        t_max: u32,
        rcfg: &RewardConfig,
    ) -> Result<f64, WorldError> {
        self.check_distribution(p0_dist)?;
        let m = self.n_outcomes() as u64;
        let needed = (t_max as u64).max(1) * m * self.n_actions() as u64 * m;
        self.check_budget(needed, DEFAULT_NODE_BUDGET)?;
        let keep = self.keep_action();
        let mut total = 0.0;
        for (p0, &w) in p0_dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let rewards: Vec<f64> =
                (0..self.n_outcomes()).map(|o| self.reward(p0, o, rcfg)).collect();
            let mut s = vec![0.0; self.n_outcomes()];
            for _ in 0..t_max {
                let next: Vec<f64> = (0..self.n_outcomes())
                    .map(|o| {
                        let probs = policy.action_probs(p0, o);
                        probs
                            .iter()
                            .enumerate()
                            .filter(|&(a, &pa)| a != keep && pa != 0.0)
                            .map(|(a, &pa)| {
                                let cont: f64 = self.emission[a]
                                    .iter()
                                    .enumerate()
                                    .map(|(o2, &e)| e * (rewards[o2] - rewards[o] + s[o2]))
                                    .sum();
                                pa * cont
                            })
                            .sum()
                    })
                    .collect();
                s = next;
            }
            total += w * dot(&self.emission[p0], &s);
        }
        Ok(total)
    }

    pub fn check_distribution(&self, dist: &[f64]) -> Result<(), WorldError> {
        if dist.len() != self.n_prompts() {
            return Err(WorldError::Invalid(format!(
                "prompt distribution has {} entries, expected {}",
                dist.len(),
                self.n_prompts()
            )));
        }
        let s: f64 = dist.iter().sum();
        if dist.iter().any(|w| !w.is_finite() || *w < 0.0) || (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(WorldError::Invalid(format!("prompt distribution sums to {s}")));
        }
        Ok(())
    }

    pub fn uniform_prompt_distribution(&self) -> Vec<f64> {
        vec![1.0 / self.n_prompts() as f64; self.n_prompts()]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Deterministic policy: one action per `(p0, outcome)` state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    n_outcomes: usize,
    n_actions: usize,
    table: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(world: &SyntheticWorld, table: Vec<usize>) -> Self {
        assert_eq!(table.len(), world.n_prompts() * world.n_outcomes());
        assert!(table.iter().all(|&a| a < world.n_actions()));
        Self {
            n_outcomes: world.n_outcomes(),
            n_actions: world.n_actions(),
            table,
        }
    }

    pub fn constant(world: &SyntheticWorld, action: usize) -> Self {
        Self::new(world, vec![action; world.n_prompts() * world.n_outcomes()])
    }

    pub fn always_keep(world: &SyntheticWorld) -> Self {
        Self::constant(world, world.keep_action())
    }

    pub fn action(&self, p0: usize, outcome: usize) -> usize {
        self.table[p0 * self.n_outcomes + outcome]
    }

    pub fn set(&mut self, p0: usize, outcome: usize, action: usize) {
        assert!(action < self.n_actions);
        self.table[p0 * self.n_outcomes + outcome] = action;
    }
}

impl TabularPolicy for DeterministicPolicy {
    fn action_probs(&self, p0: usize, outcome: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_actions];
        v[self.action(p0, outcome)] = 1.0;
        v
    }
}

pub struct SyntheticGenerator<'w> {
    pub world: &'w SyntheticWorld,
}

impl Generator for SyntheticGenerator<'_> {
    fn generate(&self, prompt: &PromptText, seed: u64) -> Result<ImageRef, BackendError> {
        self.world.sample_image(prompt, seed).map_err(BackendError::wrap)
    }
}

/// Scores with the world's toxicity and alignment tables.
pub struct SyntheticScorer<'w> {
    pub world: &'w SyntheticWorld,
}

impl Scorer for SyntheticScorer<'_> {
    fn score(&self, p0: &PromptText, image: &ImageRef) -> Result<ScorerOutcome, BackendError> {
        let p = self.world.prompt_index(p0).map_err(BackendError::wrap)?;
        let m = self.world.outcome_index(image).map_err(BackendError::wrap)?;
        Ok(self.world.scorer_outcome(p, m))
    }
}

/// Samples decisions from a tabular policy, seeded per call.
pub struct PolicyRefiner<'w, P> {
    pub world: &'w SyntheticWorld,
    pub policy: P,
}

impl<P: TabularPolicy + Send + Sync> Refiner for PolicyRefiner<'_, P> {
    fn refine(
        &self,
        p0: &PromptText,
        latest_image: &ImageRef,
        seed: u64,
    ) -> Result<RefinementDecision, BackendError> {
        let p = self.world.prompt_index(p0).map_err(BackendError::wrap)?;
        let m = self.world.outcome_index(latest_image).map_err(BackendError::wrap)?;
        let probs = self.policy.action_probs(p, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sample_categorical(&probs, &mut rng);
        if a == self.world.keep_action() {
            Ok(RefinementDecision::keep())
        } else {
            let prompt = self.world.prompts[a]
                .with_origin(PromptOrigin::Refined)
                .map_err(BackendError::wrap)?;
            Ok(RefinementDecision::refine(prompt))
        }
    }
}
