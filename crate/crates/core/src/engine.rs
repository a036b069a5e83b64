//! The refinement loop: generate, score, then let the refiner keep the latest
//! image or rewrite the prompt, up to `t_max` rewrites.

use rayon::prelude::*;
use thiserror::Error;
use tracing::debug;

use crate::error::{BackendError, CoreError};
use crate::reward::{compute_reward, shaped_step_reward, RewardConfig, RewardError, ScorerOutcome};
use crate::trajectory::{Termination, Trajectory, TrajectoryStep};
use crate::types::{is_keep_sentinel, Action, ImageRef, LoopConfig, PromptText, RefinementDecision};

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &PromptText, seed: u64) -> Result<ImageRef, BackendError>;
}

/// A myopic refiner: it sees the original prompt and the latest image only.
pub trait Refiner: Send + Sync {
    fn refine(
        &self,
        p0: &PromptText,
        latest_image: &ImageRef,
        seed: u64,
    ) -> Result<RefinementDecision, BackendError>;
}

/// Scores an image against the ORIGINAL prompt.
pub trait Scorer: Send + Sync {
    fn score(&self, p0: &PromptText, image: &ImageRef) -> Result<ScorerOutcome, BackendError>;
}

#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generator: &'a dyn Generator,
    pub refiner: &'a dyn Refiner,
    pub scorer: &'a dyn Scorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Refine,
    Score,
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("backend failure during {stage:?} at step {step}: {source}")]
    Backend {
        step: u32,
        stage: Stage,
        /// Steps completed before the failure.
        partial: Vec<TrajectoryStep>,
        #[source]
        source: BackendError,
    },
    #[error("refiner returned the keep sentinel as a refined prompt at step {step}")]
    InvalidDecision { step: u32 },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Config(#[from] CoreError),
    #[error("batch has no prompts")]
    EmptyBatch,
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a short tuple of integers.
pub fn hash64(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &p| mix64(h ^ mix64(p)))
}

pub fn trajectory_seed(base_seed: u64, trajectory_index: u64) -> u64 {
    hash64(&[base_seed, trajectory_index])
}

const STREAM_GENERATE: u64 = 0;
const STREAM_REFINE: u64 = 1;

fn step_seed(traj_seed: u64, t: u32, stream: u64) -> u64 {
    hash64(&[traj_seed, t as u64, stream])
}

/// Runs one trajectory with index 0 under `cfg.seed`.
pub fn run_ipr(
    p0: &PromptText,
    backends: Backends<'_>,
    cfg: &LoopConfig,
    rcfg: &RewardConfig,
) -> Result<Trajectory, LoopError> {
    cfg.validate()?;
    run_trajectory(p0, backends, trajectory_seed(cfg.seed, 0), cfg.t_max, rcfg)
}

/// Runs one trajectory from an explicit trajectory seed. Per-step seeds are
/// derived from `(traj_seed, t, stream)`, so the result is a pure function of
/// the inputs when the backends are deterministic.
pub fn run_trajectory(
    p0: &PromptText,
    backends: Backends<'_>,
    traj_seed: u64,
    t_max: u32,
    rcfg: &RewardConfig,
) -> Result<Trajectory, LoopError> {
    let mut steps: Vec<TrajectoryStep> = Vec::with_capacity(t_max as usize + 1);

    let (image, reward) = generate_and_score(p0, p0, 0, traj_seed, backends, rcfg, &steps)?;
    steps.push(TrajectoryStep {
        t: 0,
        prompt: p0.clone(),
        image,
        reward,
        shaped_reward: None,
    });

    for t in 1..=t_max {
        let last = steps.last().expect("at least the initial step");
        let decision = backends
            .refiner
            .refine(p0, &last.image, step_seed(traj_seed, t, STREAM_REFINE))
            .map_err(|source| LoopError::Backend {
                step: t,
                stage: Stage::Refine,
                partial: steps.clone(),
                source,
            })?;
        match decision.action {
            Action::Keep => {
                let bonus = shaped_step_reward(last.reward, last.reward, &Action::Keep, rcfg)?;
                let final_image = last.image.clone();
                return Ok(Trajectory {
                    initial_prompt: p0.clone(),
                    steps,
                    termination: Termination::KeepAction {
                        at_step: t,
                        shaped_reward: bonus,
                    },
                    final_image,
                    seed: traj_seed,
                });
            }
            Action::Refine(ref prompt) => {
                if is_keep_sentinel(prompt.as_str()) {
                    return Err(LoopError::InvalidDecision { step: t });
                }
                if prompt.as_str() == last.prompt.as_str() {
                    debug!(step = t, "no-edit refinement, regenerating");
                }
                let r_prev = last.reward;
                let (image, reward) =
                    generate_and_score(p0, prompt, t, traj_seed, backends, rcfg, &steps)?;
                let shaped = shaped_step_reward(r_prev, reward, &decision.action, rcfg)?;
                steps.push(TrajectoryStep {
                    t,
                    prompt: prompt.clone(),
                    image,
                    reward,
                    shaped_reward: Some(shaped),
                });
            }
        }
    }

    let final_image = steps.last().expect("non-empty").image.clone();
    Ok(Trajectory {
        initial_prompt: p0.clone(),
        steps,
        termination: Termination::MaxIterations,
        final_image,
        seed: traj_seed,
    })
}

fn generate_and_score(
    p0: &PromptText,
    prompt: &PromptText,
    t: u32,
    traj_seed: u64,
    backends: Backends<'_>,
    rcfg: &RewardConfig,
    partial: &[TrajectoryStep],
) -> Result<(ImageRef, f64), LoopError> {
    let fail = |stage, source| LoopError::Backend {
        step: t,
        stage,
        partial: partial.to_vec(),
        source,
    };
    let image = backends
        .generator
        .generate(prompt, step_seed(traj_seed, t, STREAM_GENERATE))
        .map_err(|e| fail(Stage::Generate, e))?;
    let outcome = backends
        .scorer
        .score(p0, &image)
        .map_err(|e| fail(Stage::Score, e))?;
    Ok((image, compute_reward(&outcome, rcfg)))
}

#[derive(Debug)]
pub struct BatchCell {
    pub prompt_index: usize,
    pub repeat: u32,
    pub result: Result<Trajectory, LoopError>,
}

/// Batch output in `(prompt, repeat)` order.
#[derive(Debug)]
pub struct BatchReport {
    pub cells: Vec<BatchCell>,
}

impl BatchReport {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.cells.iter().filter_map(|c| c.result.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &BatchCell> {
        self.cells.iter().filter(|c| c.result.is_err())
    }

    pub fn failure_count(&self) -> usize {
        self.failures().count()
    }
}

/// Runs `cfg.repeats` trajectories per prompt on up to `concurrency` threads.
/// Trajectory `k = prompt_index * repeats + repeat` uses seed
/// `trajectory_seed(cfg.seed, k)`, so output does not depend on scheduling.
pub fn run_batch(
    prompts: &[PromptText],
    backends: Backends<'_>,
    cfg: &LoopConfig,
    rcfg: &RewardConfig,
    concurrency: usize,
) -> Result<BatchReport, LoopError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(LoopError::EmptyBatch);
    }
    let repeats = cfg.repeats as usize;
    let total = prompts.len() * repeats;
    let run_cell = |k: usize| {
        let prompt_index = k / repeats;
        let repeat = (k % repeats) as u32;
        let seed = trajectory_seed(cfg.seed, k as u64);
        BatchCell {
            prompt_index,
            repeat,
            result: run_trajectory(&prompts[prompt_index], backends, seed, cfg.t_max, rcfg),
        }
    };
    let cells = if concurrency <= 1 {
        (0..total).map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency)
            .build()
            .map_err(|e| CoreError::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..total).into_par_iter().map(run_cell).collect())
    };
    Ok(BatchReport { cells })
}
