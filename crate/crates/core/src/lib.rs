//! Iterative prompt refinement for safe text-to-image generation.
//!
//! The engine alternates image generation with a refiner that either keeps
//! the latest image or rewrites the prompt. Around that loop sit the reward
//! and shaping functions, a finite synthetic world in which every expectation
//! can be computed exactly, a tabular toy policy with SFT and group-relative
//! training of the single-generation surrogate, and the evaluation metrics.

pub mod decision;
pub mod engine;
pub mod error;
pub mod evalharness;
pub mod reward;
pub mod synthworld;
pub mod train;
pub mod trajectory;
pub mod types;

pub use decision::parse_decision;
pub use engine::{run_batch, run_ipr, Backends, Generator, LoopError, Refiner, Scorer};
pub use error::{BackendError, CoreError};
pub use reward::{RewardConfig, ScorerOutcome};
pub use trajectory::{Termination, Trajectory, TrajectoryStep};
pub use types::{
    Action, ContentHash, ImageRef, LoopConfig, PromptOrigin, PromptText, RefinementDecision,
    KEEP_SENTINEL,
};
