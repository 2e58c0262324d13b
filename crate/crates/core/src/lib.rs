//! Segment-level tree rollouts with tree-structured advantages, trained
//! end to end on a toy verifiable addition task.
//!
//! The policy is a context-indexed logits table. Rollouts grow one tree per
//! query in lock-step segment sweeps; rewards are checked exactly; per-leaf
//! advantages aggregate reward-minus-subgroup-mean terms over every ancestor
//! depth; the table is updated by gradient descent on a clipped token-level
//! surrogate. A cost model compares tree sampling to sequential sampling.

pub mod advantage;
pub mod costmodel;
pub mod engine;
pub mod harness;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod task;
pub mod tokens;
pub mod tree;

pub use advantage::{estimate, EstimatorOptions, EstimatorVariant, RewardedGroup};
pub use engine::{run_sequential, run_tree_rollout, BranchPolicy, InitDivergence, ProbDirection, TreeConfig};
pub use harness::RunConfig;
pub use policy::LogitsTablePolicy;
pub use task::QuerySpec;
pub use tokens::{TokenId, Vocabulary};
pub use tree::{NodeId, RolloutTree};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Tree(#[from] tree::TreeError),
    #[error(transparent)]
    Advantage(#[from] advantage::AdvantageError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Io(_) => 3,
            Error::Engine(engine::EngineError::ConfigInvalid(_)) => 2,
            Error::Engine(_) | Error::Tree(_) => 4,
            Error::Advantage(_) | Error::Objective(_) => 5,
            Error::Policy(_) => 6,
        }
    }
}
