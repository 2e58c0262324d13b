//! Training loop, evaluation and the sweep drivers built on top of them.

mod eval;
mod sweeps;
mod train;

pub use eval::{evaluate, majority_vote, EvalMode, EvalResult};
pub use sweeps::{
    bench_depth_segment, branching_modes, depth_segment_sweep, nominal_compute, scaling_sweep, toy_depth_segment_pairs,
    write_scaling_csv, ScalingRow, SweepSeries, SCALING_HEADER,
};
pub use train::{
    eval_tasks, initial_policy, train, train_with_observer, visited_entropy, IterationView, MetricsRow, RewardFn,
    RunManifest, TrainOutput, TruncatedBatch, METRICS_HEADER,
};

use crate::advantage::EstimatorOptions;
use crate::costmodel::CostParams;
use crate::engine::{BranchPolicy, TreeConfig};
use crate::objective::ClipConfig;
use crate::policy::{DEFAULT_CONTEXT_ORDER, DEFAULT_SAMPLING_TEMPERATURE};
use crate::Error;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a training run needs. Serialized as JSON for config files and
/// run manifests; every field has a default so partial files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tree: TreeConfig,
    pub branch: BranchPolicy,
    pub estimator: EstimatorOptions,
    pub clip: ClipConfig,
    pub batch_queries: usize,
    pub oversample_factor: usize,
    pub max_resample_rounds: usize,
    /// Gradient steps taken on each sampled batch.
    pub update_epochs: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    pub eval_rollouts: usize,
    pub eval_vote_samples: usize,
    pub eval_mode: EvalMode,
    /// Operand count of generated tasks.
    pub difficulty: usize,
    pub context_order: usize,
    pub sampling_temperature: f64,
    pub cost: CostParams,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            branch: BranchPolicy::default(),
            estimator: EstimatorOptions::default(),
            clip: ClipConfig {
                learning_rate: TOY_LEARNING_RATE,
                ..ClipConfig::default()
            },
            batch_queries: 64,
            oversample_factor: 3,
            max_resample_rounds: 2,
            update_epochs: 1,
            iterations: 300,
            eval_interval: 1,
            eval_rollouts: 4,
            eval_vote_samples: 1,
            eval_mode: EvalMode::Sequential,
            difficulty: 2,
            context_order: DEFAULT_CONTEXT_ORDER,
            sampling_temperature: DEFAULT_SAMPLING_TEMPERATURE,
            cost: CostParams::default(),
            seed: 0,
        }
    }
}

/// Step size of the toy preset. The loss is normalized by the token count of
/// the whole batch (about 10^4 tokens) and most table rows are visited once,
/// so plain gradient descent needs a step of the same order.
pub const TOY_LEARNING_RATE: f64 = 1e4;

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.tree.validate()?;
        self.branch.validate()?;
        self.clip.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.oversample_factor == 0 {
            return bad("oversample_factor must be >= 1");
        }
        if self.batch_queries == 0 {
            return bad("batch_queries must be >= 1");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be >= 1");
        }
        if self.eval_interval == 0 || self.eval_rollouts == 0 || self.eval_vote_samples == 0 {
            return bad("eval_interval, eval_rollouts and eval_vote_samples must be >= 1");
        }
        if self.difficulty == 0 || 2 * self.difficulty > self.tree.prompt_budget {
            return bad("difficulty must be >= 1 and its prompt must fit the prompt budget");
        }
        if self.context_order < 2 * self.difficulty + 1 {
            return bad("context_order must cover the whole prompt plus ANS_OPEN (2*difficulty + 1)");
        }
        if !(self.estimator.eps > 0.0) {
            return bad("estimator eps must be > 0");
        }
        if !self.cost.is_valid() {
            return bad("cost parameters must be finite and non-negative");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
