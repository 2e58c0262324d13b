//! Segment-level tree sampling.
//!
//! All trees in a batch advance in lock-step sweeps. Each sweep sends one
//! request per branch to the backend, attaches the returned segments, then
//! forks the surviving frontier of every tree. A tree with no active path
//! and fewer than `width` outputs regrows from a segment boundary of an
//! already answered path (fallback).

pub mod branching;

pub use branching::{apportion_with_floor, assign_branches_even, assign_branches_prob, EmptyActiveSet, ProbDirection};

use crate::policy::LogitsTablePolicy;
use crate::rng;
use crate::task::QuerySpec;
use crate::tokens::{extract_answer, has_repetition, Segment, StopReason, TokenId, TokenSeq, Trajectory};
use crate::tree::{FallbackEvent, NodeId, NodeStatus, RolloutTree, TreeError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitDivergence {
    Fixed(usize),
    /// Uniform in `lo..=hi`, drawn once per tree.
    Random {
        lo: usize,
        hi: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionConfig {
    pub min_len: usize,
    pub min_reps: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            min_len: 8,
            min_reps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub width: usize,
    pub depth: usize,
    pub segment_budget: usize,
    pub branch_base: usize,
    pub init_divergence: InitDivergence,
    pub fallback_segment_budget: usize,
    pub max_fallback_rounds: usize,
    pub repetition: RepetitionConfig,
    pub prompt_budget: usize,
    /// Evaluate a sweep's requests on the rayon pool.
    pub parallel: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 7,
            segment_budget: 16,
            branch_base: 2,
            init_divergence: InitDivergence::Fixed(2),
            fallback_segment_budget: 16,
            max_fallback_rounds: 8,
            repetition: RepetitionConfig::default(),
            prompt_budget: crate::task::DEFAULT_PROMPT_BUDGET,
            parallel: false,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::ConfigInvalid(m));
        if self.width == 0 || self.depth == 0 || self.segment_budget == 0 {
            return bad("width, depth and segment budget must be >= 1".into());
        }
        if self.branch_base == 0 {
            return bad("branch base must be >= 1".into());
        }
        if self.fallback_segment_budget == 0 {
            return bad("fallback segment budget must be >= 1".into());
        }
        if self.repetition.min_len == 0 || self.repetition.min_reps < 2 {
            return bad("repetition detector needs min_len >= 1 and min_reps >= 2".into());
        }
        match self.init_divergence {
            InitDivergence::Fixed(0) => bad("initial divergence must be >= 1".into()),
            InitDivergence::Random { lo, hi } if !(2 <= lo && lo <= hi && hi <= 8) => bad(format!(
                "random init divergence needs 2 <= lo <= hi <= 8, got {lo}..={hi}"
            )),
            _ => Ok(()),
        }
    }

    pub fn max_response_tokens(&self) -> usize {
        self.depth * self.segment_budget
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum BranchPolicy {
    /// Every active path forks `branch_base` times; no budget transfer.
    FixedNary,
    /// The depth budget `min(N^depth, w)` is spread evenly over survivors.
    #[default]
    TransferEven,
    /// The depth budget is spread by a softmax over last-segment mean logprobs.
    ProbSoftmax {
        direction: ProbDirection,
        temperature: f64,
        schedule: Option<TemperatureSchedule>,
    },
}

impl BranchPolicy {
    pub fn prob(direction: ProbDirection) -> Self {
        BranchPolicy::ProbSoftmax {
            direction,
            temperature: 2.0,
            schedule: None,
        }
    }

    pub fn prob_scheduled(direction: ProbDirection, start: f64, end: f64) -> Self {
        BranchPolicy::ProbSoftmax {
            direction,
            temperature: start,
            schedule: Some(TemperatureSchedule { start, end }),
        }
    }

    /// Resolves a temperature schedule at training progress in `[0, 1]`.
    pub fn at_progress(self, progress: f64) -> Self {
        match self {
            BranchPolicy::ProbSoftmax {
                direction,
                schedule: Some(s),
                ..
            } => {
                let p = progress.clamp(0.0, 1.0);
                BranchPolicy::ProbSoftmax {
                    direction,
                    temperature: s.start + (s.end - s.start) * p,
                    schedule: None,
                }
            }
            other => other,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if let BranchPolicy::ProbSoftmax {
            temperature, schedule, ..
        } = self
        {
            let ok = |t: f64| t > 0.0 && t.is_finite();
            if !ok(*temperature) || schedule.is_some_and(|s| !ok(s.start) || !ok(s.end)) {
                return Err(EngineError::ConfigInvalid("softmax temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message}")]
pub struct BackendError {
    pub message: String,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid tree configuration: {0}")]
    ConfigInvalid(String),
    #[error("query {query} has a {len}-token prompt, budget is {budget}")]
    PromptTooLong { query: u64, len: usize, budget: usize },
    #[error("backend failed on tree {tree}: {source}")]
    Backend { tree: u64, source: BackendError },
    #[error("fallback not eligible: {0}")]
    FallbackNotEligible(&'static str),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    EmptyActiveSet(#[from] EmptyActiveSet),
}

/// Anything that can continue a token prefix by one segment.
pub trait SamplingBackend: Sync {
    fn sample_segment(&self, prefix: &[TokenId], budget: usize, rng: &mut ChaCha8Rng) -> Result<Segment, BackendError>;
}

impl SamplingBackend for LogitsTablePolicy {
    fn sample_segment(&self, prefix: &[TokenId], budget: usize, rng: &mut ChaCha8Rng) -> Result<Segment, BackendError> {
        Ok(LogitsTablePolicy::sample_segment(self, prefix, budget, rng))
    }
}

impl<B: SamplingBackend + Send> SamplingBackend for std::sync::Arc<B> {
    fn sample_segment(&self, prefix: &[TokenId], budget: usize, rng: &mut ChaCha8Rng) -> Result<Segment, BackendError> {
        (**self).sample_segment(prefix, budget, rng)
    }
}

/// One branch to grow: a new child of `node`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    /// Index of the tree within the rollout batch.
    pub tree: usize,
    pub node: NodeId,
    /// `path_tokens(node)`.
    pub prompt: TokenSeq,
    /// Remaining token budget for this branch's next segment.
    pub budget: usize,
    /// Seed of this branch's private sampling stream.
    pub stream: u64,
}

/// Runs one inference sweep; output is order-aligned with `requests`.
pub fn step_inference<B: SamplingBackend + ?Sized>(
    requests: &[InferenceRequest],
    policy: &B,
    segment_budget: usize,
    parallel: bool,
) -> Result<Vec<Segment>, (usize, BackendError)> {
    let run = |req: &InferenceRequest| {
        let mut rng = rng::stream(&[req.stream]);
        let budget = req.budget.min(segment_budget).max(1);
        policy.sample_segment(&req.prompt, budget, &mut rng).map(|mut seg| {
            seg.tokens.truncate(budget);
            seg.logprobs.truncate(budget);
            seg
        })
    };
    let results: Vec<Result<Segment, BackendError>> = if parallel {
        requests.par_iter().map(run).collect()
    } else {
        requests.iter().map(run).collect()
    };
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| (requests[i].tree, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentClass {
    Continue,
    Finish,
    Failed,
}

/// Decides what happens to a path after `seg` lands at `child_depth`.
pub fn classify_segment(seg: &Segment, path_so_far: &[TokenId], child_depth: usize, cfg: &TreeConfig) -> SegmentClass {
    if has_repetition(&seg.tokens, cfg.repetition.min_len, cfg.repetition.min_reps) {
        return SegmentClass::Failed;
    }
    if seg.tokens.contains(&crate::tokens::Vocabulary::EOS) || child_depth >= cfg.depth {
        return SegmentClass::Finish;
    }
    let mut full = Vec::with_capacity(path_so_far.len() + seg.len());
    full.extend_from_slice(path_so_far);
    full.extend_from_slice(&seg.tokens);
    if extract_answer(&full).is_some() {
        SegmentClass::Finish
    } else {
        SegmentClass::Continue
    }
}

/// Total branches when forking into `depth`; depth 0 denotes the root fork.
pub fn branch_budget_total(depth: usize, init_divergence: usize, cfg: &TreeConfig) -> usize {
    if depth == 0 {
        return init_divergence;
    }
    let mut budget: usize = 1;
    for _ in 0..depth {
        budget = budget.saturating_mul(cfg.branch_base);
        if budget >= cfg.width {
            return cfg.width;
        }
    }
    budget.min(cfg.width)
}

struct TreeState {
    seed: u64,
    rng: ChaCha8Rng,
}

fn tree_seed(run_seed: u64, index: usize) -> u64 {
    rng::derive(&[run_seed, index as u64])
}

fn branch_requests(
    tree: &RolloutTree,
    tree_index: usize,
    seed: u64,
    node: NodeId,
    count: usize,
    segment_budget: usize,
    max_tokens: usize,
) -> Result<Vec<InferenceRequest>, TreeError> {
    let prompt = tree.path_tokens(node)?;
    let used = prompt.len() - tree.query.prompt_len();
    let budget = segment_budget.min(max_tokens.saturating_sub(used)).max(1);
    let existing = tree.node(node)?.children.len();
    Ok((0..count)
        .map(|b| InferenceRequest {
            tree: tree_index,
            node,
            prompt: prompt.clone(),
            budget,
            stream: rng::derive(&[seed, node.0 as u64, (existing + b) as u64]),
        })
        .collect())
}

/// Forks the active frontier of `tree` according to `branch`.
fn fork_frontier(
    tree: &RolloutTree,
    tree_index: usize,
    seed: u64,
    cfg: &TreeConfig,
    branch: &BranchPolicy,
) -> Result<Vec<InferenceRequest>, EngineError> {
    let active = tree.active_nodes();
    if active.is_empty() {
        return Ok(Vec::new());
    }
    let depth = tree.node(active[0])?.depth;
    debug_assert!(active.iter().all(|a| tree.node(*a).map(|n| n.depth) == Ok(depth)));
    let remaining = cfg.width.saturating_sub(tree.emitted_count());
    let total = match branch {
        BranchPolicy::FixedNary if depth > 0 => cfg.branch_base.saturating_mul(active.len()),
        _ => branch_budget_total(if depth == 0 { 0 } else { depth + 1 }, tree.meta.init_divergence, cfg),
    }
    .min(remaining);
    let counts = match branch {
        BranchPolicy::ProbSoftmax {
            direction, temperature, ..
        } => {
            let scored: Vec<(NodeId, f64)> = active
                .iter()
                .map(|id| Ok((*id, tree.node(*id)?.segment.mean_logprob())))
                .collect::<Result<_, TreeError>>()?;
            assign_branches_prob(&scored, total, *temperature, *direction)?
        }
        _ => assign_branches_even(&active, total)?,
    };
    let mut out = Vec::new();
    for (node, count) in counts {
        out.extend(branch_requests(
            tree,
            tree_index,
            seed,
            node,
            count,
            cfg.segment_budget,
            cfg.max_response_tokens(),
        )?);
    }
    Ok(out)
}

/// Regrows branches from a segment boundary of one answered path.
///
/// Candidates are stopped paths that carry a well-formed answer or end with
/// `EOS`. One candidate and one boundary depth in `0..leaf_depth` are drawn
/// uniformly, and `width - emitted` new branches are requested from the
/// ancestor at that depth. With no candidate the shortfall is recorded and
/// no request is returned.
pub fn do_fallback(
    tree: &mut RolloutTree,
    tree_index: usize,
    seed: u64,
    cfg: &TreeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InferenceRequest>, EngineError> {
    if !tree.active_nodes().is_empty() {
        return Err(EngineError::FallbackNotEligible("tree still has active paths"));
    }
    let emitted = tree.emitted_count();
    if emitted >= cfg.width {
        return Err(EngineError::FallbackNotEligible("width target already met"));
    }
    if tree.meta.fallback_rounds >= cfg.max_fallback_rounds {
        return Err(EngineError::FallbackNotEligible("fallback rounds exhausted"));
    }
    tree.meta.fallback_rounds += 1;
    let candidates: Vec<NodeId> = tree
        .nodes()
        .iter()
        .filter(|n| n.status.is_leaf() && (n.has_answer || n.segment.ends_with_eos()))
        .map(|n| n.id)
        .collect();
    let missing = cfg.width - emitted;
    if candidates.is_empty() {
        tree.meta.shortfall = missing;
        return Ok(Vec::new());
    }
    let candidate = candidates[rng.gen_range(0..candidates.len())];
    let leaf_depth = tree.node(candidate)?.depth;
    let anchor = tree.ancestor_at_depth(candidate, rng.gen_range(0..leaf_depth))?;
    let counts = assign_branches_even(&[anchor], missing)?;
    let mut out = Vec::new();
    for (node, count) in counts {
        out.extend(branch_requests(
            tree,
            tree_index,
            seed,
            node,
            count,
            cfg.fallback_segment_budget,
            cfg.max_response_tokens(),
        )?);
    }
    tree.meta.fallback_events.push(FallbackEvent {
        anchor,
        candidate,
        branches: out.len(),
        prefix_len: out.first().map_or(0, |r| r.prompt.len()),
    });
    Ok(out)
}

fn initial_requests(
    tree: &mut RolloutTree,
    tree_index: usize,
    state: &mut TreeState,
    cfg: &TreeConfig,
    branch: &BranchPolicy,
) -> Result<Vec<InferenceRequest>, EngineError> {
    tree.meta.init_divergence = match cfg.init_divergence {
        InitDivergence::Fixed(n) => n,
        InitDivergence::Random { lo, hi } => state.rng.gen_range(lo..=hi),
    };
    fork_frontier(tree, tree_index, state.seed, cfg, branch)
}

/// Grows one tree per query until every tree is frozen.
pub fn run_tree_rollout<B: SamplingBackend + ?Sized>(
    queries: &[QuerySpec],
    cfg: &TreeConfig,
    policy: &B,
    branch: &BranchPolicy,
    seed: u64,
) -> Result<Vec<RolloutTree>, EngineError> {
    cfg.validate()?;
    branch.validate()?;
    for q in queries {
        if q.prompt_len() > cfg.prompt_budget {
            return Err(EngineError::PromptTooLong {
                query: q.id,
                len: q.prompt_len(),
                budget: cfg.prompt_budget,
            });
        }
    }
    let mut trees: Vec<RolloutTree> = queries
        .iter()
        .map(|q| RolloutTree::new(q.clone(), cfg.width, cfg.depth, cfg.segment_budget))
        .collect();
    let mut states: Vec<TreeState> = (0..queries.len())
        .map(|i| {
            let seed = tree_seed(seed, i);
            TreeState {
                seed,
                rng: rng::stream(&[seed, u64::MAX]),
            }
        })
        .collect();

    let mut pending = Vec::new();
    for (i, (tree, state)) in trees.iter_mut().zip(states.iter_mut()).enumerate() {
        pending.extend(initial_requests(tree, i, state, cfg, branch)?);
    }

    let sweep_cap = cfg.depth * (1 + cfg.max_fallback_rounds);
    let mut sweeps = 0;
    while !pending.is_empty() {
        sweeps += 1;
        assert!(sweeps <= sweep_cap, "rollout exceeded {sweep_cap} sweeps");
        let mut per_tree = vec![0usize; trees.len()];
        for r in &pending {
            per_tree[r.tree] += 1;
        }
        for (tree, n) in trees.iter_mut().zip(&per_tree) {
            if *n > 0 {
                tree.meta.sweep_batches.push(*n);
            }
        }
        let segments = step_inference(
            &pending,
            policy,
            cfg.segment_budget.max(cfg.fallback_segment_budget),
            cfg.parallel,
        )
        .map_err(|(t, source)| EngineError::Backend {
            tree: trees[t].query.id,
            source,
        })?;
        for (req, mut seg) in pending.drain(..).zip(segments) {
            let tree = &mut trees[req.tree];
            let child_depth = tree.node(req.node)?.depth + 1;
            let status = match classify_segment(&seg, &req.prompt, child_depth, cfg) {
                SegmentClass::Continue => NodeStatus::Active,
                SegmentClass::Finish => NodeStatus::FinishedLeaf,
                SegmentClass::Failed => {
                    seg.stop = StopReason::RepetitionFail;
                    NodeStatus::FailedLeaf
                }
            };
            tree.add_child(req.node, seg, status)?;
        }
        for (i, (tree, state)) in trees.iter_mut().zip(states.iter_mut()).enumerate() {
            if !tree.active_nodes().is_empty() {
                pending.extend(fork_frontier(tree, i, state.seed, cfg, branch)?);
                continue;
            }
            let emitted = tree.emitted_count();
            if emitted >= cfg.width || tree.meta.shortfall > 0 {
                continue;
            }
            if tree.meta.fallback_rounds >= cfg.max_fallback_rounds {
                tree.meta.shortfall = cfg.width - emitted;
                continue;
            }
            pending.extend(do_fallback(tree, i, state.seed, cfg, &mut state.rng)?);
        }
    }
    Ok(trees)
}

/// Independent token-level sampling of `n` responses per query: the
/// sequential baseline. Responses stop on `EOS`, an answer, a repetition
/// failure, or after `depth * segment_budget` tokens.
pub fn run_sequential<B: SamplingBackend + ?Sized>(
    queries: &[QuerySpec],
    n: usize,
    cfg: &TreeConfig,
    policy: &B,
    seed: u64,
) -> Result<Vec<Vec<Trajectory>>, EngineError> {
    cfg.validate()?;
    let requests: Vec<(usize, usize)> = (0..queries.len()).flat_map(|q| (0..n).map(move |k| (q, k))).collect();
    let sample_one = |&(qi, k): &(usize, usize)| -> Result<Trajectory, EngineError> {
        let q = &queries[qi];
        let mut rng = rng::stream(&[seed, qi as u64, k as u64, 0x5E9]);
        let mut prompt = q.prompt_tokens.clone();
        let mut depth = 0;
        loop {
            depth += 1;
            let seg = policy
                .sample_segment(&prompt, cfg.segment_budget, &mut rng)
                .map_err(|source| EngineError::Backend { tree: q.id, source })?;
            let class = classify_segment(&seg, &prompt, depth, cfg);
            prompt.extend_from_slice(&seg.tokens);
            if class != SegmentClass::Continue {
                break;
            }
        }
        Ok(Trajectory {
            query_id: q.id,
            node_path: Vec::new(),
            tokens: prompt[q.prompt_len()..].to_vec(),
            reward: 0.0,
        })
    };
    let flat: Vec<Trajectory> = if cfg.parallel {
        requests.par_iter().map(sample_one).collect::<Result<_, _>>()?
    } else {
        requests.iter().map(sample_one).collect::<Result<_, _>>()?
    };
    let mut out: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(n); queries.len()];
    for (t, (qi, _)) in flat.into_iter().zip(requests) {
        out[qi].push(t);
    }
    Ok(out)
}
