//! Token accounting for tree versus sequential sampling.
//!
//! A tree generates every segment once and prefills its prompt once per
//! initial branch; a sequential sampler regenerates every shared prefix for
//! every response. Wall time is simulated from per-token costs and a fixed
//! per-sweep overhead.

use crate::tree::RolloutTree;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ComputeLedger {
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub per_sweep_batch: Vec<usize>,
    pub trajectories: u64,
}

impl ComputeLedger {
    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens + self.decode_tokens
    }

    pub fn sweeps(&self) -> usize {
        self.per_sweep_batch.len()
    }

    /// Sums ledgers; sweep batches are merged position-wise since trees in
    /// one rollout advance in lock-step.
    pub fn merge(&mut self, other: &ComputeLedger) {
        self.prefill_tokens += other.prefill_tokens;
        self.decode_tokens += other.decode_tokens;
        self.trajectories += other.trajectories;
        if self.per_sweep_batch.len() < other.per_sweep_batch.len() {
            self.per_sweep_batch.resize(other.per_sweep_batch.len(), 0);
        }
        for (a, b) in self.per_sweep_batch.iter_mut().zip(&other.per_sweep_batch) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub prefill_cost: f64,
    pub decode_cost: f64,
    pub sweep_overhead: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self::decode_only()
    }
}

impl CostParams {
    pub fn decode_only() -> Self {
        Self {
            prefill_cost: 0.0,
            decode_cost: 1.0,
            sweep_overhead: 0.0,
        }
    }

    pub fn unit() -> Self {
        Self {
            prefill_cost: 1.0,
            decode_cost: 1.0,
            sweep_overhead: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.prefill_cost, self.decode_cost, self.sweep_overhead]
            .iter()
            .all(|c| *c >= 0.0 && c.is_finite())
    }

    /// Simulated wall time of a ledger.
    pub fn wall_time(&self, ledger: &ComputeLedger) -> f64 {
        ledger.sweeps() as f64 * self.sweep_overhead
            + ledger.prefill_tokens as f64 * self.prefill_cost
            + ledger.decode_tokens as f64 * self.decode_cost
    }
}

/// Ledger of a tree rollout: each segment decoded once.
pub fn ledger_tree(tree: &RolloutTree) -> ComputeLedger {
    let decode: usize = tree.nodes().iter().map(|n| n.segment.len()).sum();
    let initial = tree.root().children.len()
        - tree
            .meta
            .fallback_events
            .iter()
            .filter(|e| e.anchor == crate::tree::NodeId::ROOT)
            .map(|e| e.branches)
            .sum::<usize>();
    let prefill =
        tree.query.prompt_len() * initial + tree.meta.fallback_events.iter().map(|e| e.prefix_len).sum::<usize>();
    ComputeLedger {
        prefill_tokens: prefill as u64,
        decode_tokens: decode as u64,
        per_sweep_batch: tree.meta.sweep_batches.clone(),
        trajectories: tree.emitted_count() as u64,
    }
}

/// Ledger of generating every root-to-leaf path of `tree` independently.
///
/// Every generated path is counted, including failed ones that are not
/// output trajectories, since a sequential sampler pays for them too.
pub fn ledger_sequential(tree: &RolloutTree) -> ComputeLedger {
    let leaves = tree.all_leaves();
    let mut lengths = Vec::with_capacity(leaves.len());
    let mut depths = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let path = tree.node_path(*leaf).expect("leaf ids come from the arena");
        lengths.push(path.iter().map(|id| tree.nodes()[id.0].segment.len()).sum::<usize>());
        depths.push(path.len());
    }
    let max_depth = depths.iter().copied().max().unwrap_or(0);
    let per_sweep_batch = (1..=max_depth)
        .map(|k| depths.iter().filter(|d| **d >= k).count())
        .collect();
    ComputeLedger {
        prefill_tokens: (tree.query.prompt_len() * leaves.len()) as u64,
        decode_tokens: lengths.iter().sum::<usize>() as u64,
        per_sweep_batch,
        trajectories: tree.emitted_count() as u64,
    }
}

/// `1 - cost(tree) / cost(sequential)`; 0 when the sequential cost is 0.
pub fn savings(tree: &ComputeLedger, seq: &ComputeLedger, params: &CostParams) -> f64 {
    let denom = params.wall_time(seq);
    if denom <= 0.0 {
        return 0.0;
    }
    1.0 - params.wall_time(tree) / denom
}

/// `(tokens per unit time, trajectories per unit time)` under `params`.
pub fn throughput_analogs(ledger: &ComputeLedger, params: &CostParams) -> (f64, f64) {
    let wall = params.wall_time(ledger);
    if wall <= 0.0 {
        return (0.0, 0.0);
    }
    (ledger.total_tokens() as f64 / wall, ledger.trajectories as f64 / wall)
}

/// Closed-form savings of a full `N`-ary tree of depth `d` capped at width `w`
/// with equal-length segments, decode cost only.
pub fn full_tree_savings(branch: usize, depth: usize, width: usize) -> f64 {
    let mut level = 1usize;
    let mut nodes = 0usize;
    for _ in 0..depth {
        level = level.saturating_mul(branch).min(width);
        nodes += level;
    }
    1.0 - nodes as f64 / (width * depth) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub config: String,
    pub depth: usize,
    pub segment: usize,
    pub decode_tree: u64,
    pub decode_seq: u64,
    pub savings: f64,
    pub tokenps_analog: f64,
    pub trajps_analog: f64,
}

pub const SWEEP_HEADER: &str = "config,depth,segment,decode_tree,decode_seq,savings,tokenps_analog,trajps_analog";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.config, r.depth, r.segment, r.decode_tree, r.decode_seq, r.savings, r.tokenps_analog, r.trajps_analog
        )?;
    }
    Ok(())
}

/// Aggregates a batch of trees into one comparison row.
pub fn sweep_row(config: &str, depth: usize, segment: usize, trees: &[RolloutTree], params: &CostParams) -> SweepRow {
    let (mut t, mut s) = (ComputeLedger::default(), ComputeLedger::default());
    for tree in trees {
        t.merge(&ledger_tree(tree));
        s.merge(&ledger_sequential(tree));
    }
    let (tokenps, trajps) = throughput_analogs(&t, params);
    SweepRow {
        config: config.to_string(),
        depth,
        segment,
        decode_tree: t.decode_tokens,
        decode_seq: s.decode_tokens,
        savings: savings(&t, &s, params),
        tokenps_analog: tokenps,
        trajps_analog: trajps,
    }
}
