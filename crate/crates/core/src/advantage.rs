//! Advantage estimators over rewarded rollout trees.
//!
//! For a leaf `i` and each ancestor depth `j` on its path, the per-depth term
//! is `R_i - mean(R over the leaves sharing i's depth-j ancestor)`. The tree
//! estimators aggregate those terms and divide by their spread; the plain
//! group-relative estimator only uses the root group.

use crate::task::reward_tokens;
use crate::tree::{NodeId, RolloutTree, TreeError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorVariant {
    Grpo,
    TreeMean,
    TreeSizeWeighted,
    TreeSizeWeightedReject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub variant: EstimatorVariant,
    pub include_root: bool,
    /// Floor applied to every standard deviation used as a divisor.
    pub eps: f64,
    pub global_norm: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            variant: EstimatorVariant::TreeMean,
            include_root: true,
            eps: 1e-6,
            global_norm: true,
        }
    }
}

impl EstimatorOptions {
    pub fn with_variant(variant: EstimatorVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("group-relative advantage needs at least two rewards, got {0}")]
    TooFewRewards(usize),
    #[error("all rewards are equal (std {0:e} below floor)")]
    DegenerateGroup(f64),
    #[error("query {0} has zero reward variance and should have been filtered out")]
    UnfilteredDegenerateQuery(u64),
    #[error("leaf {leaf} at depth {leaf_depth} has no subgroup at depth {j}")]
    DepthOutOfRange { leaf: NodeId, leaf_depth: usize, j: usize },
    #[error("node {0} is not a rewarded leaf of this group")]
    NotALeaf(NodeId),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// A frozen tree together with one reward per emitted leaf.
#[derive(Debug, Clone)]
pub struct RewardedGroup {
    pub tree: RolloutTree,
    /// Emitted leaves in arena order.
    pub leaves: Vec<NodeId>,
    pub rewards: Vec<f64>,
}

impl RewardedGroup {
    /// Scores every emitted leaf against the query's gold answer.
    pub fn score(tree: RolloutTree) -> Result<Self, TreeError> {
        let leaves = tree.emitted_leaves();
        let rewards = leaves
            .iter()
            .map(|l| Ok(reward_tokens(&tree.response_tokens(*l)?, tree.query.gold_answer)))
            .collect::<Result<Vec<_>, TreeError>>()?;
        Ok(Self { tree, leaves, rewards })
    }

    pub fn with_rewards(tree: RolloutTree, rewards: Vec<f64>) -> Self {
        let leaves = tree.emitted_leaves();
        assert_eq!(leaves.len(), rewards.len(), "one reward per emitted leaf");
        Self { tree, leaves, rewards }
    }

    pub fn size(&self) -> usize {
        self.leaves.len()
    }

    pub fn correct(&self) -> usize {
        self.rewards.iter().filter(|r| **r > 0.5).count()
    }

    fn reward_of(&self, leaf: NodeId) -> Option<f64> {
        self.leaves.iter().position(|l| *l == leaf).map(|i| self.rewards[i])
    }
}

/// One `(leaf, depth j)` term of the decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthTerm {
    pub j: usize,
    pub anchor: NodeId,
    pub subgroup_size: usize,
    pub reward_std: f64,
    /// `R_i - mean(subgroup rewards)`.
    pub advantage: f64,
    /// False when the subgroup-rejection variant dropped this term.
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryAdvantage {
    pub leaf: NodeId,
    pub depth: usize,
    pub reward: f64,
    pub terms: Vec<DepthTerm>,
    pub advantage: f64,
    /// Every term was rejected, or no depth was eligible; advantage forced to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageReport {
    pub query_id: u64,
    pub variant: EstimatorVariant,
    pub include_root: bool,
    pub entries: Vec<TrajectoryAdvantage>,
}

impl AdvantageReport {
    pub fn advantages(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.advantage).collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `(R_i - mean) / max(std, eps)` with population std.
pub fn grpo_advantage(rewards: &[f64], eps: f64) -> Result<Vec<f64>, AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::TooFewRewards(rewards.len()));
    }
    let (m, s) = (mean(rewards), std_dev(rewards).max(eps));
    Ok(rewards.iter().map(|r| (r - m) / s).collect())
}

/// Like [`grpo_advantage`] but refuses zero-variance groups.
pub fn grpo_advantage_strict(rewards: &[f64], eps: f64) -> Result<Vec<f64>, AdvantageError> {
    let s = std_dev(rewards);
    if rewards.len() >= 2 && s < eps {
        return Err(AdvantageError::DegenerateGroup(s));
    }
    grpo_advantage(rewards, eps)
}

/// `R_leaf - mean(R over leaf's depth-j subgroup)`.
pub fn subgroup_advantage(group: &RewardedGroup, leaf: NodeId, j: usize) -> Result<f64, AdvantageError> {
    let r = group.reward_of(leaf).ok_or(AdvantageError::NotALeaf(leaf))?;
    let depth = group.tree.node(leaf)?.depth;
    if j >= depth {
        return Err(AdvantageError::DepthOutOfRange {
            leaf,
            leaf_depth: depth,
            j,
        });
    }
    let anchor = group.tree.ancestor_at_depth(leaf, j)?;
    let cell = &group.tree.subgroups_at_depth(j)[&anchor];
    let rewards: Vec<f64> = cell.iter().filter_map(|l| group.reward_of(*l)).collect();
    Ok(r - mean(&rewards))
}

struct CellStats {
    size: usize,
    mean: f64,
    std: f64,
}

fn decompose(
    group: &RewardedGroup,
    opts: &EstimatorOptions,
) -> Result<Vec<(NodeId, usize, f64, Vec<DepthTerm>)>, AdvantageError> {
    let reward: BTreeMap<NodeId, f64> = group
        .leaves
        .iter()
        .copied()
        .zip(group.rewards.iter().copied())
        .collect();
    let mut cells: Vec<BTreeMap<NodeId, CellStats>> = Vec::with_capacity(group.tree.depth_limit);
    for j in 0..group.tree.depth_limit {
        let stats = group
            .tree
            .subgroups_at_depth(j)
            .into_iter()
            .map(|(anchor, members)| {
                let rs: Vec<f64> = members.iter().map(|m| reward[m]).collect();
                (
                    anchor,
                    CellStats {
                        size: rs.len(),
                        mean: mean(&rs),
                        std: std_dev(&rs),
                    },
                )
            })
            .collect();
        cells.push(stats);
    }
    let first = usize::from(!opts.include_root);
    group
        .leaves
        .iter()
        .map(|&leaf| {
            let depth = group.tree.node(leaf)?.depth;
            let r = reward[&leaf];
            let terms = (first..depth)
                .map(|j| {
                    let anchor = group.tree.ancestor_at_depth(leaf, j)?;
                    let c = &cells[j][&anchor];
                    Ok(DepthTerm {
                        j,
                        anchor,
                        subgroup_size: c.size,
                        reward_std: c.std,
                        advantage: r - c.mean,
                        retained: true,
                    })
                })
                .collect::<Result<Vec<_>, AdvantageError>>()?;
            Ok((leaf, depth, r, terms))
        })
        .collect()
}

/// Aggregates per-depth terms into one advantage according to `variant`.
fn aggregate(terms: &mut [DepthTerm], variant: EstimatorVariant, eps: f64) -> (f64, bool) {
    if variant == EstimatorVariant::TreeSizeWeightedReject {
        for t in terms.iter_mut() {
            t.retained = t.reward_std != 0.0;
        }
    }
    let kept: Vec<&DepthTerm> = terms.iter().filter(|t| t.retained).collect();
    if kept.is_empty() {
        return (0.0, true);
    }
    let values: Vec<f64> = kept.iter().map(|t| t.advantage).collect();
    let spread = std_dev(&values).max(eps);
    let value = match variant {
        EstimatorVariant::TreeMean | EstimatorVariant::Grpo => {
            values.iter().sum::<f64>() / (kept.len() as f64 * spread)
        }
        EstimatorVariant::TreeSizeWeighted | EstimatorVariant::TreeSizeWeightedReject => {
            let weighted: f64 = kept.iter().map(|t| t.subgroup_size as f64 * t.advantage).sum();
            let weight: f64 = kept.iter().map(|t| t.subgroup_size as f64).sum();
            weighted / (spread * weight)
        }
    };
    (value, false)
}

fn tree_report(group: &RewardedGroup, opts: &EstimatorOptions) -> Result<AdvantageReport, AdvantageError> {
    if std_dev(&group.rewards) < opts.eps {
        return Err(AdvantageError::UnfilteredDegenerateQuery(group.tree.query.id));
    }
    let entries = decompose(group, opts)?
        .into_iter()
        .map(|(leaf, depth, reward, mut terms)| {
            let (advantage, degenerate) = aggregate(&mut terms, opts.variant, opts.eps);
            TrajectoryAdvantage {
                leaf,
                depth,
                reward,
                terms,
                advantage,
                degenerate,
            }
        })
        .collect();
    Ok(AdvantageReport {
        query_id: group.tree.query.id,
        variant: opts.variant,
        include_root: opts.include_root,
        entries,
    })
}

pub fn treepo_advantage(group: &RewardedGroup, opts: &EstimatorOptions) -> Result<AdvantageReport, AdvantageError> {
    tree_report(
        group,
        &EstimatorOptions {
            variant: EstimatorVariant::TreeMean,
            ..*opts
        },
    )
}

pub fn sgw_advantage(group: &RewardedGroup, opts: &EstimatorOptions) -> Result<AdvantageReport, AdvantageError> {
    tree_report(
        group,
        &EstimatorOptions {
            variant: EstimatorVariant::TreeSizeWeighted,
            ..*opts
        },
    )
}

pub fn sgw_reject_advantage(group: &RewardedGroup, opts: &EstimatorOptions) -> Result<AdvantageReport, AdvantageError> {
    tree_report(
        group,
        &EstimatorOptions {
            variant: EstimatorVariant::TreeSizeWeightedReject,
            ..*opts
        },
    )
}

/// Dispatches on `opts.variant`.
pub fn estimate(group: &RewardedGroup, opts: &EstimatorOptions) -> Result<AdvantageReport, AdvantageError> {
    match opts.variant {
        EstimatorVariant::Grpo => {
            let adv = grpo_advantage(&group.rewards, opts.eps)?;
            let root_only = EstimatorOptions {
                include_root: true,
                ..*opts
            };
            let entries = decompose(group, &root_only)?
                .into_iter()
                .zip(adv)
                .map(|((leaf, depth, reward, mut terms), advantage)| {
                    terms.truncate(1);
                    TrajectoryAdvantage {
                        leaf,
                        depth,
                        reward,
                        terms,
                        advantage,
                        degenerate: false,
                    }
                })
                .collect();
            Ok(AdvantageReport {
                query_id: group.tree.query.id,
                variant: EstimatorVariant::Grpo,
                include_root: true,
                entries,
            })
        }
        _ => tree_report(group, opts),
    }
}

/// Divides every advantage in the batch by the batch's population std.
///
/// No mean shift is applied, so signs are preserved.
pub fn global_normalize(batch: &mut [AdvantageReport], eps: f64) {
    let all: Vec<f64> = batch.iter().flat_map(|r| r.advantages()).collect();
    if all.len() < 2 {
        return;
    }
    let s = std_dev(&all).max(eps);
    for r in batch.iter_mut() {
        for e in r.entries.iter_mut() {
            e.advantage /= s;
        }
    }
}

/// Keeps only groups with at least one correct and one incorrect response.
pub fn dynamic_query_filter(groups: Vec<RewardedGroup>) -> Vec<RewardedGroup> {
    groups
        .into_iter()
        .filter(|g| {
            let c = g.correct();
            c > 0 && c < g.size()
        })
        .collect()
}

/// Tab-separated table with one row per `(leaf, depth term)`.
pub fn write_reports_tsv<W: Write>(reports: &[AdvantageReport], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "query_id\tleaf\tleaf_depth\tj\tsubgroup_size\tdepth_advantage\tretained\tfinal_advantage"
    )?;
    for r in reports {
        for e in &r.entries {
            if e.terms.is_empty() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t-\t-\t-\t-\t{}",
                    r.query_id, e.leaf, e.depth, e.advantage
                )?;
            }
            for t in &e.terms {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.query_id, e.leaf, e.depth, t.j, t.subgroup_size, t.advantage, t.retained, e.advantage
                )?;
            }
        }
    }
    Ok(())
}
