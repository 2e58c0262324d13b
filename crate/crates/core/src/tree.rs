//! Arena-backed rollout tree.
//!
//! Node 0 is the query; every other node owns exactly one generated segment.
//! A root-to-leaf path is one response, and the set of leaves sharing an
//! ancestor at depth `j` forms that leaf's depth-`j` subgroup.

use crate::task::QuerySpec;
use crate::tokens::{extract_answer, Segment, TokenSeq, Trajectory};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeStatus {
    /// Frontier node waiting to be forked.
    Active,
    /// Already forked; may still receive children through fallback.
    Interior,
    FinishedLeaf,
    FailedLeaf,
}

impl NodeStatus {
    pub fn is_leaf(self) -> bool {
        matches!(self, NodeStatus::FinishedLeaf | NodeStatus::FailedLeaf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub segment: Segment,
    pub children: Vec<NodeId>,
    pub status: NodeStatus,
    /// Whether a terminated path carries a well-formed answer.
    pub has_answer: bool,
}

impl TreeNode {
    /// Leaves that count as output trajectories: every finished leaf, and
    /// failed leaves only when they carry an answer.
    pub fn is_emitted(&self) -> bool {
        match self.status {
            NodeStatus::FinishedLeaf => true,
            NodeStatus::FailedLeaf => self.has_answer,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FallbackEvent {
    /// Ancestor the new branches were grown from.
    pub anchor: NodeId,
    /// The finished leaf that was selected as candidate.
    pub candidate: NodeId,
    pub branches: usize,
    /// Prompt plus response tokens up to the anchor.
    pub prefix_len: usize,
}

/// Bookkeeping filled in by the rollout engine.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TreeMeta {
    pub init_divergence: usize,
    pub fallback_rounds: usize,
    pub fallback_events: Vec<FallbackEvent>,
    /// Requests issued for this tree in each inference sweep it took part in.
    pub sweep_batches: Vec<usize>,
    /// Missing trajectories when the width target could not be met.
    pub shortfall: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("cannot attach a child to leaf node {0}")]
    AttachToLeaf(NodeId),
    #[error("child of node {parent} would exceed depth limit {limit}")]
    DepthExceeded { parent: NodeId, limit: usize },
    #[error("{0} node(s) are still active")]
    ActiveNodesRemain(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTree {
    pub query: QuerySpec,
    nodes: Vec<TreeNode>,
    pub width_target: usize,
    pub depth_limit: usize,
    pub segment_budget: usize,
    pub meta: TreeMeta,
}

impl RolloutTree {
    pub fn new(query: QuerySpec, width_target: usize, depth_limit: usize, segment_budget: usize) -> Self {
        let root = TreeNode {
            id: NodeId::ROOT,
            parent: None,
            depth: 0,
            segment: Segment::empty(),
            children: Vec::new(),
            status: NodeStatus::Active,
            has_answer: false,
        };
        Self {
            query,
            nodes: vec![root],
            width_target,
            depth_limit,
            segment_budget,
            meta: TreeMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn add_child(&mut self, parent: NodeId, segment: Segment, status: NodeStatus) -> Result<NodeId, TreeError> {
        let p = self.node(parent)?;
        if p.status.is_leaf() {
            return Err(TreeError::AttachToLeaf(parent));
        }
        if p.depth + 1 > self.depth_limit {
            return Err(TreeError::DepthExceeded {
                parent,
                limit: self.depth_limit,
            });
        }
        let depth = p.depth + 1;
        let id = NodeId(self.nodes.len());
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            depth,
            segment,
            children: Vec::new(),
            status,
            has_answer: false,
        });
        self.nodes[parent.0].children.push(id);
        if self.nodes[parent.0].status == NodeStatus::Active {
            self.nodes[parent.0].status = NodeStatus::Interior;
        }
        if status.is_leaf() {
            let answered = extract_answer(&self.response_tokens(id)?).is_some();
            self.nodes[id.0].has_answer = answered;
        }
        Ok(id)
    }

    #[cfg(test)]
    pub(crate) fn set_status(&mut self, id: NodeId, status: NodeStatus) {
        self.nodes[id.0].status = status;
    }

    /// Node ids from the depth-1 ancestor down to `node` (root excluded).
    pub fn node_path(&self, node: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut cur = self.node(node)?;
        let mut path = Vec::with_capacity(cur.depth);
        while let Some(parent) = cur.parent {
            path.push(cur.id);
            cur = &self.nodes[parent.0];
        }
        path.reverse();
        Ok(path)
    }

    pub fn ancestor_at_depth(&self, node: NodeId, depth: usize) -> Result<NodeId, TreeError> {
        let mut cur = self.node(node)?;
        while cur.depth > depth {
            cur = &self.nodes[cur.parent.expect("non-root node has a parent").0];
        }
        Ok(cur.id)
    }

    /// Concatenated segments from the root to `node`, without the prompt.
    pub fn response_tokens(&self, node: NodeId) -> Result<TokenSeq, TreeError> {
        let path = self.node_path(node)?;
        Ok(path
            .iter()
            .flat_map(|id| self.nodes[id.0].segment.tokens.iter().copied())
            .collect())
    }

    /// Prompt followed by every segment on the root-to-`node` path.
    pub fn path_tokens(&self, node: NodeId) -> Result<TokenSeq, TreeError> {
        let mut out = self.query.prompt_tokens.clone();
        out.extend(self.response_tokens(node)?);
        Ok(out)
    }

    pub fn active_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.status == NodeStatus::Active)
            .map(|n| n.id)
            .collect()
    }

    pub fn emitted_leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.is_emitted()).map(|n| n.id).collect()
    }

    pub fn all_leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.status.is_leaf()).map(|n| n.id).collect()
    }

    pub fn emitted_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_emitted()).count()
    }

    /// Partition of the emitted leaves deeper than `j` by their depth-`j` ancestor.
    pub fn subgroups_at_depth(&self, j: usize) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut cells: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for leaf in self.nodes.iter().filter(|n| n.is_emitted() && n.depth > j) {
            let anchor = self
                .ancestor_at_depth(leaf.id, j)
                .expect("leaf ids come from the arena");
            cells.entry(anchor).or_default().push(leaf.id);
        }
        cells
    }

    pub fn leaf_trajectories(&self) -> Result<Vec<Trajectory>, TreeError> {
        let active = self.nodes.iter().filter(|n| n.status == NodeStatus::Active).count();
        if active > 0 {
            return Err(TreeError::ActiveNodesRemain(active));
        }
        self.emitted_leaves()
            .into_iter()
            .map(|leaf| {
                Ok(Trajectory {
                    query_id: self.query.id,
                    node_path: self.node_path(leaf)?,
                    tokens: self.response_tokens(leaf)?,
                    reward: 0.0,
                })
            })
            .collect()
    }

    /// Writes the tree as line-delimited JSON: one header record, then one
    /// record per node in arena order.
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            tree: u64,
            prompt: &'a [crate::tokens::TokenId],
            gold: u64,
            width: usize,
            depth_limit: usize,
            segment_budget: usize,
            nodes: usize,
            emitted: usize,
            init_divergence: usize,
            fallback_rounds: usize,
            shortfall: usize,
        }
        #[derive(Serialize)]
        struct Record<'a> {
            tree: u64,
            id: NodeId,
            parent: Option<NodeId>,
            depth: usize,
            status: NodeStatus,
            tokens: &'a [crate::tokens::TokenId],
            logprob_sum: f64,
        }
        let header = Header {
            tree: self.query.id,
            prompt: &self.query.prompt_tokens,
            gold: self.query.gold_answer,
            width: self.width_target,
            depth_limit: self.depth_limit,
            segment_budget: self.segment_budget,
            nodes: self.nodes.len(),
            emitted: self.emitted_count(),
            init_divergence: self.meta.init_divergence,
            fallback_rounds: self.meta.fallback_rounds,
            shortfall: self.meta.shortfall,
        };
        writeln!(out, "{}", serde_json::to_string(&header).map_err(io::Error::other)?)?;
        for n in &self.nodes {
            let rec = Record {
                tree: self.query.id,
                id: n.id,
                parent: n.parent,
                depth: n.depth,
                status: n.status,
                tokens: &n.segment.tokens,
                logprob_sum: n.segment.logprob_sum(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).map_err(io::Error::other)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::tokens::TokenId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_child_gets_id_one() {
        let mut t = RolloutTree::new(query(), 4, 3, 4);
        let id = t.add_child(NodeId::ROOT, seg(&[16]), NodeStatus::Active).unwrap();
        assert_eq!(id, NodeId(1));
        assert_eq!(t.node(id).unwrap().depth, 1);
    }

    #[test]
    fn sequential_attaches_to_root() {
        let mut t = RolloutTree::new(query(), 4, 3, 4);
        let a = t.add_child(NodeId::ROOT, seg(&[16]), NodeStatus::Active).unwrap();
        let b = t.add_child(NodeId::ROOT, seg(&[17]), NodeStatus::Active).unwrap();
        assert_eq!((a, b), (NodeId(1), NodeId(2)));
        assert_eq!(t.root().children, vec![NodeId(1), NodeId(2)]);
        assert_eq!(t.root().status, NodeStatus::Interior);
    }

    #[test]
    fn attach_to_leaf_is_rejected() {
        let mut t = RolloutTree::new(query(), 4, 3, 4);
        let leaf = t.add_child(NodeId::ROOT, eos_seg(), NodeStatus::FinishedLeaf).unwrap();
        assert_eq!(
            t.add_child(leaf, seg(&[16]), NodeStatus::Active),
            Err(TreeError::AttachToLeaf(leaf))
        );
    }

    #[test]
    fn depth_limit_is_enforced() {
        let mut t = RolloutTree::new(query(), 4, 1, 4);
        let a = t.add_child(NodeId::ROOT, seg(&[16]), NodeStatus::Active).unwrap();
        assert!(matches!(
            t.add_child(a, seg(&[16]), NodeStatus::Active),
            Err(TreeError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn path_tokens_concatenate_segments() {
        let mut t = RolloutTree::new(query(), 4, 3, 4);
        assert_eq!(t.path_tokens(NodeId::ROOT).unwrap(), t.query.prompt_tokens);
        let a = t.add_child(NodeId::ROOT, seg(&[16, 17]), NodeStatus::Active).unwrap();
        let b = t.add_child(a, seg(&[18]), NodeStatus::Active).unwrap();
        let mut expected = t.query.prompt_tokens.clone();
        expected.extend([TokenId(16), TokenId(17), TokenId(18)]);
        assert_eq!(t.path_tokens(b).unwrap(), expected);
        assert_eq!(t.path_tokens(NodeId(9)), Err(TreeError::UnknownNode(NodeId(9))));
    }

    #[test]
    fn siblings_share_prefix_through_parent() {
        let t = balanced_binary();
        let (x, y) = (t.path_tokens(NodeId(3)).unwrap(), t.path_tokens(NodeId(4)).unwrap());
        let through = t.path_tokens(NodeId(1)).unwrap();
        assert_eq!(&x[..through.len()], &through[..]);
        assert_eq!(&y[..through.len()], &through[..]);
    }

    #[test]
    fn subgroups_of_balanced_tree() {
        let t = balanced_binary();
        let root = t.subgroups_at_depth(0);
        assert_eq!(root.len(), 1);
        assert_eq!(root[&NodeId::ROOT].len(), 4);
        let d1 = t.subgroups_at_depth(1);
        assert_eq!(d1.len(), 2);
        assert_eq!(d1[&NodeId(1)], vec![NodeId(3), NodeId(4)]);
        assert_eq!(d1[&NodeId(2)], vec![NodeId(5), NodeId(6)]);
        assert!(t.subgroups_at_depth(2).is_empty());
    }

    #[test]
    fn chain_tree_has_single_cell() {
        let mut t = RolloutTree::new(query(), 1, 4, 4);
        let mut cur = NodeId::ROOT;
        for _ in 0..3 {
            cur = t.add_child(cur, seg(&[16]), NodeStatus::Active).unwrap();
        }
        let leaf = t.add_child(cur, eos_seg(), NodeStatus::FinishedLeaf).unwrap();
        for j in 0..4 {
            let cells = t.subgroups_at_depth(j);
            assert_eq!(cells.len(), 1);
            assert_eq!(cells.values().next().unwrap(), &vec![leaf]);
        }
    }

    #[test]
    fn leaf_trajectories_in_arena_order() {
        let mut t = RolloutTree::new(query(), 3, 3, 4);
        for _ in 0..3 {
            t.add_child(NodeId::ROOT, eos_seg(), NodeStatus::FinishedLeaf).unwrap();
        }
        let trajs = t.leaf_trajectories().unwrap();
        assert_eq!(trajs.len(), 3);
        let ids: Vec<_> = trajs.iter().map(|tr| tr.node_path[0]).collect();
        assert_eq!(ids, vec![NodeId(1), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn leaf_trajectories_require_frozen_tree() {
        let mut t = RolloutTree::new(query(), 3, 3, 4);
        t.add_child(NodeId::ROOT, seg(&[16]), NodeStatus::Active).unwrap();
        assert_eq!(t.leaf_trajectories(), Err(TreeError::ActiveNodesRemain(1)));
    }

    #[test]
    fn trajectory_tokens_match_path_minus_prompt() {
        let t = balanced_binary();
        let plen = t.query.prompt_tokens.len();
        for tr in t.leaf_trajectories().unwrap() {
            let leaf = *tr.node_path.last().unwrap();
            assert_eq!(tr.tokens, t.path_tokens(leaf).unwrap()[plen..]);
            assert_eq!(tr.depth(), t.node(leaf).unwrap().depth);
        }
    }

    #[test]
    fn subgroups_nest_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let t = random_tree(&mut rng, 32);
            let leaves = t.emitted_leaves();
            for j in 0..t.depth_limit {
                let cells = t.subgroups_at_depth(j);
                let mut seen: Vec<NodeId> = cells.values().flatten().copied().collect();
                seen.sort();
                let mut deeper: Vec<NodeId> = leaves
                    .iter()
                    .copied()
                    .filter(|l| t.node(*l).unwrap().depth > j)
                    .collect();
                deeper.sort();
                assert_eq!(seen, deeper, "cells must partition leaves deeper than {j}");
            }
            for &leaf in &leaves {
                let depth = t.node(leaf).unwrap().depth;
                for j in 0..depth {
                    for k in j + 1..depth {
                        let cj = &t.subgroups_at_depth(j)[&t.ancestor_at_depth(leaf, j).unwrap()];
                        let ck = &t.subgroups_at_depth(k)[&t.ancestor_at_depth(leaf, k).unwrap()];
                        assert!(ck.iter().all(|x| cj.contains(x)));
                    }
                }
            }
        }
    }

    #[test]
    fn identical_insertions_give_identical_dumps() {
        let a = balanced_binary().to_jsonl();
        let b = balanced_binary().to_jsonl();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 7);
    }
}
