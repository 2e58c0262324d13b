//! Branching-budget allocation over the active frontier.
//!
//! Every allocator hands each active node at least one branch and returns
//! counts summing to `max(total, |active|)`. Rounding uses largest remainders
//! with ties going to the lowest `NodeId`.

use crate::tree::NodeId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbDirection {
    /// Low-probability segments receive more branches.
    LowEncourage,
    /// High-probability segments receive more branches.
    HighEncourage,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("no active nodes to receive a branching budget of {0}")]
pub struct EmptyActiveSet(pub usize);

/// Even split; the remainder goes to the lowest ids. Output is aligned with
/// `active` after sorting it by id.
pub fn assign_branches_even(active: &[NodeId], total: usize) -> Result<Vec<(NodeId, usize)>, EmptyActiveSet> {
    if active.is_empty() {
        return if total == 0 {
            Ok(Vec::new())
        } else {
            Err(EmptyActiveSet(total))
        };
    }
    let mut ids = active.to_vec();
    ids.sort();
    let n = ids.len();
    let total = total.max(n);
    let (base, rem) = (total / n, total % n);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, base + usize::from(i < rem)))
        .collect())
}

/// Softmax-proportional split of `total` over `(node, mean segment logprob)`.
pub fn assign_branches_prob(
    active: &[(NodeId, f64)],
    total: usize,
    temperature: f64,
    direction: ProbDirection,
) -> Result<Vec<(NodeId, usize)>, EmptyActiveSet> {
    if active.is_empty() {
        return if total == 0 {
            Ok(Vec::new())
        } else {
            Err(EmptyActiveSet(total))
        };
    }
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let mut items = active.to_vec();
    items.sort_by_key(|(id, _)| *id);
    let sign = match direction {
        ProbDirection::HighEncourage => 1.0,
        ProbDirection::LowEncourage => -1.0,
    };
    let logits: Vec<f64> = items.iter().map(|(_, s)| sign * s / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let counts = apportion_with_floor(&weights, total);
    Ok(items.into_iter().map(|(id, _)| id).zip(counts).collect())
}

/// Largest-remainder apportionment of `total` seats proportional to
/// `weights`, with every entry receiving at least one seat.
///
/// Entries whose proportional quota falls below one are pinned to one seat
/// and removed, and the remaining seats are re-apportioned among the rest
/// until no new entry drops below the floor.
pub fn apportion_with_floor(weights: &[f64], total: usize) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    if total <= n {
        return vec![1; n];
    }
    let mut pinned = vec![false; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
        let seats = total - (n - free.len());
        let mass: f64 = free.iter().map(|&i| weights[i]).sum();
        let quota = |i: usize| {
            if mass > 0.0 {
                weights[i] / mass * seats as f64
            } else {
                seats as f64 / free.len() as f64
            }
        };
        let newly: Vec<usize> = free.iter().copied().filter(|&i| quota(i) < 1.0).collect();
        if !newly.is_empty() && newly.len() < free.len() {
            for i in newly {
                pinned[i] = true;
            }
            continue;
        }
        if !newly.is_empty() {
            // every free entry is below the floor: seats >= free.len() so this
            // only happens through rounding, fall back to an even split
            let mut out = vec![1; n];
            let (base, rem) = (seats / free.len(), seats % free.len());
            for (k, &i) in free.iter().enumerate() {
                out[i] = base + usize::from(k < rem);
            }
            return out;
        }
        let mut out = vec![1; n];
        let mut given = 0;
        let mut fracs = Vec::with_capacity(free.len());
        for &i in &free {
            let q = quota(i);
            let f = q.floor();
            out[i] = f as usize;
            given += out[i];
            fracs.push((i, q - f));
        }
        // stable sort keeps ascending index order among equal remainders
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for (i, _) in fracs.into_iter().take(seats - given) {
            out[i] += 1;
        }
        return out;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<NodeId> {
        (1..=n).map(NodeId).collect()
    }

    fn counts(v: &[(NodeId, usize)]) -> Vec<usize> {
        v.iter().map(|(_, c)| *c).collect()
    }

    #[test]
    fn even_examples() {
        assert_eq!(counts(&assign_branches_even(&ids(3), 8).unwrap()), vec![3, 3, 2]);
        assert_eq!(counts(&assign_branches_even(&ids(4), 4).unwrap()), vec![1, 1, 1, 1]);
        assert_eq!(counts(&assign_branches_even(&ids(5), 2).unwrap()), vec![1; 5]);
    }

    #[test]
    fn even_remainder_goes_to_lowest_id() {
        let out = assign_branches_even(&[NodeId(9), NodeId(4), NodeId(7)], 4).unwrap();
        assert_eq!(out, vec![(NodeId(4), 2), (NodeId(7), 1), (NodeId(9), 1)]);
    }

    #[test]
    fn empty_active_set() {
        assert_eq!(assign_branches_even(&[], 3), Err(EmptyActiveSet(3)));
        assert_eq!(assign_branches_even(&[], 0), Ok(vec![]));
        assert!(assign_branches_prob(&[], 2, 2.0, ProbDirection::LowEncourage).is_err());
    }

    #[test]
    fn low_encourage_hand_example() {
        // softmax(0.25, 1.0) = (0.3208, 0.6792) -> raw (1.283, 2.717)
        // floors (1, 2), one remaining seat to the larger remainder
        let out = assign_branches_prob(
            &[(NodeId(1), -0.5), (NodeId(2), -2.0)],
            4,
            2.0,
            ProbDirection::LowEncourage,
        )
        .unwrap();
        assert_eq!(counts(&out), vec![1, 3]);
        let high = assign_branches_prob(
            &[(NodeId(1), -0.5), (NodeId(2), -2.0)],
            4,
            2.0,
            ProbDirection::HighEncourage,
        )
        .unwrap();
        assert_eq!(counts(&high), vec![3, 1]);
    }

    #[test]
    fn prob_symmetry_and_floor() {
        for dir in [ProbDirection::LowEncourage, ProbDirection::HighEncourage] {
            let eq = [(NodeId(1), -1.0), (NodeId(2), -1.0), (NodeId(3), -1.0)];
            assert_eq!(counts(&assign_branches_prob(&eq, 6, 2.0, dir).unwrap()), vec![2, 2, 2]);
            assert_eq!(counts(&assign_branches_prob(&eq, 2, 2.0, dir).unwrap()), vec![1, 1, 1]);
        }
    }

    #[test]
    fn floor_pins_small_quotas() {
        // quotas (0.06, 0.06, 5.88) of 6 seats: two pinned at 1, rest gets 4
        assert_eq!(apportion_with_floor(&[0.01, 0.01, 0.98], 6), vec![1, 1, 4]);
    }

    proptest! {
        #[test]
        fn allocation_conserves_budget(scores in proptest::collection::vec(-8.0f64..0.0, 1..12),
                                       total in 0usize..40, t in 0.1f64..6.0, low in any::<bool>()) {
            let active: Vec<(NodeId, f64)> = scores.iter().enumerate().map(|(i, s)| (NodeId(i + 1), *s)).collect();
            let dir = if low { ProbDirection::LowEncourage } else { ProbDirection::HighEncourage };
            let out = assign_branches_prob(&active, total, t, dir).unwrap();
            prop_assert_eq!(out.iter().map(|(_, c)| c).sum::<usize>(), total.max(active.len()));
            prop_assert!(out.iter().all(|(_, c)| *c >= 1));

            let node_ids: Vec<NodeId> = active.iter().map(|(id, _)| *id).collect();
            let even = assign_branches_even(&node_ids, total).unwrap();
            prop_assert_eq!(even.iter().map(|(_, c)| c).sum::<usize>(), total.max(active.len()));
            let (lo, hi) = (even.iter().map(|(_, c)| *c).min().unwrap(), even.iter().map(|(_, c)| *c).max().unwrap());
            prop_assert!(hi - lo <= 1 && lo >= 1);
        }
    }
}
