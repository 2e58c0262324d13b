//! Shows how each branching mode splits a depth's budget over the same
//! active paths.

use treepo::engine::{assign_branches_even, assign_branches_prob};
use treepo::{NodeId, ProbDirection};

fn main() {
    // mean segment logprob of each surviving path
    let scored = [
        (NodeId(3), -0.4),
        (NodeId(5), -1.1),
        (NodeId(8), -2.5),
        (NodeId(9), -0.9),
    ];
    let ids: Vec<NodeId> = scored.iter().map(|(id, _)| *id).collect();
    for total in [4, 9, 16] {
        println!("total {total}");
        println!(
            "  even            {:?}",
            counts(assign_branches_even(&ids, total).unwrap())
        );
        for temp in [0.5, 2.0, 8.0] {
            for dir in [ProbDirection::LowEncourage, ProbDirection::HighEncourage] {
                let split = assign_branches_prob(&scored, total, temp, dir).unwrap();
                println!("  {:<14}T={temp:<3} {:?}", format!("{dir:?}"), counts(split));
            }
        }
    }
}

fn counts(split: Vec<(NodeId, usize)>) -> Vec<usize> {
    split.into_iter().map(|(_, c)| c).collect()
}
