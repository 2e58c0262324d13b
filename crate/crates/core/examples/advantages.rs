//! Scores a hand-built tree and prints every estimator's per-leaf advantages
//! along with the per-depth decomposition.

use treepo::advantage::{estimate, write_reports_tsv, EstimatorOptions, EstimatorVariant, RewardedGroup};
use treepo::tokens::{Segment, StopReason, TokenId, Vocabulary};
use treepo::tree::NodeStatus;
use treepo::{NodeId, QuerySpec, RolloutTree};

fn seg(tokens: &[TokenId]) -> Segment {
    Segment::new(tokens.to_vec(), vec![-1.0; tokens.len()], StopReason::BudgetExhausted)
}

fn main() -> Result<(), treepo::Error> {
    // root -> a -> {1, 1}, root -> b -> {0, 1, 0}, root -> 0
    let mut t = RolloutTree::new(QuerySpec::from_operands(0, &[2, 3]), 6, 3, 4);
    let a = t.add_child(NodeId::ROOT, seg(&[TokenId(16)]), NodeStatus::Active)?;
    let b = t.add_child(NodeId::ROOT, seg(&[TokenId(17)]), NodeStatus::Active)?;
    let right = [Vocabulary::ANS_OPEN, Vocabulary::digit(5), Vocabulary::ANS_CLOSE];
    let wrong = [Vocabulary::ANS_OPEN, Vocabulary::digit(6), Vocabulary::ANS_CLOSE];
    for (parent, answer) in [
        (a, &right),
        (a, &right),
        (b, &wrong),
        (b, &right),
        (b, &wrong),
        (NodeId::ROOT, &wrong),
    ] {
        t.add_child(parent, seg(answer), NodeStatus::FinishedLeaf)?;
    }
    let group = RewardedGroup::score(t)?;
    println!("rewards {:?}", group.rewards);
    for variant in [
        EstimatorVariant::Grpo,
        EstimatorVariant::TreeMean,
        EstimatorVariant::TreeSizeWeighted,
        EstimatorVariant::TreeSizeWeightedReject,
    ] {
        let report = estimate(&group, &EstimatorOptions::with_variant(variant))?;
        let adv: Vec<String> = report.advantages().iter().map(|x| format!("{x:+.3}")).collect();
        println!("{variant:?}: {}", adv.join(" "));
    }
    let report = estimate(&group, &EstimatorOptions::default())?;
    write_reports_tsv(&[report], &mut std::io::stdout())?;
    Ok(())
}
