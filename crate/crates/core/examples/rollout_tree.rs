//! Grows one rollout tree for a single query with the untrained table and
//! prints it as an indented outline, then as JSON lines.
//!
//! cargo run --release --example rollout_tree -- [seed]

use treepo::tokens::extract_answer;
use treepo::{run_tree_rollout, BranchPolicy, LogitsTablePolicy, NodeId, QuerySpec, RolloutTree, TreeConfig};

fn outline(t: &RolloutTree, id: NodeId, indent: usize) {
    let n = t.node(id).unwrap();
    let toks: Vec<String> = n.segment.tokens.iter().map(|x| x.0.to_string()).collect();
    let answer = if n.status.is_leaf() {
        format!("  answer {:?}", extract_answer(&t.response_tokens(id).unwrap()))
    } else {
        String::new()
    };
    println!("{:indent$}{id} {:?} [{}]{answer}", "", n.status, toks.join(" "));
    for c in &n.children {
        outline(t, *c, indent + 2);
    }
}

fn main() -> Result<(), treepo::Error> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let cfg = TreeConfig {
        width: 8,
        depth: 4,
        segment_budget: 6,
        fallback_segment_budget: 6,
        ..TreeConfig::default()
    };
    let query = QuerySpec::from_operands(0, &[4, 7]);
    let trees = run_tree_rollout(
        &[query],
        &cfg,
        &LogitsTablePolicy::uniform(),
        &BranchPolicy::TransferEven,
        seed,
    )?;
    let t = &trees[0];
    println!(
        "gold {}  nodes {}  emitted {}  fallback rounds {}  sweeps {:?}",
        t.query.gold_answer,
        t.len(),
        t.emitted_count(),
        t.meta.fallback_rounds,
        t.meta.sweep_batches
    );
    outline(t, NodeId::ROOT, 0);
    print!("{}", t.to_jsonl());
    Ok(())
}
