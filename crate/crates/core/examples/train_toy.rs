//! Trains the logits table on two-digit modular addition with the default
//! toy preset and prints one line per iteration.
//!
//! cargo run --release --example train_toy -- [iterations] [learning_rate]

use treepo::harness::{initial_policy, train_with_observer, RunConfig};
use treepo::task::reward_tokens;

fn main() -> Result<(), treepo::Error> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig {
        eval_interval: 10,
        ..RunConfig::default()
    };
    if let Some(n) = args.next() {
        cfg.iterations = n.parse().expect("iterations");
    }
    if let Some(lr) = args.next() {
        cfg.clip.learning_rate = lr.parse().expect("learning rate");
    }
    let start = std::time::Instant::now();
    let out = train_with_observer(&cfg, initial_policy(&cfg)?, reward_tokens, |v| {
        let r = v.row;
        println!(
            "iter {:>3}  reward {:.3}  eval {:.3}  vote {:.3}  len {:>5.1}  entropy {:.3}  kept {:>2}/{}",
            r.iteration,
            r.mean_reward,
            r.eval_accuracy,
            r.vote_accuracy,
            r.mean_response_len,
            r.entropy,
            r.kept_groups,
            r.sampled_groups
        );
    })?;
    println!(
        "done in {:.1}s, {} updates, {} truncated batches",
        start.elapsed().as_secs_f64(),
        out.manifest.updates_applied,
        out.manifest.truncated_batches.len()
    );
    Ok(())
}
