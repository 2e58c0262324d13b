//! Briefly trains a policy, freezes it, and prints majority-vote accuracy
//! against per-query compute for several divergence factors.
//!
//! cargo run --release --example scaling_sweep -- [train_iterations] [repeats]

use treepo::harness::{eval_tasks, scaling_sweep, train, write_scaling_csv, RunConfig};

fn main() -> Result<(), treepo::Error> {
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig {
        iterations: args.next().map_or(60, |s| s.parse().expect("iterations")),
        eval_interval: 1000,
        ..RunConfig::default()
    };
    let repeats = args.next().map_or(5, |s| s.parse().expect("repeats"));
    let policy = train(&cfg)?.policy;
    let rows = scaling_sweep(
        &policy,
        &eval_tasks(&cfg),
        &[2, 4, 8],
        &[224, 448, 896, 1792, 3584],
        &cfg.tree,
        repeats,
        1,
    )?;
    write_scaling_csv(&rows, &mut std::io::stdout())?;
    Ok(())
}
