//! Compares tree and sequential sampling cost: the closed form for full
//! trees, then measured ledgers for the toy depth x segment presets.

use treepo::costmodel::{full_tree_savings, write_sweep_csv, CostParams};
use treepo::harness::{bench_depth_segment, toy_depth_segment_pairs};
use treepo::task::all_two_operand_tasks;
use treepo::{BranchPolicy, LogitsTablePolicy, TreeConfig};

fn main() -> Result<(), treepo::Error> {
    println!("full binary trees, decode-only savings:");
    for d in 1..=6 {
        let row: Vec<String> = (0..=d)
            .map(|m| format!("{:.3}", full_tree_savings(2, d, 1 << m)))
            .collect();
        println!("  depth {d}: w = 1..{:>2} -> {}", 1 << d, row.join(" "));
    }
    let tasks = &all_two_operand_tasks()[..32];
    let rows = bench_depth_segment(
        &LogitsTablePolicy::uniform(),
        tasks,
        &toy_depth_segment_pairs(),
        &TreeConfig::default(),
        &BranchPolicy::TransferEven,
        &CostParams::default(),
        0,
    )?;
    write_sweep_csv(&rows, &mut std::io::stdout())?;
    Ok(())
}
