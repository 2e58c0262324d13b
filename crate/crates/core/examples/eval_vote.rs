//! Evaluates the hand-built solved table and the untrained table, reporting
//! pass rate and majority-vote accuracy in both sampling modes.

use treepo::harness::{evaluate, majority_vote, EvalMode};
use treepo::task::all_two_operand_tasks;
use treepo::{LogitsTablePolicy, TreeConfig};

fn main() -> Result<(), treepo::Error> {
    println!(
        "vote over [3, 7, 7, none, 3, 7] -> {:?}",
        majority_vote(&[Some(3), Some(7), Some(7), None, Some(3), Some(7)])
    );
    let tasks = all_two_operand_tasks();
    let solved = LogitsTablePolicy::solved_for(&tasks, 30.0)?;
    let cfg = TreeConfig::default();
    for (name, policy) in [("solved", &solved), ("uniform", &LogitsTablePolicy::uniform())] {
        for mode in [EvalMode::Sequential, EvalMode::Tree] {
            let r = evaluate(policy, &tasks, 8, 8, &cfg, mode, 0)?;
            println!(
                "{name:<8} {mode:?}: pass {:.3}  vote {:.3}",
                r.pass_rate, r.vote_accuracy
            );
        }
    }
    Ok(())
}
