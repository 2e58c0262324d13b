use crate::engine::{run_sequential, run_tree_rollout, BranchPolicy, SamplingBackend, TreeConfig};
use crate::rng;
use crate::task::QuerySpec;
use crate::tokens::extract_answer;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    #[default]
    Sequential,
    Tree,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EvalResult {
    /// Fraction of sampled responses that are correct.
    pub pass_rate: f64,
    /// Fraction of tasks whose majority answer is correct.
    pub vote_accuracy: f64,
}

/// Most frequent answer; ties go to the lexicographically smallest answer
/// string. Answerless responses do not vote.
pub fn majority_vote(answers: &[Option<u64>]) -> Option<u64> {
    let mut counts: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    for a in answers.iter().flatten() {
        counts.entry(a.to_string()).or_insert((0, *a)).0 += 1;
    }
    let mut best: Option<(usize, u64)> = None;
    // BTreeMap iterates keys in lexicographic order; a strict > keeps the first.
    for (_, (n, a)) in counts {
        if best.is_none_or(|(bn, _)| n > bn) {
            best = Some((n, a));
        }
    }
    best.map(|(_, a)| a)
}

/// Samples `n_rollouts` responses per task, `vote_samples` independent times,
/// and averages pass rate and majority-vote accuracy.
pub fn evaluate<B: SamplingBackend + ?Sized>(
    policy: &B,
    tasks: &[QuerySpec],
    n_rollouts: usize,
    vote_samples: usize,
    tree: &TreeConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalResult, Error> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    if tasks.is_empty() || vote_samples == 0 {
        return Ok(EvalResult::default());
    }
    let (mut pass, mut vote) = (0.0, 0.0);
    for rep in 0..vote_samples {
        let s = rng::derive(&[seed, rep as u64]);
        let answers: Vec<Vec<Option<u64>>> = match mode {
            EvalMode::Sequential => run_sequential(tasks, n_rollouts, tree, policy, s)?
                .into_iter()
                .map(|trajs| trajs.iter().map(|t| extract_answer(&t.tokens)).collect())
                .collect(),
            EvalMode::Tree => {
                let cfg = TreeConfig {
                    width: n_rollouts,
                    ..tree.clone()
                };
                run_tree_rollout(tasks, &cfg, policy, &BranchPolicy::TransferEven, s)?
                    .iter()
                    .map(|t| {
                        t.emitted_leaves()
                            .iter()
                            .map(|l| t.response_tokens(*l).map(|r| extract_answer(&r)))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        for (task, ans) in tasks.iter().zip(&answers) {
            let correct = ans.iter().filter(|a| **a == Some(task.gold_answer)).count();
            pass += correct as f64 / n_rollouts as f64;
            if majority_vote(ans) == Some(task.gold_answer) {
                vote += 1.0;
            }
        }
    }
    let denom = (tasks.len() * vote_samples) as f64;
    Ok(EvalResult {
        pass_rate: pass / denom,
        vote_accuracy: vote / denom,
    })
}
