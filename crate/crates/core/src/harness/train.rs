use super::eval::{evaluate, EvalResult};
use super::RunConfig;
use crate::advantage::{dynamic_query_filter, estimate, global_normalize, AdvantageReport, RewardedGroup};
use crate::costmodel::{ledger_sequential, ledger_tree, savings, ComputeLedger};
use crate::engine::run_tree_rollout;
use crate::objective::{apply_update, surrogate_gradient, TokenBatch};
use crate::policy::LogitsTablePolicy;
use crate::rng;
use crate::task::{all_two_operand_tasks, make_task, reward_tokens, QuerySpec};
use crate::tokens::{TokenId, Vocabulary};
use crate::tree::RolloutTree;
use crate::Error;
use serde::Serialize;
use std::collections::BTreeSet;
use std::io::{self, Write};
use std::sync::Arc;

/// Maps a response and the gold answer to a reward.
pub type RewardFn = fn(&[TokenId], u64) -> f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean reward over every sampled trajectory, before filtering.
    pub mean_reward: f64,
    pub eval_accuracy: f64,
    pub vote_accuracy: f64,
    /// False when the eval columns carry the previous evaluation forward.
    pub evaluated: bool,
    pub mean_response_len: f64,
    pub entropy: f64,
    pub savings: f64,
    pub shortfall: usize,
    pub sampled_groups: usize,
    pub kept_groups: usize,
}

pub const METRICS_HEADER: &str = "iteration,mean_reward,eval_accuracy,vote_accuracy,evaluated,mean_response_len,entropy,savings,shortfall,sampled_groups,kept_groups";

impl MetricsRow {
    pub fn write_csv<W: Write>(rows: &[MetricsRow], out: &mut W) -> io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{},{},{}",
                r.iteration,
                r.mean_reward,
                r.eval_accuracy,
                r.vote_accuracy,
                u8::from(r.evaluated),
                r.mean_response_len,
                r.entropy,
                r.savings,
                r.shortfall,
                r.sampled_groups,
                r.kept_groups
            )?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        [
            self.mean_reward,
            self.eval_accuracy,
            self.vote_accuracy,
            self.mean_response_len,
            self.entropy,
            self.savings,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatedBatch {
    pub iteration: usize,
    pub kept: usize,
    pub wanted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub iterations_run: usize,
    pub updates_applied: usize,
    /// Iterations whose batch came up short after every resampling round.
    pub truncated_batches: Vec<TruncatedBatch>,
    pub final_eval: Option<EvalResult>,
}

impl RunManifest {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<MetricsRow>,
    pub policy: LogitsTablePolicy,
    pub manifest: RunManifest,
    /// Every tree sampled in the last iteration.
    pub last_trees: Vec<RolloutTree>,
}

/// What the trainer hands its observer after each iteration.
#[derive(Debug)]
pub struct IterationView<'a> {
    pub iteration: usize,
    /// Groups that entered the update, after filtering and truncation.
    pub trained: &'a [RewardedGroup],
    pub reports: &'a [AdvantageReport],
    pub row: &'a MetricsRow,
    /// The table after this iteration's updates.
    pub policy: &'a LogitsTablePolicy,
}

pub fn initial_policy(cfg: &RunConfig) -> Result<LogitsTablePolicy, Error> {
    Ok(LogitsTablePolicy::new(
        Vocabulary::default(),
        cfg.context_order,
        cfg.sampling_temperature,
    )?)
}

/// The fixed evaluation set of a run.
pub fn eval_tasks(cfg: &RunConfig) -> Vec<QuerySpec> {
    if cfg.difficulty == 2 {
        return all_two_operand_tasks();
    }
    let mut r = rng::stream(&[cfg.seed, 0xE7A1]);
    (0..100).map(|i| make_task(&mut r, i, cfg.difficulty)).collect()
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutput, Error> {
    train_with_observer(cfg, initial_policy(cfg)?, reward_tokens, |_| {})
}

/// Runs `cfg.iterations` sample-filter-update iterations starting from
/// `policy`, scoring responses with `reward`.
pub fn train_with_observer<F>(
    cfg: &RunConfig,
    mut policy: LogitsTablePolicy,
    reward: RewardFn,
    mut observer: F,
) -> Result<TrainOutput, Error>
where
    F: FnMut(&IterationView<'_>),
{
    cfg.validate()?;
    let evals = eval_tasks(cfg);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut manifest = RunManifest {
        config: cfg.clone(),
        iterations_run: 0,
        updates_applied: 0,
        truncated_batches: Vec::new(),
        final_eval: None,
    };
    let mut last_trees = Vec::new();
    let mut last_eval = EvalResult::default();
    let mut step = 0;

    for it in 0..cfg.iterations {
        let snapshot = Arc::new(policy.clone());
        let progress = if cfg.iterations > 1 {
            it as f64 / (cfg.iterations - 1) as f64
        } else {
            0.0
        };
        let branch = cfg.branch.at_progress(progress);

        let mut kept: Vec<RewardedGroup> = Vec::new();
        let mut trees_seen: Vec<RolloutTree> = Vec::new();
        let mut rewards_seen = Vec::new();
        let mut lens_seen = Vec::new();
        let mut sampled = 0;
        for round in 0..=cfg.max_resample_rounds {
            let missing = cfg.batch_queries - kept.len();
            let n = cfg.oversample_factor * missing;
            let mut task_rng = rng::stream(&[cfg.seed, 0x7A5C, it as u64, round as u64]);
            let tasks: Vec<QuerySpec> = (0..n)
                .map(|i| {
                    make_task(
                        &mut task_rng,
                        (it * 1_000_000 + round * 100_000 + i) as u64,
                        cfg.difficulty,
                    )
                })
                .collect();
            let seed = rng::derive(&[cfg.seed, 0x5011, it as u64, round as u64]);
            let trees = run_tree_rollout(&tasks, &cfg.tree, snapshot.as_ref(), &branch, seed)?;
            sampled += trees.len();
            let mut groups = Vec::with_capacity(trees.len());
            for tree in trees {
                let rs = tree
                    .emitted_leaves()
                    .iter()
                    .map(|l| {
                        let resp = tree.response_tokens(*l)?;
                        lens_seen.push(resp.len() as f64);
                        Ok(reward(&resp, tree.query.gold_answer))
                    })
                    .collect::<Result<Vec<f64>, Error>>()?;
                rewards_seen.extend_from_slice(&rs);
                trees_seen.push(tree.clone());
                groups.push(RewardedGroup::with_rewards(tree, rs));
            }
            kept.extend(dynamic_query_filter(groups));
            if kept.len() >= cfg.batch_queries {
                break;
            }
        }
        kept.truncate(cfg.batch_queries);
        if kept.len() < cfg.batch_queries {
            manifest.truncated_batches.push(TruncatedBatch {
                iteration: it,
                kept: kept.len(),
                wanted: cfg.batch_queries,
            });
        }
        debug_assert!(kept.iter().all(|g| g.correct() > 0 && g.correct() < g.size()));

        let mut reports = kept
            .iter()
            .map(|g| estimate(g, &cfg.estimator))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.estimator.global_norm {
            global_normalize(&mut reports, cfg.estimator.eps);
        }
        let mut batch = TokenBatch::new();
        for (g, r) in kept.iter().zip(&reports) {
            batch.push_group(&snapshot, g, r)?;
        }
        if !batch.is_empty() {
            for _ in 0..cfg.update_epochs {
                let grad = surrogate_gradient(&batch, &policy, &cfg.clip)?;
                apply_update(&mut policy, &grad, &cfg.clip, step)?;
                step += 1;
            }
            manifest.updates_applied += 1;
        }

        let evaluated = it % cfg.eval_interval == 0 || it + 1 == cfg.iterations;
        if evaluated {
            last_eval = evaluate(
                &policy,
                &evals,
                cfg.eval_rollouts,
                cfg.eval_vote_samples,
                &cfg.tree,
                cfg.eval_mode,
                rng::derive(&[cfg.seed, 0xE7A1, it as u64]),
            )?;
        }

        let (mut tl, mut sl) = (ComputeLedger::default(), ComputeLedger::default());
        for t in &trees_seen {
            tl.merge(&ledger_tree(t));
            sl.merge(&ledger_sequential(t));
        }
        let row = MetricsRow {
            iteration: it,
            mean_reward: mean_or_zero(&rewards_seen),
            eval_accuracy: last_eval.pass_rate,
            vote_accuracy: last_eval.vote_accuracy,
            evaluated,
            mean_response_len: mean_or_zero(&lens_seen),
            entropy: visited_entropy(&snapshot, &trees_seen),
            savings: savings(&tl, &sl, &cfg.cost),
            shortfall: trees_seen.iter().filter(|t| t.meta.shortfall > 0).count(),
            sampled_groups: sampled,
            kept_groups: kept.len(),
        };
        observer(&IterationView {
            iteration: it,
            trained: &kept,
            reports: &reports,
            row: &row,
            policy: &policy,
        });
        metrics.push(row);
        manifest.iterations_run += 1;
        last_trees = trees_seen;
    }
    if cfg.iterations > 0 {
        manifest.final_eval = Some(last_eval);
    }
    Ok(TrainOutput {
        metrics,
        policy,
        manifest,
        last_trees,
    })
}

fn mean_or_zero(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean entropy of the rows at every distinct context that generated a token
/// in `trees`.
pub fn visited_entropy(policy: &LogitsTablePolicy, trees: &[RolloutTree]) -> f64 {
    let mut ctxs = BTreeSet::new();
    for tree in trees {
        for node in tree.nodes().iter().skip(1) {
            let Ok(mut ctx) = tree.path_tokens(node.parent.expect("non-root nodes have a parent")) else {
                continue;
            };
            for tok in &node.segment.tokens {
                ctxs.insert(policy.context_key(&ctx));
                ctx.push(*tok);
            }
        }
    }
    if ctxs.is_empty() {
        return 0.0;
    }
    ctxs.iter().map(|k| policy.entropy_at_key(*k)).sum::<f64>() / ctxs.len() as f64
}
