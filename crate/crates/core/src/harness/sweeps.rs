use super::eval::majority_vote;
use super::train::{train, MetricsRow, METRICS_HEADER};
use super::RunConfig;
use crate::advantage::{mean, std_dev};
use crate::costmodel::{ledger_tree, sweep_row, CostParams, SweepRow};
use crate::engine::{run_tree_rollout, BranchPolicy, InitDivergence, ProbDirection, SamplingBackend, TreeConfig};
use crate::rng;
use crate::task::QuerySpec;
use crate::tokens::extract_answer;
use crate::Error;
use serde::Serialize;
use std::io::{self, Write};

/// Worst-case decode tokens per query of a tree with branch factor and
/// initial divergence `divergence`, capped at `width`, with every segment at
/// full budget and no fallback.
pub fn nominal_compute(divergence: usize, width: usize, cfg: &TreeConfig) -> u64 {
    let mut level = 1usize;
    let mut nodes = 0u64;
    for _ in 0..cfg.depth {
        level = level.saturating_mul(divergence).min(width);
        nodes += level as u64;
    }
    nodes * cfg.segment_budget as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub divergence: usize,
    pub budget: u64,
    pub width: usize,
    pub nominal_compute: u64,
    /// Mean measured decode tokens per query.
    pub compute: f64,
    pub accuracy: f64,
    /// Standard deviation of the per-repeat accuracy.
    pub accuracy_std: f64,
    pub repeats: usize,
    pub tasks: usize,
}

pub const SCALING_HEADER: &str = "divergence,budget,width,nominal_compute,compute,accuracy,accuracy_std,repeats,tasks";

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "{SCALING_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.3},{:.6},{:.6},{},{}",
            r.divergence,
            r.budget,
            r.width,
            r.nominal_compute,
            r.compute,
            r.accuracy,
            r.accuracy_std,
            r.repeats,
            r.tasks
        )?;
    }
    Ok(())
}

/// Majority-vote accuracy of tree rollouts as the per-query compute budget
/// grows.
///
/// For each divergence `D` and budget `B`, the tree forks `D` ways at the
/// root and at every depth, and its width is the largest `D * 2^m` whose
/// [`nominal_compute`] fits in `B`. Budgets too small for `w = D` emit no row.
pub fn scaling_sweep<B: SamplingBackend + ?Sized>(
    policy: &B,
    tasks: &[QuerySpec],
    divergences: &[usize],
    budgets: &[u64],
    template: &TreeConfig,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>, Error> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("scaling budgets must be ascending".into()));
    }
    if divergences.iter().any(|d| *d < 2) {
        return Err(Error::Config("divergence must be >= 2".into()));
    }
    let mut rows = Vec::new();
    for &d in divergences {
        for &budget in budgets {
            let mut width = d;
            if nominal_compute(d, width, template) > budget {
                continue;
            }
            while nominal_compute(d, width * 2, template) <= budget && width * 2 <= 1 << 16 {
                width *= 2;
            }
            let cfg = TreeConfig {
                width,
                branch_base: d,
                init_divergence: InitDivergence::Fixed(d),
                ..template.clone()
            };
            let mut accs = Vec::with_capacity(repeats);
            let mut decode = 0u64;
            for r in 0..repeats {
                let s = rng::derive(&[seed, d as u64, budget, r as u64]);
                let trees = run_tree_rollout(tasks, &cfg, policy, &BranchPolicy::TransferEven, s)?;
                let mut correct = 0usize;
                for t in &trees {
                    decode += ledger_tree(t).decode_tokens;
                    let answers = t
                        .emitted_leaves()
                        .iter()
                        .map(|l| t.response_tokens(*l).map(|x| extract_answer(&x)))
                        .collect::<Result<Vec<_>, _>>()?;
                    if majority_vote(&answers) == Some(t.query.gold_answer) {
                        correct += 1;
                    }
                }
                accs.push(correct as f64 / tasks.len().max(1) as f64);
            }
            rows.push(ScalingRow {
                divergence: d,
                budget,
                width,
                nominal_compute: nominal_compute(d, width, template),
                compute: decode as f64 / (repeats * tasks.len()).max(1) as f64,
                accuracy: mean(&accs),
                accuracy_std: std_dev(&accs),
                repeats,
                tasks: tasks.len(),
            });
        }
    }
    Ok(rows)
}

/// A labelled metrics series from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeries {
    pub label: String,
    pub metrics: Vec<MetricsRow>,
}

impl SweepSeries {
    /// All series in one CSV with a leading `label` column.
    pub fn write_csv<W: Write>(series: &[SweepSeries], out: &mut W) -> io::Result<()> {
        writeln!(out, "label,{METRICS_HEADER}")?;
        for s in series {
            let mut buf = Vec::new();
            MetricsRow::write_csv(&s.metrics, &mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            for line in text.lines().skip(1) {
                writeln!(out, "{},{line}", s.label)?;
            }
        }
        Ok(())
    }
}

/// `(depth, segment)` pairs with a 112-token response budget.
pub fn toy_depth_segment_pairs() -> Vec<(usize, usize)> {
    vec![(28, 4), (14, 8), (7, 16)]
}

fn check_constant_budget(budget: usize, pairs: &[(usize, usize)]) -> Result<(), Error> {
    match pairs.iter().find(|(d, l)| d * l != budget) {
        Some(&(d, l)) => Err(Error::Config(format!(
            "depth x segment must stay at the configured {budget} tokens, {d}x{l} gives {}",
            d * l
        ))),
        None => Ok(()),
    }
}

/// One training run per `(depth, segment)` pair under identical seeds. Every
/// pair must keep the template's `depth * segment_budget`.
pub fn depth_segment_sweep(template: &RunConfig, pairs: &[(usize, usize)]) -> Result<Vec<SweepSeries>, Error> {
    check_constant_budget(template.tree.depth * template.tree.segment_budget, pairs)?;
    pairs
        .iter()
        .map(|&(d, l)| {
            let mut cfg = template.clone();
            cfg.tree.depth = d;
            cfg.tree.segment_budget = l;
            cfg.tree.fallback_segment_budget = l;
            Ok(SweepSeries {
                label: format!("{d}x{l}"),
                metrics: train(&cfg)?.metrics,
            })
        })
        .collect()
}

/// The branching modes compared by the branching sweep.
pub fn branching_modes() -> Vec<(&'static str, BranchPolicy)> {
    vec![
        ("fixed_nary", BranchPolicy::FixedNary),
        ("transfer_even", BranchPolicy::TransferEven),
        ("prob_low", BranchPolicy::prob(ProbDirection::LowEncourage)),
        ("prob_high", BranchPolicy::prob(ProbDirection::HighEncourage)),
        (
            "prob_low_sched",
            BranchPolicy::prob_scheduled(ProbDirection::LowEncourage, 5.0, 1.0),
        ),
    ]
}

/// Cost-model comparison of tree and sequential sampling per `(d, l)` pair.
pub fn bench_depth_segment<B: SamplingBackend + ?Sized>(
    policy: &B,
    tasks: &[QuerySpec],
    pairs: &[(usize, usize)],
    template: &TreeConfig,
    branch: &BranchPolicy,
    params: &CostParams,
    seed: u64,
) -> Result<Vec<SweepRow>, Error> {
    pairs
        .iter()
        .map(|&(d, l)| {
            let cfg = TreeConfig {
                depth: d,
                segment_budget: l,
                fallback_segment_budget: l,
                ..template.clone()
            };
            let trees = run_tree_rollout(tasks, &cfg, policy, branch, seed)?;
            Ok(sweep_row(&format!("{d}x{l}"), d, l, &trees, params))
        })
        .collect()
}
