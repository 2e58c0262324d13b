use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use treepo::advantage::EstimatorVariant;
use treepo::costmodel::{write_sweep_csv, CostParams};
use treepo::engine::{run_tree_rollout, InitDivergence, ProbDirection};
use treepo::harness::{
    bench_depth_segment, branching_modes, depth_segment_sweep, eval_tasks, evaluate, initial_policy, scaling_sweep,
    train, train_with_observer, write_scaling_csv, EvalMode, MetricsRow, SweepSeries,
};
use treepo::task::{make_task, reward_tokens};
use treepo::{rng, BranchPolicy, Error, LogitsTablePolicy, RunConfig};

#[derive(Parser)]
#[command(
    name = "treepo",
    version,
    about = "Tree rollouts and tree-structured advantages on a toy addition task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the logits-table policy; writes metrics, manifest, trees and checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint (pass rate and majority vote).
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump rollout trees as JSON lines.
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        queries: usize,
    },
    /// Tree versus sequential cost comparison per depth x segment pair.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        queries: usize,
        #[arg(long, value_delimiter = ',', default_value = "28x4,14x8,7x16")]
        pairs: Vec<String>,
    },
    /// Majority-vote accuracy against per-query compute for several divergences.
    SweepScaling {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        divergences: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "224,448,896,1792,3584")]
        budgets: Vec<u64>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// One training run per depth x segment pair at a constant response budget.
    SweepDepthseg {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "28x4,14x8,7x16")]
        pairs: Vec<String>,
    },
    /// One training run per branching mode.
    SweepBranching(RunArgs),
    /// Print the effective configuration as JSON.
    Config(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Grpo,
    TreeMean,
    TreeSizeWeighted,
    TreeSizeWeightedReject,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    FixedNary,
    TransferEven,
    ProbLow,
    ProbHigh,
    ProbLowSched,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sequential,
    Tree,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_queries: Option<usize>,
    #[arg(long)]
    oversample_factor: Option<usize>,
    #[arg(long)]
    max_resample_rounds: Option<usize>,
    #[arg(long)]
    update_epochs: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    branch_base: Option<usize>,
    #[arg(long)]
    init_divergence: Option<usize>,
    #[arg(long)]
    fallback_segment: Option<usize>,
    #[arg(long, value_enum)]
    branch: Option<Branch>,
    #[arg(long, value_enum)]
    estimator: Option<Estimator>,
    #[arg(long)]
    no_root: bool,
    #[arg(long)]
    no_global_norm: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eps_low: Option<f64>,
    #[arg(long)]
    eps_high: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_rollouts: Option<usize>,
    #[arg(long)]
    vote_samples: Option<usize>,
    #[arg(long, value_enum)]
    eval_mode: Option<Mode>,
    #[arg(long)]
    prefill_cost: Option<f64>,
    #[arg(long)]
    decode_cost: Option<f64>,
    #[arg(long)]
    sweep_overhead: Option<f64>,
    /// Sample each sweep's requests on all cores.
    #[arg(long)]
    parallel: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($src:ident => $($dst:ident).+;)*) => {$(
                if let Some(v) = self.$src {
                    c.$($dst).+ = v;
                }
            )*};
        }
        set! {
            seed => seed;
            iterations => iterations;
            batch_queries => batch_queries;
            oversample_factor => oversample_factor;
            max_resample_rounds => max_resample_rounds;
            update_epochs => update_epochs;
            width => tree.width;
            depth => tree.depth;
            segment => tree.segment_budget;
            branch_base => tree.branch_base;
            fallback_segment => tree.fallback_segment_budget;
            lr => clip.learning_rate;
            warmup => clip.warmup_steps;
            eps_low => clip.eps_low;
            eps_high => clip.eps_high;
            eval_interval => eval_interval;
            eval_rollouts => eval_rollouts;
            vote_samples => eval_vote_samples;
            prefill_cost => cost.prefill_cost;
            decode_cost => cost.decode_cost;
            sweep_overhead => cost.sweep_overhead;
        }
        if self.segment.is_some() && self.fallback_segment.is_none() {
            c.tree.fallback_segment_budget = c.tree.segment_budget;
        }
        if let Some(n) = self.init_divergence {
            c.tree.init_divergence = InitDivergence::Fixed(n);
        }
        if let Some(b) = self.branch {
            c.branch = branch_policy(b);
        }
        if let Some(e) = self.estimator {
            c.estimator.variant = match e {
                Estimator::Grpo => EstimatorVariant::Grpo,
                Estimator::TreeMean => EstimatorVariant::TreeMean,
                Estimator::TreeSizeWeighted => EstimatorVariant::TreeSizeWeighted,
                Estimator::TreeSizeWeightedReject => EstimatorVariant::TreeSizeWeightedReject,
            };
        }
        if self.no_root {
            c.estimator.include_root = false;
        }
        if self.no_global_norm {
            c.estimator.global_norm = false;
        }
        if let Some(m) = self.eval_mode {
            c.eval_mode = match m {
                Mode::Sequential => EvalMode::Sequential,
                Mode::Tree => EvalMode::Tree,
            };
        }
        if self.parallel {
            c.tree.parallel = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn branch_policy(b: Branch) -> BranchPolicy {
    match b {
        Branch::FixedNary => BranchPolicy::FixedNary,
        Branch::TransferEven => BranchPolicy::TransferEven,
        Branch::ProbLow => BranchPolicy::prob(ProbDirection::LowEncourage),
        Branch::ProbHigh => BranchPolicy::prob(ProbDirection::HighEncourage),
        Branch::ProbLowSched => BranchPolicy::prob_scheduled(ProbDirection::LowEncourage, 5.0, 1.0),
    }
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(usize, usize)>, Error> {
    pairs
        .iter()
        .map(|p| {
            let (d, l) = p
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("pair {p:?} is not of the form DxL")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("pair {p:?}: {e}")))
            };
            Ok((num(d)?, num(l)?))
        })
        .collect()
}

fn load_policy(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<LogitsTablePolicy, Error> {
    match checkpoint {
        Some(p) => Ok(LogitsTablePolicy::load(p)?),
        None => treepo::harness::initial_policy(cfg),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Config(a) => {
            println!("{}", a.resolve()?.to_json_pretty());
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let ckpt_dir = a.out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            let mut save_err = None;
            let out = train_with_observer(&cfg, initial_policy(&cfg)?, reward_tokens, |v| {
                if v.row.evaluated && save_err.is_none() {
                    save_err = v
                        .policy
                        .save(&ckpt_dir.join(format!("iter_{:05}.ckpt", v.iteration)))
                        .err();
                }
            })?;
            if let Some(e) = save_err {
                return Err(e.into());
            }
            let mut m = create(&a.out, "metrics.csv")?;
            MetricsRow::write_csv(&out.metrics, &mut m)?;
            m.flush()?;
            fs::write(a.out.join("manifest.json"), out.manifest.to_json_pretty())?;
            let mut t = create(&a.out, "trees.jsonl")?;
            for tree in &out.last_trees {
                tree.write_jsonl(&mut t)?;
            }
            t.flush()?;
            out.policy.save(&a.out.join("policy.ckpt"))?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "iterations {}  reward {:.3}  eval {:.3}  vote {:.3}  truncated batches {}",
                    out.manifest.iterations_run,
                    last.mean_reward,
                    last.eval_accuracy,
                    last.vote_accuracy,
                    out.manifest.truncated_batches.len()
                );
            }
            println!("wrote {}", a.out.display());
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let policy = load_policy(&cfg, &checkpoint)?;
            let r = evaluate(
                &policy,
                &eval_tasks(&cfg),
                cfg.eval_rollouts,
                cfg.eval_vote_samples,
                &cfg.tree,
                cfg.eval_mode,
                rng::derive(&[cfg.seed, 0xE7A1]),
            )?;
            println!("pass_rate {:.6}\nvote_accuracy {:.6}", r.pass_rate, r.vote_accuracy);
        }
        Command::Rollout {
            run,
            checkpoint,
            queries,
        } => {
            let cfg = run.resolve()?;
            let policy = load_policy(&cfg, &checkpoint)?;
            let mut r = rng::stream(&[cfg.seed, 0x7A5C]);
            let tasks: Vec<_> = (0..queries as u64)
                .map(|i| make_task(&mut r, i, cfg.difficulty))
                .collect();
            let trees = run_tree_rollout(&tasks, &cfg.tree, &policy, &cfg.branch, cfg.seed)?;
            let mut t = create(&run.out, "trees.jsonl")?;
            for tree in &trees {
                tree.write_jsonl(&mut t)?;
            }
            t.flush()?;
            println!(
                "wrote {} trees to {}",
                trees.len(),
                run.out.join("trees.jsonl").display()
            );
        }
        Command::Bench {
            run,
            checkpoint,
            queries,
            pairs,
        } => {
            let cfg = run.resolve()?;
            let policy = load_policy(&cfg, &checkpoint)?;
            let mut r = rng::stream(&[cfg.seed, 0x7A5C]);
            let tasks: Vec<_> = (0..queries as u64)
                .map(|i| make_task(&mut r, i, cfg.difficulty))
                .collect();
            let params: CostParams = cfg.cost;
            let rows = bench_depth_segment(
                &policy,
                &tasks,
                &parse_pairs(&pairs)?,
                &cfg.tree,
                &cfg.branch,
                &params,
                cfg.seed,
            )?;
            let mut f = create(&run.out, "bench.csv")?;
            write_sweep_csv(&rows, &mut f)?;
            f.flush()?;
            write_sweep_csv(&rows, &mut std::io::stdout())?;
        }
        Command::SweepScaling {
            run,
            checkpoint,
            divergences,
            budgets,
            repeats,
        } => {
            let cfg = run.resolve()?;
            let policy = load_policy(&cfg, &checkpoint)?;
            let rows = scaling_sweep(
                &policy,
                &eval_tasks(&cfg),
                &divergences,
                &budgets,
                &cfg.tree,
                repeats,
                cfg.seed,
            )?;
            let mut f = create(&run.out, "scaling.csv")?;
            write_scaling_csv(&rows, &mut f)?;
            f.flush()?;
            write_scaling_csv(&rows, &mut std::io::stdout())?;
        }
        Command::SweepDepthseg { run, pairs } => {
            let cfg = run.resolve()?;
            let series = depth_segment_sweep(&cfg, &parse_pairs(&pairs)?)?;
            let mut f = create(&run.out, "depthseg.csv")?;
            SweepSeries::write_csv(&series, &mut f)?;
            f.flush()?;
            println!("wrote {}", run.out.join("depthseg.csv").display());
        }
        Command::SweepBranching(a) => {
            let cfg = a.resolve()?;
            let series = branching_modes()
                .into_iter()
                .map(|(label, branch)| {
                    let c = RunConfig { branch, ..cfg.clone() };
                    Ok(SweepSeries {
                        label: label.to_string(),
                        metrics: train(&c)?.metrics,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let mut f = create(&a.out, "branching.csv")?;
            SweepSeries::write_csv(&series, &mut f)?;
            f.flush()?;
            println!("wrote {}", a.out.join("branching.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
