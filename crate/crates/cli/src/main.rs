//! Command-line driver: dataset generation, experiment execution, the
//! replay-batch-size sweep, report aggregation, and histogram export.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ravencl_core::config::{mix_seed, ConfigError, ExperimentConfig, Seeds, SWEEP_REPLAY_SIZES};
use ravencl_core::continual::{
    base_initialize, build_schedule, offline_train, read_buffer_csv, read_flags, read_r_matrix,
    run_experiment, stream_train, write_buffer_csv, write_flags, write_r_matrix, write_runlog,
    LearnerKind, RunError, TaskPool, TrainHyper,
};
use ravencl_core::metrics::{
    avg_accuracy, bwt, compare_against_baseline, fwt, omega, replay_histogram, MetricsError,
    RMatrix, SignificanceReport,
};
use ravencl_core::model::ModelDims;
use ravencl_core::replay::{Balance, PolicyKind};

#[derive(Parser)]
#[command(name = "ravencl", version, about = "Continual learning on symbolic matrix puzzles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seven task datasets (train and test splits)
    Gen(CommonArgs),
    /// Run the configured learners and write matrices, logs and metrics
    Run(CommonArgs),
    /// Omega-versus-replay-size sweep over the unbalanced policies
    Sweep(SweepArgs),
    /// Aggregate result directories into tables and a significance report
    Report(ReportArgs),
    /// Export replay-count histograms from streaming-run buffer snapshots
    Hist(HistArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file
    #[arg(long)]
    config: PathBuf,
    /// Override all named seeds from one master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shrink dataset sizes and epochs for quick smoke runs
    #[arg(long)]
    fast: bool,
    /// Worker threads for independent runs
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Replay batch sizes to sweep (subset of 8,16,32,64)
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result directories produced by `run` (at least one)
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Where to write the report (defaults to `<first dir>/report`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the subset partition
    #[arg(long, default_value_t = 4)]
    subset_seed: u64,
}

#[derive(Args)]
struct HistArgs {
    /// Result directory produced by `run` or `sweep`
    dir: PathBuf,
    /// Where to write the exports (defaults to `<dir>/hist`)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Distinguishes configuration mistakes (exit 2) from runtime failures
/// (exit 1).
fn is_usage_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<ConfigError>().is_some()
        || err.downcast_ref::<UsageError>().is_some()
        || matches!(err.downcast_ref::<RunError>(), Some(RunError::UnknownLearner(_)))
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&load_config(&args)?),
        Command::Run(args) => {
            init_pool(args.jobs);
            cmd_run(&load_config(&args)?)
        }
        Command::Sweep(args) => {
            init_pool(args.common.jobs);
            let sizes = validate_sizes(args.sizes)?;
            cmd_sweep(&load_config(&args.common)?, &sizes)
        }
        Command::Report(args) => cmd_report(&args),
        Command::Hist(args) => cmd_hist(&args),
    }
}

fn init_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(master) = args.seed {
        config.seeds = Seeds::from_master(master);
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if args.fast {
        config = config.fast_profile();
    }
    Ok(config)
}

fn validate_sizes(sizes: Option<Vec<usize>>) -> Result<Vec<usize>> {
    let sizes = sizes.unwrap_or_else(|| SWEEP_REPLAY_SIZES.to_vec());
    for r in &sizes {
        if !SWEEP_REPLAY_SIZES.contains(r) {
            return Err(anyhow!(UsageError(format!(
                "replay size {r} is not in the sweep grid {SWEEP_REPLAY_SIZES:?}"
            ))));
        }
    }
    Ok(sizes)
}

/// Writes the 7 task datasets (14 files) deterministically from the seeds.
fn cmd_gen(config: &ExperimentConfig) -> Result<()> {
    let dir = config.out_dir.join("datasets");
    std::fs::create_dir_all(&dir)?;
    let pool = TaskPool::generate(config.train_per_task, config.test_per_task, config.seeds.dataset)?;
    for (train, test) in &pool.datasets {
        train.save(&dir.join(format!("{}_train.jsonl", train.kind.name())))?;
        test.save(&dir.join(format!("{}_test.jsonl", test.kind.name())))?;
        println!(
            "{}: {} train / {} test",
            train.kind.name(),
            train.problems.len(),
            test.problems.len()
        );
    }
    println!("wrote {} dataset files to {}", pool.datasets.len() * 2, dir.display());
    Ok(())
}

fn cmd_run(config: &ExperimentConfig) -> Result<()> {
    run_experiment(config).context("experiment run")?;
    println!("artifacts written to {}", config.out_dir.display());
    Ok(())
}

/// Runs PartialReplay for every policy and requested replay size
/// (unbalanced) over the selected permutations and emits an omega table.
fn cmd_sweep(config: &ExperimentConfig, sizes: &[usize]) -> Result<()> {
    use rayon::prelude::*;

    let out = config.out_dir.join("sweep");
    std::fs::create_dir_all(&out)?;
    let hyper = TrainHyper::from_config(config);
    let dims = ModelDims::default();
    let pool = ravencl_core::continual::ensure_datasets(config)?;
    let encoded = pool.encode();
    let perm_ids = config.permutations.ids();

    let schedules: Vec<_> = perm_ids
        .iter()
        .map(|&id| build_schedule(&encoded, id, mix_seed(config.seeds.stream, id as u64)))
        .collect();
    let prep: Vec<Result<(ravencl_core::model::ModelParams, RMatrix), RunError>> = schedules
        .par_iter()
        .map(|schedule| {
            let base = base_initialize(
                schedule,
                dims,
                &hyper,
                mix_seed(config.seeds.init, schedule.permutation_id as u64),
            )?;
            let offline = offline_train(
                schedule,
                dims,
                &hyper,
                mix_seed(config.seeds.init, 1000 + schedule.permutation_id as u64),
            )?;
            Ok((base, offline.r_matrix()?))
        })
        .collect();
    let mut bases = Vec::new();
    let mut offline_rs = Vec::new();
    for p in prep {
        let (base, off) = p?;
        bases.push(base);
        offline_rs.push(off);
    }

    let n_schedules = schedules.len();
    let grid: Vec<(PolicyKind, usize, usize)> = PolicyKind::ALL
        .iter()
        .flat_map(|&policy| {
            sizes.iter().flat_map(move |&r| (0..n_schedules).map(move |s| (policy, r, s)))
        })
        .collect();
    let runs: Vec<(PolicyKind, usize, usize, Result<ravencl_core::continual::RunLog, RunError>)> =
        grid.into_par_iter()
            .map(|(policy, r, s)| {
                let kind = LearnerKind::PartialReplay {
                    policy,
                    balance: Balance::Unbalanced,
                    replay_size: r,
                };
                let log = stream_train(&kind, &bases[s], &schedules[s], &hyper);
                (policy, r, s, log)
            })
            .collect();

    let mut table = String::from("policy");
    for r in sizes {
        table.push_str(&format!(",omega_r{r}"));
    }
    table.push('\n');
    let mut failed = 0;
    for policy in PolicyKind::ALL {
        table.push_str(policy.name());
        for &r in sizes {
            let mut omegas = Vec::new();
            for (s, schedule) in schedules.iter().enumerate() {
                let run = runs
                    .iter()
                    .find(|(p, rr, ss, _)| *p == policy && *rr == r && *ss == s)
                    .expect("grid covers every cell");
                match &run.3 {
                    Ok(log) => {
                        let run_dir = out
                            .join(format!("perm{}", schedule.permutation_id))
                            .join(format!("{}_r{r}", policy.name()));
                        std::fs::create_dir_all(&run_dir)?;
                        write_r_matrix(&run_dir.join("r_matrix.csv"), log)?;
                        write_flags(&run_dir.join("final_flags.csv"), log)?;
                        write_runlog(&run_dir.join("runlog.jsonl"), log)?;
                        if let Some(rows) = &log.buffer_snapshot {
                            write_buffer_csv(&run_dir.join("buffer.csv"), rows)?;
                        }
                        omegas.push(omega(&log.r_matrix()?, &offline_rs[s])?);
                    }
                    Err(err) => {
                        failed += 1;
                        let run_dir = out
                            .join(format!("perm{}", schedule.permutation_id))
                            .join(format!("{}_r{r}", policy.name()));
                        std::fs::create_dir_all(&run_dir)?;
                        std::fs::write(run_dir.join("FAILED"), format!("{err}\n"))?;
                    }
                }
            }
            if omegas.is_empty() {
                table.push_str(",nan");
            } else {
                table.push_str(&format!(",{}", omegas.iter().sum::<f64>() / omegas.len() as f64));
            }
        }
        table.push('\n');
    }
    std::fs::write(out.join("omega_table.csv"), &table)?;
    println!("{table}");
    if failed > 0 {
        bail!("{failed} sweep runs failed; partial artifacts carry failure markers");
    }
    Ok(())
}

/// One learner's collected artifacts across permutations.
struct LearnerResults {
    label: String,
    matrices: Vec<(usize, RMatrix)>,
    flags: Vec<Vec<bool>>,
}

fn collect_results(dirs: &[PathBuf]) -> Result<Vec<LearnerResults>> {
    let mut by_label: std::collections::BTreeMap<String, LearnerResults> = Default::default();
    for dir in dirs {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let perm_dir = entry?.path();
            let name = perm_dir.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            if !perm_dir.is_dir() || !name.starts_with("perm") {
                continue;
            }
            let perm_id: usize = name.trim_start_matches("perm").parse().unwrap_or(0);
            for learner_entry in std::fs::read_dir(&perm_dir)? {
                let run_dir = learner_entry?.path();
                let r_path = run_dir.join("r_matrix.csv");
                let f_path = run_dir.join("final_flags.csv");
                if !run_dir.is_dir() || !r_path.exists() {
                    continue;
                }
                let label =
                    run_dir.file_name().and_then(|n| n.to_str()).unwrap_or("unknown").to_string();
                let slot = by_label.entry(label.clone()).or_insert_with(|| LearnerResults {
                    label,
                    matrices: Vec::new(),
                    flags: Vec::new(),
                });
                slot.matrices.push((perm_id, read_r_matrix(&r_path)?));
                if f_path.exists() {
                    slot.flags.push(read_flags(&f_path)?);
                }
            }
        }
    }
    let mut out: Vec<LearnerResults> = by_label.into_values().collect();
    for res in &mut out {
        res.matrices.sort_by_key(|(perm, _)| *perm);
    }
    Ok(out)
}

/// Aggregates result directories: per-learner metric table, the
/// selective-replay comparison table, and the Welch/Holm significance
/// report against the Random and MinReplays baselines.
fn cmd_report(args: &ReportArgs) -> Result<()> {
    const N_SUBSETS: usize = 300;
    const ALPHA: f64 = 0.01;

    let results = collect_results(&args.dirs)?;
    let with_flags = results.iter().filter(|r| !r.flags.is_empty()).count();
    if with_flags < 2 {
        return Err(anyhow!(UsageError(format!(
            "need at least 2 learner result sets with per-problem flags, found {with_flags}"
        ))));
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.dirs[0].join("report"));
    std::fs::create_dir_all(&out)?;

    let offline: std::collections::BTreeMap<usize, RMatrix> = results
        .iter()
        .find(|r| r.label == "offline")
        .map(|r| r.matrices.iter().cloned().collect())
        .unwrap_or_default();

    // Per-learner metric table averaged over permutations.
    let mut learner_csv = String::from("learner,omega,avg_accuracy,bwt,fwt,final_accuracy\n");
    for res in &results {
        let mut omegas = Vec::new();
        let mut accs = Vec::new();
        let mut bwts = Vec::new();
        let mut fwts = Vec::new();
        for (perm, r) in &res.matrices {
            if let Some(off) = offline.get(perm) {
                omegas.push(omega(r, off)?);
            }
            accs.push(avg_accuracy(r));
            bwts.push(bwt(r)?);
            fwts.push(fwt(r)?);
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let fa = if res.flags.is_empty() {
            f64::NAN
        } else {
            mean(
                &res.flags
                    .iter()
                    .map(|f| f.iter().filter(|x| **x).count() as f64 / f.len() as f64)
                    .collect::<Vec<_>>(),
            )
        };
        learner_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            res.label,
            mean(&omegas),
            mean(&accs),
            mean(&bwts),
            mean(&fwts),
            fa
        ));
    }
    std::fs::write(out.join("learners.csv"), &learner_csv)?;

    // Table of selective-replay policies: unbalanced vs balanced columns.
    let policy_row = |policy: PolicyKind, balance: Balance| -> Option<(f64, f64, f64)> {
        let res = results.iter().find(|r| {
            r.label.starts_with(&format!("partial_replay_{}_{}", policy.name(), balance.name()))
        })?;
        let mut omegas = Vec::new();
        let mut accs = Vec::new();
        for (perm, r) in &res.matrices {
            if let Some(off) = offline.get(perm) {
                omegas.push(omega(r, off).ok()?);
            }
            accs.push(avg_accuracy(r));
        }
        let fa = res
            .flags
            .iter()
            .map(|f| f.iter().filter(|x| **x).count() as f64 / f.len() as f64)
            .sum::<f64>()
            / res.flags.len().max(1) as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Some((mean(&omegas), mean(&accs), fa))
    };
    let mut table = String::from(
        "method,unbal_omega,unbal_a,unbal_fa,bal_omega,bal_a,bal_fa\n",
    );
    let mut any_policy_rows = false;
    for policy in PolicyKind::ALL {
        let unbal = policy_row(policy, Balance::Unbalanced);
        let bal = policy_row(policy, Balance::Balanced);
        if unbal.is_none() && bal.is_none() {
            continue;
        }
        any_policy_rows = true;
        let fmt = |cell: Option<(f64, f64, f64)>| match cell {
            Some((o, a, f)) => format!("{o},{a},{f}"),
            None => "nan,nan,nan".to_string(),
        };
        table.push_str(&format!("{},{},{}\n", policy.name(), fmt(unbal), fmt(bal)));
    }
    if any_policy_rows {
        std::fs::write(out.join("selective_replay_table.csv"), &table)?;
    }

    // Significance: every policy against the Random and MinReplays
    // baselines, Holm-corrected within each family.
    let mut families = Vec::new();
    for balance in [Balance::Unbalanced, Balance::Balanced] {
        let methods: Vec<(String, Vec<Vec<bool>>)> = PolicyKind::ALL
            .iter()
            .filter_map(|&policy| {
                let res = results.iter().find(|r| {
                    r.label.starts_with(&format!(
                        "partial_replay_{}_{}",
                        policy.name(),
                        balance.name()
                    ))
                })?;
                if res.flags.is_empty() {
                    return None;
                }
                Some((policy.name().to_string(), res.flags.clone()))
            })
            .collect();
        if methods.len() < 2 {
            continue;
        }
        for baseline in [PolicyKind::Random, PolicyKind::MinReplays] {
            if !methods.iter().any(|(name, _)| name == baseline.name()) {
                continue;
            }
            let family = compare_against_baseline(
                baseline.name(),
                &methods,
                N_SUBSETS,
                ALPHA,
                args.subset_seed,
            )
            .map_err(|e: MetricsError| anyhow!(e))?;
            families.push((balance.name().to_string(), family));
        }
    }
    if !families.is_empty() {
        let report = SignificanceReport {
            alpha: ALPHA,
            n_subsets: N_SUBSETS,
            families: families.iter().map(|(_, f)| f.clone()).collect(),
        };
        std::fs::write(
            out.join("significance.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        let mut sig_csv = String::from("balance,baseline,method,p_value,reject\n");
        for (balance, family) in &families {
            for pair in &family.pairs {
                sig_csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    balance, pair.baseline, pair.method, pair.p_value, pair.reject
                ));
            }
        }
        std::fs::write(out.join("significance.csv"), sig_csv)?;
    }
    println!("report written to {}", out.display());
    Ok(())
}

/// Exports one histogram file per streaming policy found in the run
/// directory: rows of (task_id, replay_count, n_samples), averaged over the
/// permutations.
fn cmd_hist(args: &HistArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("hist"));
    let mut snapshots: std::collections::BTreeMap<String, Vec<Vec<ravencl_core::replay::BufferRow>>> =
        Default::default();
    let mut roots = vec![args.dir.clone()];
    roots.push(args.dir.join("sweep"));
    for root in roots {
        if !root.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&root)? {
            let perm_dir = entry?.path();
            if !perm_dir.is_dir()
                || !perm_dir.file_name().and_then(|n| n.to_str()).unwrap_or("").starts_with("perm")
            {
                continue;
            }
            for learner_entry in std::fs::read_dir(&perm_dir)? {
                let run_dir = learner_entry?.path();
                let buf_path = run_dir.join("buffer.csv");
                if !buf_path.exists() {
                    continue;
                }
                let label =
                    run_dir.file_name().and_then(|n| n.to_str()).unwrap_or("unknown").to_string();
                snapshots.entry(label).or_default().push(read_buffer_csv(&buf_path)?);
            }
        }
    }
    if snapshots.is_empty() {
        bail!("no buffer snapshots under {}", args.dir.display());
    }
    std::fs::create_dir_all(&out)?;
    for (label, perms) in &snapshots {
        let mut merged: std::collections::BTreeMap<(usize, u64), f64> = Default::default();
        for rows in perms {
            for (task, bins) in replay_histogram(rows) {
                for (count, n) in bins {
                    *merged.entry((task, count)).or_default() += n as f64 / perms.len() as f64;
                }
            }
        }
        let mut csv = String::from("task_id,replay_count,n_samples\n");
        for ((task, count), n) in merged {
            csv.push_str(&format!("{task},{count},{n}\n"));
        }
        std::fs::write(out.join(format!("{label}.csv")), csv)?;
    }
    println!("histograms for {} policies written to {}", snapshots.len(), out.display());
    Ok(())
}
