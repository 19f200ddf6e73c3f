//! The command-line surface: five subcommands over one configuration
//! format, writing results into a run directory.
//!
//! Exit codes: 0 success, 2 usage errors (unknown flags, missing
//! arguments), 3 configuration errors, 1 anything else. `cli_main`
//! takes argv and returns the code, so tests drive it in process.

use crate::bench::{export_attentiveness_ranks, sweep_drop_ratio};
use crate::config::{RunConfig, KEY_DOCS};
use crate::graph::write_tu_dataset;
use crate::model::{dotin_forward, ForwardCtx, ParameterStore, StagePlan};
use crate::report;
use crate::tensor::Tape;
use crate::trainer::{evaluate, run_cross_validation, train, MetricRow};
use crate::{Error, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "taskdrop", version, about = "Graph learning with task-aware node dropping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Cross-validate, then train on the full dataset and save a checkpoint.
    Train(TrainArgs),
    /// Score a saved checkpoint on the configured dataset.
    Eval(EvalArgs),
    /// Sweep drop ratios against the random-drop and no-drop baselines.
    Bench(BenchArgs),
    /// Export attentiveness ranks or drop plans from a checkpoint.
    Analyze(AnalyzeArgs),
    /// Generate the configured dataset and write it out in TU format.
    MakeData(MakeDataArgs),
}

#[derive(clap::Args, Debug)]
struct CommonArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.name.
    #[arg(long)]
    run_name: Option<String>,
    /// Root for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override bench.ratios, e.g. 0.1,0.5,0.9.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write attentiveness.csv: per-task node ranks plus their rank
    /// correlation (needs at least two tasks).
    #[arg(long)]
    export_attentiveness: bool,
    /// Write plans.csv: every executed drop stage in evaluation mode.
    #[arg(long)]
    export_plans: bool,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct MakeDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for the TU file family.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

fn keys_doc() -> String {
    let mut out = String::from("Configuration keys (one `key = value` per line, `#` comments):\n");
    for (key, doc) in KEY_DOCS {
        let _ = writeln!(out, "  {key:<22} {doc}");
    }
    out
}

pub fn cli_main(argv: Vec<String>) -> i32 {
    let command = Cli::command().after_help(keys_doc());
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            // Help and version requests land here too; they are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => run_train(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Bench(args) => run_bench(args),
        Cmd::Analyze(args) => run_analyze(args),
        Cmd::MakeData(args) => run_make_data(args),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set {kv:?}: expected key=value")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn run_dir(out: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out.join(&cfg.run_name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(name) = args.run_name {
        cfg.run_name = name;
    }
    let set = cfg.dataset()?;
    let spec = cfg.model_spec(set.feature_dim, set.classes)?;
    let tcfg = cfg.train_config()?;
    let dir = run_dir(&args.out, &cfg)?;
    std::fs::write(dir.join("config.cfg"), cfg.to_text())?;

    let rows = if cfg.folds >= 2 {
        let report = run_cross_validation(&spec, &set, &tcfg, cfg.folds)?;
        print!("{}", report::summary_text(&report));
        report.rows
    } else {
        Vec::new()
    };

    // The checkpoint comes from a final pass over the whole dataset.
    let mut store = ParameterStore::init(&spec, tcfg.seed)?;
    let trace = train(&spec, &mut store, &set.graphs, &tcfg)?;
    let mut all_rows = rows;
    all_rows.extend(trace.epoch_losses.iter().enumerate().map(|(e, &v)| MetricRow {
        fold: cfg.folds,
        epoch: Some(e),
        task: "all".into(),
        metric: "final_train_loss".into(),
        value: v,
    }));
    report::write_metric_rows(&dir.join("report.csv"), &all_rows)?;
    store.save(&dir.join("checkpoint.bin"))?;
    println!(
        "trained {} epochs on {} graphs; run directory: {}",
        trace.epochs_run,
        set.len(),
        dir.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let set = cfg.dataset()?;
    let spec = cfg.model_spec(set.feature_dim, set.classes)?;
    let tcfg = cfg.train_config()?;
    let store = ParameterStore::load(&args.checkpoint)?;
    store.assert_layout(&spec)?;
    let metrics = evaluate(&spec, &store, &set.graphs, &tcfg)?;
    for (name, value) in &metrics {
        println!("{name} = {value}");
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(ratios) = args.ratios {
        cfg.bench_ratios = ratios;
    }
    if let Some(name) = args.run_name {
        cfg.run_name = name;
    }
    let set = cfg.dataset()?;
    let spec = cfg.model_spec(set.feature_dim, set.classes)?;
    let tcfg = cfg.train_config()?;
    let records = sweep_drop_ratio(&spec, &set, &tcfg, &cfg.ratios()?)?;
    let dir = run_dir(&args.out, &cfg)?;
    report::write_bench_records(&dir.join("bench.csv"), &records)?;
    for r in &records {
        println!(
            "{} ratio={} accuracy={:.4} batches/sec={:.2} flops/batch={}",
            r.strategy, r.ratio, r.accuracy, r.batches_per_sec, r.flops_per_batch
        );
    }
    println!("wrote {}", dir.join("bench.csv").display());
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    if !args.export_attentiveness && !args.export_plans {
        return Err(Error::Config(
            "analyze does nothing without --export-attentiveness or --export-plans".into(),
        ));
    }
    let mut cfg = load_config(&args.common)?;
    if let Some(name) = args.run_name {
        cfg.run_name = name;
    }
    let set = cfg.dataset()?;
    let spec = cfg.model_spec(set.feature_dim, set.classes)?;
    let store = ParameterStore::load(&args.checkpoint)?;
    store.assert_layout(&spec)?;
    let dir = run_dir(&args.out, &cfg)?;
    if args.export_attentiveness {
        let export = export_attentiveness_ranks(&spec, &store, &set.graphs)?;
        report::write_attentiveness(&dir.join("attentiveness.csv"), &export)?;
        println!(
            "wrote {} ({} rows, mean spearman {:.4})",
            dir.join("attentiveness.csv").display(),
            export.rows.len(),
            export.mean_spearman()
        );
    }
    if args.export_plans {
        let mut plans: Vec<Vec<StagePlan>> = Vec::with_capacity(set.len());
        for g in &set.graphs {
            let mut tape = Tape::new();
            let vars = store.leafs(&mut tape, &spec)?;
            let out = dotin_forward(&mut tape, &spec, &vars, g, &ForwardCtx::eval())?;
            plans.push(out.plans);
        }
        report::write_drop_plans(&dir.join("plans.csv"), &plans)?;
        println!("wrote {}", dir.join("plans.csv").display());
    }
    Ok(())
}

fn run_make_data(args: MakeDataArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let set = cfg.dataset()?;
    std::fs::create_dir_all(&args.out)?;
    let name = if cfg.data_name.is_empty() {
        set.name.clone()
    } else {
        cfg.data_name.clone()
    };
    write_tu_dataset(&set, &args.out, &name)?;
    report::write_graphset_summary(&args.out.join(format!("{name}_summary.csv")), &set)?;
    println!(
        "wrote {} graphs as {} under {}",
        set.len(),
        name,
        args.out.display()
    );
    Ok(())
}
