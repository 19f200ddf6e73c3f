//! Drives the command-line surface in process and checks the run
//! directory contracts: reproducible outputs, one record per sweep
//! cell, rank exports sized by the dataset, and the exit-code split
//! between usage errors, configuration errors, and everything else.

use std::fs;
use std::path::Path;
use taskdrop::cli::cli_main;
use taskdrop::config::RunConfig;

const TINY: &str = "\
synth.per_class = 6
synth.min_nodes = 8
synth.max_nodes = 12
model.layers = 2
model.hidden = 8
model.alpha = 0.3
train.epochs = 3
train.folds = 2
train.batch = 4
";

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["taskdrop".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli_main(argv)
}

fn write_cfg(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("runs").to_string_lossy().into_owned();

    for name in ["a", "b"] {
        let code = run(&[
            "train", "--config", &cfg, "--seed", "1", "--run-name", name, "--out", &out,
        ]);
        assert_eq!(code, 0);
    }
    let dir_a = tmp.path().join("runs/a");
    let dir_b = tmp.path().join("runs/b");
    for file in ["report.csv", "checkpoint.bin"] {
        assert!(dir_a.join(file).exists(), "missing {file}");
        assert_eq!(
            fs::read(dir_a.join(file)).unwrap(),
            fs::read(dir_b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
    // The stored configs differ only in the run name they were given.
    let saved = RunConfig::parse(&fs::read_to_string(dir_a.join("config.cfg")).unwrap()).unwrap();
    let mut other = RunConfig::parse(&fs::read_to_string(dir_b.join("config.cfg")).unwrap()).unwrap();
    other.run_name = "a".into();
    assert_eq!(saved, other);
    assert_eq!(saved.seed, 1);
    assert_eq!(saved.run_name, "a");

    let report = fs::read_to_string(dir_a.join("report.csv")).unwrap();
    assert!(report.starts_with("fold,epoch,task,metric,value\n"));
    assert!(report.contains("classification,accuracy"));
}

#[test]
fn bench_emits_one_record_per_ratio_and_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("runs").to_string_lossy().into_owned();

    let code = run(&[
        "bench", "--config", &cfg, "--ratios", "0.3,0.6", "--run-name", "sweep", "--out", &out,
        "--set", "train.epochs=2", "--set", "train.folds=0",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(tmp.path().join("runs/sweep/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3, "2 ratios x 3 strategies");

    let code = run(&[
        "bench", "--config", &cfg, "--ratios", "0", "--run-name", "zero", "--out", &out,
        "--set", "train.epochs=2",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(tmp.path().join("runs/zero/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "ratio 0 collapses to one no-drop record");
}

#[test]
fn analyze_exports_ranks_and_plans_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = format!("{TINY}tasks = classification,ged\ntrain.folds = 0\n");
    let cfg = write_cfg(tmp.path(), &cfg_text);
    let out = tmp.path().join("runs").to_string_lossy().into_owned();

    assert_eq!(
        run(&["train", "--config", &cfg, "--run-name", "two", "--out", &out]),
        0
    );
    let ckpt = tmp
        .path()
        .join("runs/two/checkpoint.bin")
        .to_string_lossy()
        .into_owned();
    let code = run(&[
        "analyze", "--config", &cfg, "--checkpoint", &ckpt, "--export-attentiveness",
        "--export-plans", "--run-name", "two", "--out", &out,
    ]);
    assert_eq!(code, 0);

    let nodes: usize = RunConfig::parse(&cfg_text)
        .unwrap()
        .dataset()
        .unwrap()
        .graphs
        .iter()
        .map(|g| g.node_count())
        .sum();
    let ranks = fs::read_to_string(tmp.path().join("runs/two/attentiveness.csv")).unwrap();
    assert_eq!(ranks.lines().count(), 1 + nodes, "one row per (graph, node)");
    assert!(ranks.starts_with("graph,node,rank_task1,rank_task2\n"));
    assert!(tmp.path().join("runs/two/plans.csv").exists());
}

#[test]
fn eval_scores_a_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = format!("{TINY}train.folds = 0\n");
    let cfg = write_cfg(tmp.path(), &cfg_text);
    let out = tmp.path().join("runs").to_string_lossy().into_owned();
    assert_eq!(
        run(&["train", "--config", &cfg, "--run-name", "e", "--out", &out]),
        0
    );
    let ckpt = tmp
        .path()
        .join("runs/e/checkpoint.bin")
        .to_string_lossy()
        .into_owned();
    assert_eq!(run(&["eval", "--config", &cfg, "--checkpoint", &ckpt]), 0);
}

#[test]
fn make_data_output_feeds_back_through_the_tu_source() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = format!("{TINY}data.name = smoke\ntrain.folds = 0\n");
    let cfg = write_cfg(tmp.path(), &cfg_text);
    let data = tmp.path().join("data").to_string_lossy().into_owned();
    let out = tmp.path().join("runs").to_string_lossy().into_owned();

    assert_eq!(run(&["make-data", "--config", &cfg, "--out", &data]), 0);
    for file in [
        "smoke_A.txt",
        "smoke_graph_indicator.txt",
        "smoke_graph_labels.txt",
        "smoke_summary.csv",
    ] {
        assert!(tmp.path().join("data").join(file).exists(), "missing {file}");
    }
    let code = run(&[
        "train", "--config", &cfg, "--run-name", "tu", "--out", &out,
        "--set", "data.source=tu", "--set", &format!("data.dir={data}"),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn usage_and_config_errors_use_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);

    assert_eq!(run(&["train", "--bogus-flag"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train", "--config", &cfg, "--set", "nope=1"]), 3);
    assert_eq!(run(&["train", "--config", &cfg, "--set", "malformed"]), 3);
    assert_eq!(
        run(&["analyze", "--config", &cfg, "--checkpoint", "x.bin"]),
        3,
        "analyze without an export selection is a configuration error"
    );
    let missing = tmp.path().join("absent.bin").to_string_lossy().into_owned();
    assert_eq!(
        run(&[
            "eval", "--config", &cfg, "--checkpoint", &missing,
        ]),
        1,
        "runtime failures are neither usage nor configuration errors"
    );

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "what even is this\n").unwrap();
    assert_eq!(
        run(&["train", "--config", &bad.to_string_lossy()]),
        3
    );
}
