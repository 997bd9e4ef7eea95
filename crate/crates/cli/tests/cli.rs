//! End-to-end runs of the `ratlab` binary on a tiny corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ratlab"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawning ratlab");
    assert!(
        out.status.success(),
        "ratlab {:?} failed\nstdout:\n{}\nstderr:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawning ratlab");
    assert!(
        !out.status.success(),
        "ratlab {:?} unexpectedly succeeded\nstdout:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {}", path.display(), e))
}

/// Tiny corpus plus a quickly trained bundle; the foundation every test
/// case builds on.
fn corpus_and_model(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let data_s = data.to_str().unwrap().to_string();
    run_ok(&[
        "gen-data",
        "--out",
        &data_s,
        "--train-docs",
        "60",
        "--dev-docs",
        "16",
        "--test-docs",
        "16",
        "--vocab",
        "160",
        "--cues-per-class",
        "8",
        "--dim",
        "8",
        "--sentences-per-doc",
        "2",
        "--tokens-per-sentence",
        "8",
        "--seed",
        "3",
    ]);
    for f in ["embeddings.txt", "train.jsonl", "dev.jsonl", "test.jsonl", "config.json"] {
        assert!(data.join(f).is_file(), "gen-data left no {}", f);
    }
    let runs = root.join("runs");
    run_ok(&[
        "train",
        "--data",
        &data_s,
        "--out",
        runs.to_str().unwrap(),
        "--run-name",
        "m0",
        "--variant",
        "rnp",
        "--hidden",
        "10",
        "--window",
        "1",
        "--lr",
        "0.05",
        "--gamma",
        "0.2",
        "--lambda",
        "3",
        "--batch-size",
        "16",
        "--max-epochs",
        "4",
        "--patience",
        "2",
        "--seed",
        "0",
    ]);
    let model = runs.join("m0").join("model.json");
    assert!(model.is_file(), "train left no checkpoint");
    let history = read(&runs.join("m0").join("history.csv"));
    assert!(history.starts_with("epoch,train_loss,dev_acc\n"));
    assert!(history.lines().count() >= 2, "history has no epochs:\n{}", history);
    (data, model)
}

#[test]
fn pipeline_attack_rerun_evaluate() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (data, model) = corpus_and_model(tmp.path());
    let runs = tmp.path().join("runs");
    let data_s = data.to_str().unwrap();
    let model_s = model.to_str().unwrap();
    let runs_s = runs.to_str().unwrap();

    let attack_args = [
        "attack",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "atk",
        "--groups",
        "1",
        "--tokens-per-group",
        "2",
        "--candidates",
        "4",
        "--rounds",
        "2",
        "--stop-patience",
        "2",
        "--search-batch",
        "8",
        "--seeds",
        "0,1",
        "--report-samples",
        "3",
    ];
    let stdout = run_ok(&attack_args);
    assert!(stdout.contains("seed 0:"), "attack stdout:\n{}", stdout);
    let atk = runs.join("atk");
    for f in [
        "config.json",
        "triggers-seed0.json",
        "triggers-seed1.json",
        "trace-seed0.csv",
        "metrics-seed0.csv",
        "metrics-seed1.csv",
        "metrics-mean.csv",
        "samples-seed0.jsonl",
        "report-seed0.txt",
        "report-seed0.html",
    ] {
        assert!(atk.join(f).is_file(), "attack run left no {}", f);
    }
    let mean = read(&atk.join("metrics-mean.csv"));
    assert!(mean.starts_with("section,metric,mean,seeds\n"));
    assert!(mean.contains("accuracy,acc_clean,"), "mean table:\n{}", mean);
    let trace = read(&atk.join("trace-seed0.csv"));
    assert!(trace.starts_with("round,loss_before,loss_after,replacements\n"));

    // Every text report line parses back through the marker grammar.
    let report = read(&atk.join("report-seed0.txt"));
    assert!(report.starts_with("# doc 0:"), "report:\n{}", report);
    for line in report.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        ratlab_core::report::parse_text(line)
            .unwrap_or_else(|e| panic!("report line does not parse: {}\n{}", e, line));
    }

    // Replaying the frozen config reproduces every numeric artifact
    // bit-identically.
    run_ok(&[
        "rerun",
        "--config",
        atk.join("config.json").to_str().unwrap(),
        "--run-name",
        "atk2",
    ]);
    let atk2 = runs.join("atk2");
    for f in [
        "triggers-seed0.json",
        "triggers-seed1.json",
        "trace-seed0.csv",
        "trace-seed1.csv",
        "metrics-seed0.csv",
        "metrics-seed1.csv",
        "metrics-mean.csv",
    ] {
        assert_eq!(
            read(&atk.join(f)),
            read(&atk2.join(f)),
            "rerun differs in {}",
            f
        );
    }

    // Scoring the saved trigger set reproduces the per-seed table.
    run_ok(&[
        "evaluate",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "ev",
        "--triggers",
        atk.join("triggers-seed0.json").to_str().unwrap(),
    ]);
    assert_eq!(
        read(&atk.join("metrics-seed0.csv")),
        read(&runs.join("ev").join("metrics.csv")),
        "evaluate disagrees with the attack run on the same triggers"
    );

    // Literal hand-written groups.
    run_ok(&[
        "evaluate",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "ev2",
        "--group",
        "pos0 neg0",
        "--positions",
        "-1",
    ]);
    let ev2 = runs.join("ev2");
    assert!(ev2.join("metrics.csv").is_file());
    assert!(read(&ev2.join("report.txt")).contains("{{T"), "trigger markers missing");
}

#[test]
fn ablate_grid_and_sweep_cells() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (data, model) = corpus_and_model(tmp.path());
    let runs = tmp.path().join("runs");
    let data_s = data.to_str().unwrap();
    let model_s = model.to_str().unwrap();
    let runs_s = runs.to_str().unwrap();

    run_ok(&[
        "ablate",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "abl",
        "--groups",
        "1",
        "--tokens-per-group",
        "1",
        "--candidates",
        "2",
        "--rounds",
        "1",
        "--stop-patience",
        "1",
        "--search-batch",
        "4",
    ]);
    let ablation = read(&runs.join("abl").join("ablation.csv"));
    assert_eq!(
        ablation.lines().count(),
        10,
        "expected header + 9 cells:\n{}",
        ablation
    );
    for needle in ["mse,kd_tree,", "mae,random,", "mse_z,hot_flip,"] {
        assert!(ablation.contains(needle), "missing {} in:\n{}", needle, ablation);
    }

    let out = bin()
        .args([
            "sweep",
            "--data",
            data_s,
            "--model",
            model_s,
            "--out",
            runs_s,
            "--run-name",
            "sw",
            "--cell",
            "1-2",
            "--cell",
            "2[0,-1]-1",
            "--cell",
            "7-3",
            "--cell",
            "junk",
            "--candidates",
            "2",
            "--rounds",
            "1",
            "--stop-patience",
            "1",
            "--search-batch",
            "4",
        ])
        .output()
        .expect("spawning ratlab");
    assert!(
        out.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("skipping") && stderr.contains("7-3") && stderr.contains("junk"),
        "expected skip warnings, got:\n{}",
        stderr
    );
    let sweep = read(&runs.join("sw").join("sweep.csv"));
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "sweep table:\n{}", sweep);
    assert!(rows[0].starts_with("1-2,1,2,0,"), "first row: {}", rows[0]);
    assert!(rows[1].starts_with("2[0,-1]-1,2,1,0 -1,"), "second row: {}", rows[1]);
    assert!(runs.join("sw").join("triggers-2[0,-1]-1.json").is_file());
}

#[test]
fn transfer_and_error_surfacing() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (data, model) = corpus_and_model(tmp.path());
    let runs = tmp.path().join("runs");
    let data_s = data.to_str().unwrap();
    let model_s = model.to_str().unwrap();
    let runs_s = runs.to_str().unwrap();

    run_ok(&[
        "train",
        "--data",
        data_s,
        "--out",
        runs_s,
        "--run-name",
        "m1",
        "--variant",
        "fr",
        "--hidden",
        "10",
        "--window",
        "1",
        "--lr",
        "0.05",
        "--gamma",
        "0.2",
        "--lambda",
        "3",
        "--batch-size",
        "16",
        "--max-epochs",
        "3",
        "--patience",
        "2",
        "--seed",
        "9",
    ]);
    run_ok(&[
        "attack",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "atk",
        "--groups",
        "1",
        "--tokens-per-group",
        "2",
        "--candidates",
        "3",
        "--rounds",
        "1",
        "--stop-patience",
        "1",
        "--search-batch",
        "6",
        "--seeds",
        "0",
        "--report-samples",
        "2",
    ]);
    let triggers = runs.join("atk").join("triggers-seed0.json");
    run_ok(&[
        "transfer",
        "--data",
        data_s,
        "--source-model",
        model_s,
        "--target-model",
        runs.join("m1").join("model.json").to_str().unwrap(),
        "--triggers",
        triggers.to_str().unwrap(),
        "--out",
        runs_s,
        "--run-name",
        "tr",
    ]);
    let tr = runs.join("tr");
    let table = read(&tr.join("transfer.csv"));
    assert_eq!(table.lines().count(), 2, "transfer table:\n{}", table);
    assert!(tr.join("metrics-source-0.csv").is_file());
    assert!(tr.join("metrics-target-0.csv").is_file());

    // Errors surface with context and a nonzero exit.
    let stderr = run_err(&[
        "evaluate",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--triggers",
        runs.join("nothing.json").to_str().unwrap(),
    ]);
    assert!(
        stderr.contains("ratlab: error") && stderr.contains("nothing.json"),
        "stderr:\n{}",
        stderr
    );
    let stderr = run_err(&["train", "--data", runs.join("absent").to_str().unwrap(), "--out", runs_s]);
    assert!(stderr.contains("ratlab: error"), "stderr:\n{}", stderr);
    let stderr = run_err(&["rerun", "--config", data.join("train.jsonl").to_str().unwrap()]);
    assert!(stderr.contains("parsing"), "stderr:\n{}", stderr);

    // A run name refuses to overwrite an existing directory.
    let stderr = run_err(&[
        "evaluate",
        "--data",
        data_s,
        "--model",
        model_s,
        "--out",
        runs_s,
        "--run-name",
        "tr",
        "--group",
        "pos0",
        "--positions",
        "0",
    ]);
    assert!(stderr.contains("already exists"), "stderr:\n{}", stderr);
}
