use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shdp")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn pair_is_reproducible_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let run = shdp(&["pair", "--repeats", "12", "--seed", "3", "--out", path(out)]);
        assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("repeat,kl_shdp,kl_hdp,skipped"));
    assert_eq!(lines.count(), 12);
    let m = manifest(&dir.path().join("a.manifest.json"));
    assert_eq!(m["command"], "pair");
    assert_eq!(m["seed"], 3);
    assert!(m["error"].is_null());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(shdp(&["--threads", "1", "pair", "--repeats", "8", "--out", path(&a)]).status.code(), Some(0));
    assert_eq!(shdp(&["pair", "--threads", "3", "--repeats", "8", "--out", path(&b)]).status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn invalid_parameters_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let zero = shdp(&["pair", "--repeats", "0", "--out", path(&out)]);
    assert_eq!(zero.status.code(), Some(2));
    assert!(stderr(&zero).contains("repeats"), "{}", stderr(&zero));
    let reversed = shdp(&["sweep", "--bound-min", "5", "--bound-max", "1", "--out", path(&out)]);
    assert_eq!(reversed.status.code(), Some(2));
    assert_eq!(shdp(&["pair", "--bound", "-1", "--out", path(&out)]).status.code(), Some(2));
    assert_eq!(shdp(&["pair", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(shdp(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_grid_with_half_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let run = shdp(&["sweep", "--repeats", "3", "--bound-step", "0.5", "--out", path(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 19);
    assert!(rows[0].starts_with("1,"));
    assert!(rows[18].starts_with("10,"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"repeats": 5, "seed": 9, "alpha": 2.0}"#).unwrap();
    let out = dir.path().join("pair.csv");
    let run = shdp(&["pair", "--config", path(&config), "--repeats", "4", "--out", path(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
    let m = manifest(&dir.path().join("pair.manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["alpha"], 2.0);
    assert_eq!(m["config"]["repeats"], 4);

    fs::write(&config, r#"{"repeat": 5}"#).unwrap();
    assert_eq!(shdp(&["pair", "--config", path(&config)]).status.code(), Some(2));
}

#[test]
fn timeseries_single_phase_and_single_particle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ts.csv");
    let common = ["--obs", "10", "--sweeps", "2", "--truncation", "12", "--out", path(&out)];

    let mut args = vec!["timeseries", "--phases", "1", "--particles", "5"];
    args.extend(common);
    let run = shdp(&args);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "phase,succ_kl_shdp,succ_kl_hdp,dist_truth_shdp,dist_truth_hdp");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,,,"), "{}", lines[1]);
    assert!(dir.path().join("ts.shdp-diagnostics.jsonl").exists());

    let mut args = vec!["timeseries", "--phases", "3", "--particles", "1"];
    args.extend(common);
    let run = shdp(&args);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    assert!(stderr(&run).to_lowercase().contains("warning"), "{}", stderr(&run));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);
}

#[test]
fn fit_rejects_bad_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.json");
    let out = dir.path().join("fit");
    let fit = |extra: &[&str]| {
        let mut args = vec!["fit", "--corpus", path(&corpus), "--out", path(&out)];
        args.extend(extra);
        shdp(&args)
    };

    fs::write(&corpus, r#"[{"phase": 1990, "keywords": ["a", "b"]}]"#).unwrap();
    assert_eq!(fit(&[]).status.code(), Some(1));

    fs::write(&corpus, "[\n{\"phase\": 1990, \"keywords\": [\"a\"]},\n{\"phase\": \"x\", \"keywords\": [\"a\"]}\n]").unwrap();
    let run = fit(&[]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("line 3"), "{}", stderr(&run));

    let docs: Vec<String> = (0..6)
        .map(|i| {
            let word = if i < 3 { "left" } else { "right" };
            format!(r#"{{"phase": {}, "keywords": ["{word}"]}}"#, 1990 + i % 2)
        })
        .collect();
    fs::write(&corpus, format!("[{}]", docs.join(","))).unwrap();
    let run = fit(&["--dim", "2"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).to_lowercase().contains("component"), "{}", stderr(&run));

    let both = shdp(&["fit", "--synthetic", "--corpus", path(&corpus), "--out", path(&out)]);
    assert_eq!(both.status.code(), Some(2));
    assert_eq!(shdp(&["fit", "--out", path(&out)]).status.code(), Some(2));
}

#[test]
fn fit_synthetic_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let run = shdp(&[
        "fit",
        "--synthetic",
        "--phases",
        "3",
        "--docs-per-phase",
        "6",
        "--dim",
        "3",
        "--particles",
        "10",
        "--sweeps",
        "2",
        "--truncation",
        "12",
        "--similarity",
        "jaccard",
        "--out",
        path(&out),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    for name in [
        "trajectories.csv",
        "successive_kl.csv",
        "measures.json",
        "shdp-diagnostics.jsonl",
        "hdp-diagnostics.jsonl",
        "manifest.json",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let succ = fs::read_to_string(out.join("successive_kl.csv")).unwrap();
    assert_eq!(succ.lines().count(), 3);
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["options"]["similarity"], "jaccard");
    assert_eq!(m["command"], "fit");
}

#[test]
fn check_passes_and_detects_an_injected_violation() {
    let run = shdp(&["check", "--grid-size", "3", "--samples", "300", "--draws", "20"]);
    assert_eq!(run.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&run.stdout), stderr(&run));
    let run = shdp(&["check", "--grid-size", "1", "--samples", "100", "--draws", "20", "--inject-violation"]);
    assert_eq!(run.status.code(), Some(1));
}
