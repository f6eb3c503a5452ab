use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrdistill"))
        .current_dir(dir)
        .env("CORRDISTILL_LOG", "error")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(
        dir,
        &["synth", "--out", "data", "--n-train", "12", "--n-val", "4", "--height", "8", "--width", "8", "--dim", "8", "--classes", "3"],
    );
}

const PROBES: [&str; 6] = ["--classes", "3", "--kmeans-steps", "40", "--linear-steps", "60"];

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["eval", "--out", "x.csv"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--threads", "0", "fit-rp", "--dim", "2", "--input-dim", "4", "--out", "rp.cdrp"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--preset", "imagenet", "fit-rp", "--dim", "2", "--input-dim", "4", "--out", "rp.cdrp"]).status.code(), Some(2));
}

#[test]
fn non_raw_eval_without_model_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = run(tmp.path(), &["eval", "--manifest", "data/manifest.jsonl", "--rep", "pca", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("e.csv").exists());
}

#[test]
fn missing_input_file_is_a_runtime_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--manifest", "nowhere.jsonl", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

#[test]
fn raw_eval_writes_metrics_and_run_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let args: Vec<&str> = ["eval", "--manifest", "data/manifest.jsonl", "--out", "eval.csv"].into_iter().chain(PROBES).collect();
    ok(tmp.path(), &args);
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1..].iter().any(|l| l.contains("cluster")) && lines[1..].iter().any(|l| l.contains("linear")));
    let run: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("eval.run.json")).unwrap()).unwrap();
    assert_eq!(run["seeds"], serde_json::json!([0]));
}

#[test]
fn ingest_builds_a_usable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for sub in ["tf", "tl", "vf", "vl"] {
        fs::create_dir(dir.join(sub)).unwrap();
    }
    for i in 0..16 {
        let (f, l) = if i < 12 { ("tf", "tl") } else { ("vf", "vl") };
        fs::copy(dir.join(format!("data/features/img{i:05}.cdfm")), dir.join(f).join(format!("im{i}.cdfm"))).unwrap();
        fs::copy(dir.join(format!("data/labels/img{i:05}.cdlm")), dir.join(l).join(format!("im{i}.cdlm"))).unwrap();
    }
    let ingest = ["ingest", "--features", "tf", "--labels", "tl", "--val-features", "vf", "--val-labels", "vl"];
    ok(dir, &[&ingest[..], &["--classes", "3", "--out", "out/m.jsonl"]].concat());
    let manifest = fs::read_to_string(dir.join("out/m.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 16);
    assert_eq!(manifest.lines().filter(|l| l.contains("\"val\"")).count(), 4);

    let args: Vec<&str> = ["eval", "--manifest", "out/m.jsonl", "--out", "e.csv"].into_iter().chain(PROBES).collect();
    ok(dir, &args);

    // labels outside the declared class range are rejected
    let out = run(dir, &[&ingest[..], &["--classes", "2", "--out", "bad.jsonl"]].concat());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_writes_merged_csv_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let m = "data/manifest.jsonl";
    let pca: Vec<&str> = ["sweep", "--manifest", m, "--rep", "pca", "--dims", "2,4", "--seeds", "0,1", "--out", "pca.csv"]
        .into_iter()
        .chain(PROBES)
        .collect();
    let rp: Vec<&str> = ["sweep", "--manifest", m, "--rep", "rp", "--dims", "2,4", "--out", "rp.csv"].into_iter().chain(PROBES).collect();
    ok(dir, &pca);
    ok(dir, &rp);
    ok(dir, &["fit-pca", "--manifest", m, "--dim", "8", "--variance-csv", "var.csv", "--out", "pca.cdpc"]);
    ok(dir, &["report", "--inputs", "pca.csv", "rp.csv", "--variance", "var.csv", "--out-dir", "rep"]);

    let merged = fs::read_to_string(dir.join("rep/metrics.csv")).unwrap();
    // header plus (2 dims x 2 seeds + 2 dims) x 2 probes
    assert_eq!(merged.lines().count(), 1 + 12);
    for probe in ["cluster", "linear"] {
        for metric in ["accuracy", "miou"] {
            let svg = fs::read_to_string(dir.join(format!("rep/{probe}_{metric}.svg"))).unwrap();
            assert_eq!(svg.matches("<polyline").count(), 2, "{probe}_{metric}");
        }
    }
    assert!(dir.join("rep/explained_variance.svg").exists());
}
