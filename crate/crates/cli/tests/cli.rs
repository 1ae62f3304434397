use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_CONFIG: &str = r#"{
  "scenario": {"genes": 8, "samples": 20, "reference_cells_per_type": 30},
  "refinement": {"iters": 400},
  "synthetic": {"samples": 200},
  "train": {"max_epochs": 40},
  "report": {"ig_steps": 50}
}"#;

fn diagno(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diagno"))
        .args(args)
        .env("DIAGNO_LLM_URL", "")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = diagno(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs every subcommand into `root` and returns the output directories.
fn pipeline(root: &Path, threads: &str) -> Vec<PathBuf> {
    let cfg = root.join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let dir = |n: &str| root.join(n);
    let base = |n: &str| {
        vec![
            "--config".to_string(),
            s(&cfg).to_string(),
            "--seed".to_string(),
            "7".to_string(),
            "--threads".to_string(),
            threads.to_string(),
            "--out".to_string(),
            s(&dir(n)).to_string(),
        ]
    };
    let run = |n: &str, rest: &[&str]| {
        let mut a = base(n);
        a.extend(rest.iter().map(|x| x.to_string()));
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    };
    let p = |n: &str, f: &str| s(&dir(n).join(f)).to_string();

    run("sim", &["simulate"]);
    run(
        "sel",
        &["select-genes", "--reference", &p("sim", "reference.tsv"), "--labels", &p("sim", "reference_labels.json")],
    );
    run(
        "dec",
        &[
            "deconvolve",
            "--bulk",
            &p("sim", "bulk.tsv"),
            "--metas",
            &p("sim", "metas.json"),
            "--reference",
            &p("sim", "reference.tsv"),
            "--labels",
            &p("sim", "reference_labels.json"),
        ],
    );
    run(
        "eval",
        &[
            "eval",
            "--estimate",
            &p("dec", "cts"),
            "--truth",
            &p("sim", "truth"),
            "--bulk",
            &p("sim", "bulk.tsv"),
            "--metas",
            &p("sim", "metas.json"),
        ],
    );

    // Every gene of the simulated cohort gets one shared eQTL record.
    let eqtl = root.join("eqtl.tsv");
    let mut text = String::from("gene\tbeta\tse\tpval\n");
    for g in 0..8 {
        text.push_str(&format!("gene{g:02}\t{}\t0.05\t0.2\n", 0.01 * (g as f64 - 3.5)));
    }
    fs::write(&eqtl, text).unwrap();
    let all_pairs = root.join("all_pairs.json");
    let diag: Value = serde_json::from_str(&fs::read_to_string(dir("sel").join("selection.json")).unwrap()).unwrap();
    fs::write(&all_pairs, serde_json::to_string(&diag).unwrap()).unwrap();
    run(
        "feat",
        &["build-features", "--cts", &p("dec", "cts"), "--selection", s(&all_pairs), "--eqtl", s(&eqtl)],
    );

    run("clin", &["simulate", "--kind", "clinical"]);
    run("train", &["train", "--features", &p("clin", "features.tsv")]);
    run("attr", &["attribute", "--model", &p("train", "model.json"), "--features", &p("clin", "features.tsv")]);
    run(
        "report",
        &[
            "report",
            "--model",
            &p("train", "model.json"),
            "--features",
            &p("clin", "features.tsv"),
            "--sample",
            "p0003",
            "--audience",
            "patient",
            "--strategy",
            "step",
            "--offline",
        ],
    );
    run("conf", &["simulate", "--kind", "conflict"]);
    run("train2", &["train", "--features", &p("conf", "features.tsv")]);
    run(
        "div",
        &["diverge", "--model", &p("train2", "model.json"), "--features", &p("conf", "features.tsv"), "--offline"],
    );
    [
        "sim", "sel", "dec", "eval", "feat", "clin", "train", "attr", "report", "conf", "train2", "div",
    ]
    .iter()
    .map(|n| dir(n))
    .collect()
}

/// File contents keyed by name; manifests lose their timestamp and any
/// absolute path, which differ between runs by construction.
fn snapshot(dir: &Path, root: &Path) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut text = fs::read_to_string(&path).unwrap();
        if name == "manifest.json" {
            let mut v: Value = serde_json::from_str(&text).unwrap();
            v["timestamp"] = Value::Null;
            text = v.to_string().replace(s(root), "<root>");
        }
        m.insert(name, text);
    }
    m
}

#[test]
fn every_command_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = pipeline(a.path(), "1");
    let db = pipeline(b.path(), "4");
    for (x, y) in da.iter().zip(&db) {
        let sx = snapshot(x, a.path());
        let sy = snapshot(y, b.path());
        assert_eq!(sx.keys().collect::<Vec<_>>(), sy.keys().collect::<Vec<_>>());
        for (k, v) in &sx {
            assert!(v == &sy[k], "{} differs between thread counts", x.join(k).display());
        }
        let manifest: Value = serde_json::from_str(&sx["manifest.json"]).unwrap();
        assert_eq!(manifest["status"], "succeeded");
    }
}

#[test]
fn manifest_lists_output_digests() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    ok(&["--seed", "3", "--out", s(&out), "simulate", "--kind", "clinical"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"][0]["path"], "features.tsv");
    let digest = m["outputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(diagno(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(diagno(&["train"]).status.code(), Some(1));
    assert_eq!(diagno(&["--threads", "0", "simulate"]).status.code(), Some(1));
    assert_eq!(diagno(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_error_exits_one_and_records_failure() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let bad = t.path().join("bad.tsv");
    fs::write(&bad, "sample\tx\nA\tnot-a-number\n").unwrap();
    let r = diagno(&["--out", s(&out), "train", "--features", s(&bad)]);
    assert_eq!(r.status.code(), Some(1));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().is_some());

    let r = diagno(&["--out", s(&out), "train", "--features", s(&t.path().join("missing.tsv"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bad_config_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"scenario": {"genez": 3}}"#).unwrap();
    let out = t.path().join("o");
    let r = diagno(&["--config", s(&cfg), "--out", s(&out), "simulate"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn runtime_error_exits_two() {
    let t = tempfile::tempdir().unwrap();
    // The output directory is a regular file, so nothing can be written.
    let out = t.path().join("file");
    fs::write(&out, "x").unwrap();
    let r = diagno(&["--out", s(&out), "simulate", "--kind", "clinical"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn offline_report_without_endpoint_warns_and_renders() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let dir = |n: &str| root.join(n);
    ok(&["--seed", "5", "--out", s(&dir("clin")), "simulate", "--kind", "clinical"]);
    let features = dir("clin").join("features.tsv");
    ok(&["--seed", "5", "--out", s(&dir("train")), "train", "--features", s(&features)]);
    let model = dir("train").join("model.json");
    let ranges = root.join("ranges.json");
    fs::write(&ranges, r#"{"ldl": {"low": 50, "high": 130, "unit": "mg/dL"}}"#).unwrap();
    // No endpoint in the environment: the report still comes out, with a warning.
    ok(&[
        "--out",
        s(&dir("rep")),
        "report",
        "--model",
        s(&model),
        "--features",
        s(&features),
        "--sample",
        "p0001",
        "--ranges",
        s(&ranges),
    ]);
    let rep: Value = serde_json::from_str(&fs::read_to_string(dir("rep").join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["generator"], "offline");
    assert!(rep["warnings"][0].as_str().unwrap().contains("offline"));
    let md = fs::read_to_string(dir("rep").join("report.md")).unwrap();
    assert!(md.contains("Decision: **"));
    let prompt = fs::read_to_string(dir("rep").join("prompt.txt")).unwrap();
    assert!(prompt.ends_with("DECISION: <AD|nonAD>\n") || prompt.trim_end().ends_with("DECISION: <AD|nonAD>"));

    let r = diagno(&[
        "--out",
        s(&dir("rep2")),
        "report",
        "--model",
        s(&model),
        "--features",
        s(&features),
        "--sample",
        "nobody",
        "--offline",
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn deconvolve_reports_convergence() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let cfg = root.join("c.json");
    fs::write(&cfg, r#"{"scenario": {"genes": 4, "samples": 15}, "refinement": {"iters": 300}}"#).unwrap();
    let sim = root.join("sim");
    ok(&["--config", s(&cfg), "--seed", "2", "--out", s(&sim), "simulate"]);
    let dec = root.join("dec");
    ok(&[
        "--config",
        s(&cfg),
        "--seed",
        "2",
        "--out",
        s(&dec),
        "deconvolve",
        "--bulk",
        s(&sim.join("bulk.tsv")),
        "--metas",
        s(&sim.join("metas.json")),
        "--reference",
        s(&sim.join("reference.tsv")),
        "--labels",
        s(&sim.join("reference_labels.json")),
    ]);
    let d: Value = serde_json::from_str(&fs::read_to_string(dec.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(d["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(d["selected_pairs"], 12);
    assert!(d["max_rhat"].as_f64().unwrap() < 1.05);
    assert_eq!(d["converged"], true);
    for f in ["cts.mean.tsv", "cts.variance.tsv", "rhat.tsv", "inferred.tsv"] {
        assert!(dec.join(f).exists(), "{f}");
    }
}
