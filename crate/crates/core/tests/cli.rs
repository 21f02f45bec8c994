use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmc(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cmc"));
    c.args(args).env_remove("CMC_SEED").env_remove("CMC_WORKERS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn validate_before_attribute_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert!(cmc(&["synthesize", "--out", &out], &[]).status.success());
    let o = cmc(&["validate", "--out", &out], &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("edge_scores.csv"));
}

#[test]
fn usage_errors_exit_2_with_json() {
    let o = cmc(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = cmc(&["synthesize", "--out", &out, "--tau", "-1"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = cmc(&["synthesize", "--out", &out, "--alpha-grid", "0.5,1.5"], &[]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"tua": 2}"#).unwrap();
    let o = cmc(&["synthesize", "--out", &out, "--config", &cfg.display().to_string()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("tua"));
}

#[test]
fn full_run_artifacts_and_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = cmc(&["run", "--out", &out, "--alpha-grid", "0.2,0.5,0.8"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = dir.path();

    let heat = lines(&d.join("heatmap.csv"));
    assert_eq!(heat[0], "layer,component,score");
    assert_eq!(heat.len() - 1, 4 * (4 + 1));

    let faith = lines(&d.join("faithfulness.csv"));
    assert_eq!(faith[0], "k,pct");
    assert!(faith[1].starts_with("1,"));
    let last: Vec<&str> = faith.last().unwrap().split(',').collect();
    assert_eq!(last[0], "479");
    assert!((last[1].parse::<f64>().unwrap() - 100.0).abs() < 1e-6);

    let sweep = lines(&d.join("sweep.csv"));
    assert_eq!(sweep.len() - 1, 3 + 1);
    assert!(sweep[1].starts_with("0,"));

    let rel = lines(&d.join("reliability.csv"));
    assert_eq!(rel.len() - 1, 10);

    let comps = lines(&d.join("components.csv"));
    assert_eq!(comps.len() - 1, 20);
    let top: Vec<&str> = comps[1..3].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert!(top.contains(&"a1.h2") && top.contains(&"m2"), "{top:?}");

    for cmd in ["synthesize", "attribute", "validate", "intervene", "calibrate", "report"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("{cmd}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["command"], cmd);
        assert_eq!(m["seed"], 0);
        for f in m["outputs"].as_array().unwrap() {
            let p = Path::new(f["path"].as_str().unwrap());
            assert!(p.is_file(), "{p:?}");
            let digest = cmc::io::sha256_file(p).unwrap();
            assert_eq!(f["sha256"], digest.as_str());
        }
    }
    let plan: cmc::intervention::InterventionPlan =
        serde_json::from_str(&fs::read_to_string(d.join("plan_steering.json")).unwrap()).unwrap();
    assert!(plan.alpha.is_some());
    assert_eq!(plan.targets.len(), 10);
}

#[test]
fn seed_env_and_flag_precedence() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(cmc(&["synthesize", "--out", &out_arg(a.path())], &[("CMC_SEED", "5")]).status.success());
    assert!(cmc(&["synthesize", "--out", &out_arg(b.path()), "--seed", "5"], &[]).status.success());
    assert!(cmc(&["synthesize", "--out", &out_arg(c.path()), "--seed", "5"], &[("CMC_SEED", "6")]).status.success());
    let recs = |d: &Path| fs::read(d.join("records.jsonl")).unwrap();
    assert_eq!(recs(a.path()), recs(b.path()));
    assert_eq!(recs(b.path()), recs(c.path()));
    let d = tempfile::tempdir().unwrap();
    assert!(cmc(&["synthesize", "--out", &out_arg(d.path())], &[]).status.success());
    assert_ne!(recs(a.path()), recs(d.path()));
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, w) in [(&a, "1"), (&b, "4")] {
        let o = cmc(&["run", "--out", &out_arg(d.path()), "--alpha-grid", "0.5"], &[("CMC_WORKERS", w)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".manifest.json"))
        .collect();
    names.sort();
    assert!(names.len() >= 18);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n}");
    }
}

const LINE: &str = r#"{"question":"q0 q1","model_answer":"e3","gold_answer":"e4","correct":false,"confidence":90,"source":"x"}"#;

#[test]
fn calibrate_external_records_flags_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("in.jsonl");
    let bad = LINE.replace(":90", ":120");
    fs::write(&recs, format!("{LINE}\n{bad}\n{LINE}\n")).unwrap();
    let out = dir.path().join("out");
    let o = cmc(
        &["calibrate", "--out", &out_arg(&out), "--records", &recs.display().to_string(), "--bins", "5"],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(v["records"], 2);
    assert_eq!(v["invalid_lines"][0]["line"], 2);
    // both records: confidence 0.9, wrong
    assert!((v["ece"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(lines(&out.join("reliability.csv")).len() - 1, 5);
}

#[test]
fn mostly_malformed_records_abort_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("in.jsonl");
    fs::write(&recs, format!("{LINE}\nnope\nnope\n")).unwrap();
    let o = cmc(
        &["calibrate", "--out", &out_arg(dir.path()), "--records", &recs.display().to_string()],
        &[],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "data");
}

#[test]
fn strict_faithfulness_threshold_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"min_faithfulness_pct": 101.0, "alpha_grid": [0.5]}"#).unwrap();
    let out = dir.path().join("out");
    let o = cmc(&["run", "--out", &out_arg(&out), "--config", &cfg.display().to_string(), "--top-k", "1"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "validation_failed");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
    assert!(out.join("report.json").is_file());
}
