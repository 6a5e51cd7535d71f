use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flashbias"));
    c.env_remove("FLASHBIAS_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn flashbias")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "n = 32\nd = 8\nd_model = 16\ntie_rate = 1.0\nnoise = 0.05\nsteps = 6\nblock_rows = 16\nblock_cols = 16\n";

#[test]
fn addition_demo_matches_exactly() {
    let o = run(&["addition-demo"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("-0.014759540557861328  MATCH"), "{out}");
    assert!(out.contains("1 10000001 0010111"));
    assert!(out.contains("-2.4071154594421387") && out.contains("-4.703990459442139"));
    assert!(stderr(&o).starts_with("# flashbias"));
}

#[test]
fn addition_demo_without_sticky_ties_to_even() {
    let o = run(&["addition-demo", "--no-sticky"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("result                      -4.6875"));
}

#[test]
fn addition_demo_json() {
    let o = run(&["addition-demo", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["matches"], true);
    assert_eq!(v["trace"]["error"].as_f64(), Some(-0.014759540557861328));
    assert_eq!(v["trace"]["sticky"], true);
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(run(&["addition-demo", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["experiment"]).status.code(), Some(2));
}

#[test]
fn trace_of_exact_sums_has_zero_error() {
    let o = run(&["trace", "--p", "1,0.5,0.25", "--v", "1,2,-4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("t,p,v,exact,rounded,error,rounded_up,overflow_shift")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(
        rows.iter().all(|r| r.split(',').nth(5) == Some("0.0")),
        "{out}"
    );
}

#[test]
fn trace_of_tie_workload_steps_down() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("trace.svg");
    let o = run(&["trace", "--svg", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let errors: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errors.len(), 128);
    assert!(errors.iter().any(|&e| e < 0.0));
    assert!(stderr(&o).contains("largest negative error step"));
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn trace_rejects_out_of_range_indices() {
    assert_eq!(run(&["trace", "--row", "128"]).status.code(), Some(2));
    assert_eq!(run(&["trace", "--feature", "16"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_including_degenerate_n() {
    let o = run(&["gradcheck", "--n", "8", "--d", "4", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("dK max relative error"));
    assert_eq!(run(&["gradcheck", "--n", "1"]).status.code(), Some(0));
}

#[test]
fn tiling_check_exact_and_usage() {
    let o = run(&["tiling-check", "--n", "12", "--blocks", "1,3,5,12"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("B = N bitwise equal: true"));
    assert_eq!(
        run(&["tiling-check", "--n", "1", "--d", "2"]).status.code(),
        Some(0)
    );
    assert_eq!(
        run(&["tiling-check", "--n", "8", "--blocks", "9"])
            .status
            .code(),
        Some(2)
    );
    // low-precision tiling reorders the folds, so the exact tolerance fails
    assert_eq!(
        run(&["tiling-check", "--plan", "lp", "--blocks", "4"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn attn_diff_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = run(&[
        "attn-diff",
        "--n",
        "64",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 65);
    let r = flashbias::GradErrorReport::from_json(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r.coeffs.len(), 64);
}

#[test]
fn experiment_zero_steps_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = bin()
        .args([
            "experiment",
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "0",
        ])
        .env("FLASHBIAS_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        csv,
        "step,arm,loss,bias_sum,bias_cumsum,norm_W_Q,norm_W_K,norm_W_V\n"
    );
}

#[test]
fn experiment_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let o = run(&["experiment", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"));
    let cfg = write_config(dir.path(), "seed = 1\nsteps = 2\nwarp = 9\n");
    let o = run(&["experiment", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn experiment_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = run(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "metrics.csv",
        "report.json",
        "bias_cumsum.svg",
        "spectral_norms.svg",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(stderr(&o).contains("#   steps = 6"));
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        13
    );

    let o = run(&["report", "--input", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("round trip ok") && stdout(&o).contains("matches report"));

    // a tampered CSV no longer matches the report
    let csv = out.join("metrics.csv");
    let text = fs::read_to_string(&csv).unwrap().replacen("lp,", "lp ,", 1);
    fs::write(&csv, text).unwrap();
    assert_eq!(
        run(&["report", "--input", out.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn replayed_batches_give_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let log = dir.path().join("batches.fbc");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&[
        "experiment",
        "--config",
        cfg,
        "--out-dir",
        a.to_str().unwrap(),
        "--record-batches",
        log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&[
        "experiment",
        "--config",
        cfg,
        "--out-dir",
        b.to_str().unwrap(),
        "--replay",
        log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn failing_assertion_exits_one_and_divergence_dumps_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}assert_bias_reduction = 1e12\n"),
    );
    let o = run(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--no-svg",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("assert bias_reduction FAIL"));

    let cfg = write_config(dir.path(), &format!("{SMALL}lr = 1e38\n"));
    let out = dir.path().join("div");
    let o = run(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diverged"));
    let dumps: Vec<_> = fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).collect();
    assert!(dumps
        .iter()
        .any(|e| e.file_name().to_string_lossy().starts_with("diverged-")));
}

#[test]
fn bundled_claim3_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "experiment",
        "--config",
        bundled("claim3.cfg").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for name in ["bias_reduction", "norm_growth", "bias_positive"] {
        assert!(out.contains(&format!("assert {name} PASS")), "{out}");
    }
}
