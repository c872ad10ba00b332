use std::path::Path;
use std::process::{Command, Output};

fn lvgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_oil(dir: &Path, n: usize) -> String {
    let path = dir.join("oil.csv");
    let p = path.to_str().unwrap();
    let out = lvgp(&["synth", "--kind", "oilflow", "--n", &n.to_string(), "--out", p]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    p.to_string()
}

fn train_small(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--label-column",
        "12",
        "--latent-dim",
        "3",
        "--inducing",
        "10",
        "--batch",
        "30",
        "--iters",
        "40",
        "--eval-every",
        "20",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    lvgp(&args)
}

/// Parses `name  value ± se` lines from `eval`.
fn eval_line(text: &str, name: &str) -> (f64, f64) {
    let line = text.lines().find(|l| l.starts_with(name)).expect("line present");
    let nums: Vec<f64> = line
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    (nums[0], nums[1])
}

#[test]
fn unknown_method_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 60);
    let out = train_small(&data, &dir.path().join("run"), &["--method", "xyz"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--method"), "{}", stderr(&out));
}

#[test]
fn bad_numeric_flags_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 60);
    for (flag, value) in [("--step-size", "-1"), ("--batch", "1000"), ("--lr", "0"), ("--missing-rows", "1.5")] {
        let out = train_small(&data, &dir.path().join("run"), &[flag, value]);
        assert_eq!(code(&out), 2, "{flag}");
        assert!(stderr(&out).contains(flag), "{flag}: {}", stderr(&out));
    }
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 90);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let out = train_small(&data, run, &["--method", "ais", "--k", "3", "--seed", "4"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let metrics_a = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let metrics_b = std::fs::read(b.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    assert_eq!(String::from_utf8(metrics_a).unwrap().lines().count(), 40);
    assert_eq!(
        std::fs::read(a.join("checkpoint.json")).unwrap(),
        std::fs::read(b.join("checkpoint.json")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let cfg = &manifest["config"];
    assert!(cfg["step_size"].as_f64().unwrap() > 0.0);
    assert_eq!(cfg["step_cap"].as_f64(), Some(1.0));
    assert_eq!(cfg["k"].as_u64(), Some(3));
    assert!(manifest["init"]["latent_means"].as_str().unwrap().contains("principal"));
    assert!(manifest["dataset"]["fingerprint"].as_str().unwrap().starts_with("90x12:"));
    assert_eq!(manifest["seed"].as_u64(), Some(4));
}

#[test]
fn eval_agrees_with_training_and_errors_shrink() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 90);
    let run = dir.path().join("run");
    let out = train_small(&data, &run, &["--method", "iw", "--k", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let last: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().last().unwrap(),
    )
    .unwrap();
    let ckpt = run.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let eval = |samples: &str| {
        let out = lvgp(&["eval", "--checkpoint", ckpt, "--data", &data, "--label-column", "12", "--samples", samples]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout(&out)
    };
    let few = eval("4");
    let many = eval("400");
    let (nell, nell_se) = eval_line(&many, "nell");
    let single_sd = nell_se * 400f64.sqrt();
    assert!((nell - last["nell"].as_f64().unwrap()).abs() < 4.0 * single_sd);
    let (mse, _) = eval_line(&many, "mse");
    assert!((mse - last["mse"].as_f64().unwrap()).abs() < 1e-6);
    let (_, se_few) = eval_line(&few, "neg_elbo");
    let (_, se_many) = eval_line(&many, "neg_elbo");
    let ratio = se_few / se_many;
    assert!((5.0..20.0).contains(&ratio), "standard error ratio {ratio}");
}

#[test]
fn eval_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 30);
    let out = lvgp(&["eval", "--checkpoint", "/nonexistent/ckpt.json", "--data", &data, "--label-column", "12"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reconstruct_writes_one_row_per_masked_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 90);
    let run = dir.path().join("run");
    let out = train_small(
        &data,
        &run,
        &["--method", "mf", "--missing-rows", "0.1", "--missing-pixels", "0.5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = dir.path().join("rec.csv");
    let ckpt = run.join("checkpoint.json");
    let out = lvgp(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--label-column",
        "12",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // 9 rows with 6 of 12 cells masked each.
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 9 * 6);
    assert!(stdout(&out).contains("masked mse"));

    let clean = dir.path().join("clean");
    assert_eq!(code(&train_small(&data, &clean, &["--method", "mf"])), 0);
    let ckpt = clean.join("checkpoint.json");
    let out = lvgp(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--label-column",
        "12",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no masked entries"));
}

#[test]
fn evidence_check_band_and_dim_zero() {
    let out = lvgp(&["evidence-check", "--dim", "0"]);
    assert_eq!(code(&out), 2);
    let out = lvgp(&["evidence-check", "--dim", "2", "--k-list", "1,64", "--chains", "4000", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let gaps: Vec<f64> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(gaps[1] < gaps[0], "{gaps:?}");
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = lvgp(&["gradcheck", "--seed", "5"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert!(stdout(&a).contains("detach-flow ablation"));
    let b = lvgp(&["gradcheck", "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn benchmark_reports_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 120);
    let out = lvgp(&[
        "benchmark",
        "--data",
        &data,
        "--label-column",
        "12",
        "--k-list",
        "2,4",
        "--iters",
        "2",
        "--batch",
        "30",
        "--latent-dim",
        "3",
        "--inducing",
        "10",
        "--methods",
        "mf,ais",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ais: time"));
    assert!(text.contains("R²"));
}

#[test]
fn too_many_skipped_iterations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_oil(dir.path(), 60);
    // An absurd fixed step with no cap overflows the chains.
    let out = train_small(
        &data,
        &dir.path().join("run"),
        &["--method", "ais", "--step-size", "1e300", "--adaptive-step", "off", "--step-cap", "0"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
