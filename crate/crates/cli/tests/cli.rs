use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdematch::compare::{linear_config, TABLE_HEADER};
use sdematch::train::Method;
use sdematch::{checkpoint, LatentSde};

fn sdematch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdematch")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sdematch(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(path: &Path) -> usize {
    // metadata line and column header
    fs::read_to_string(path).unwrap().lines().count() - 2
}

fn generate(dir: &Path, sets: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["generate-data", "--out-dir", s(dir)];
    for kv in sets {
        args.extend(["--set", kv]);
    }
    ok(&args);
    dir.join("data.csv")
}

#[test]
fn generate_data_is_byte_identical_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(&tmp.path().join("a"), &["seed=5"]);
    let b = generate(&tmp.path().join("b"), &["seed=5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(data_rows(&a), 20);
    let c = generate(&tmp.path().join("c"), &["seed=6"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let lorenz = generate(&tmp.path().join("l"), &["system=lorenz"]);
    assert_eq!(data_rows(&lorenz), 1920);
    assert!(tmp.path().join("l/config.txt").exists());
}

#[test]
fn zero_iterations_leave_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&tmp.path().join("d"), &[]);
    let out = tmp.path().join("t");
    ok(&["train", "--dataset", s(&data), "--out-dir", s(&out), "--set", "iterations=0"]);
    let trained = checkpoint::load(&out.join("model.json")).unwrap();
    let init = LatentSde::new(linear_config(Method::Matching, 64, 1.0, 0)).unwrap();
    assert_eq!(checkpoint::to_string(&trained).unwrap(), checkpoint::to_string(&init).unwrap());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
}

fn metrics_without_wall(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(6);
            f.join(",")
        })
        .collect()
}

#[test]
fn training_is_reproducible_for_both_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&tmp.path().join("d"), &["n_series=3"]);
    for method in ["matching", "baseline"] {
        let run = |name: &str| {
            let out = tmp.path().join(format!("{method}-{name}"));
            let m = format!("method={method}");
            ok(&[
                "train", "--dataset", s(&data), "--out-dir", s(&out), "--set", &m, "--set", "iterations=25", "--set",
                "width=8", "--set", "g_width=8", "--set", "context_dim=4", "--set", "steps=20", "--set", "seed=2",
            ]);
            (metrics_without_wall(&out.join("metrics.csv")), fs::read(out.join("model.json")).unwrap())
        };
        let (a, b) = (run("a"), run("b"));
        assert_eq!(a.0.len(), 26);
        assert_eq!(a.0[0], "step,l_prior,l_diff,l_rec,total,grad_norm_log10,L,tape_nodes");
        assert_eq!(a, b);
    }
}

fn report(path: &Path) -> Vec<(String, f64, Option<f64>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().ok())
        })
        .collect()
}

#[test]
fn evaluate_standard_error_shrinks_with_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&tmp.path().join("d"), &[]);
    let model = tmp.path().join("t");
    ok(&["train", "--dataset", s(&data), "--out-dir", s(&model), "--set", "iterations=50", "--set", "width=16"]);
    let ckpt = model.join("model.json");
    let se = |n: usize| {
        let out = tmp.path().join(format!("e{n}"));
        let set = format!("eval_samples={n}");
        ok(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out-dir", s(&out), "--set", &set]);
        let rows = report(&out.join("report.csv"));
        assert_eq!(rows[0].0, "nelbo");
        assert!(rows.iter().any(|r| r.0 == "forecast_mse"));
        assert!(rows.iter().any(|r| r.0 == "last_value_mse"));
        (rows[0].2.unwrap(), fs::read(out.join("report.csv")).unwrap())
    };
    let (small, first) = se(300);
    let (_, again) = se(300);
    assert_eq!(first, again);
    let (large, _) = se(3000);
    let ratio = small / large;
    let expected = 10f64.sqrt();
    assert!(ratio > expected / 2.0 && ratio < expected * 2.0, "ratio {ratio}");
}

#[test]
fn compare_table_has_fixed_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    ok(&[
        "compare", "--out-dir", s(&out), "--set", "width=8", "--set", "horizons=1,2", "--set", "knobs=10,20", "--set",
        "noise_seeds=2", "--set", "reps=2",
    ]);
    let text = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], TABLE_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 4);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 6);
    }
    assert_eq!(lines.iter().filter(|l| l.starts_with("matching,")).count(), 4);
}

#[test]
fn sampling_forecasting_and_kalman_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&tmp.path().join("d"), &["n_series=2"]);
    let model = tmp.path().join("t");
    ok(&["train", "--dataset", s(&data), "--out-dir", s(&model), "--set", "iterations=5", "--set", "width=8", "--set", "t_max=1.5"]);
    let ckpt = model.join("model.json");

    let out = tmp.path().join("s");
    ok(&["sample", "--checkpoint", s(&ckpt), "--out-dir", s(&out), "--set", "paths=3", "--set", "steps=10"]);
    let text = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "path,t,z_1,x_1");
    assert_eq!(text.lines().count(), 1 + 3 * 11);

    let out = tmp.path().join("f");
    ok(&[
        "forecast", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out-dir", s(&out), "--set", "paths=4", "--set",
        "steps=5", "--set", "horizon=0.5",
    ]);
    assert_eq!(fs::read_to_string(out.join("forecast.csv")).unwrap().lines().count(), 1 + 8 * 6);

    let out = tmp.path().join("k");
    ok(&["kalman-check", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out-dir", s(&out), "--set", "eval_samples=50"]);
    let summary = fs::read_to_string(out.join("kalman.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "series_id,n_obs,loglik,nelbo,nelbo_se,gap_per_obs");
    assert_eq!(summary.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("smoother.csv")).unwrap().lines().count(), 1 + 2 * 20);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| sdematch(args).status.code().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["generate-data", "--out-dir", s(&out), "--set", "colour=red"]), 4);
    assert_eq!(code(&["generate-data", "--out-dir", s(&out), "--set", "width=0"]), 4);

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(code(&["generate-data", "--out-dir", s(&blocker.join("sub"))]), 2);
    assert_eq!(code(&["train", "--dataset", s(&tmp.path().join("missing.csv")), "--out-dir", s(&out)]), 2);

    let lorenz = generate(&tmp.path().join("l"), &["system=lorenz", "n_series=2", "n_obs=5"]);
    let linear = generate(&tmp.path().join("d"), &[]);
    let model = tmp.path().join("t");
    ok(&["train", "--dataset", s(&linear), "--out-dir", s(&model), "--set", "iterations=0", "--set", "width=8"]);
    let mismatch = sdematch(&["evaluate", "--checkpoint", s(&model.join("model.json")), "--dataset", s(&lorenz), "--out-dir", s(&out)]);
    assert_eq!(mismatch.status.code(), Some(4));
    let msg = String::from_utf8_lossy(&mismatch.stderr);
    assert!(msg.contains("expected 1, got 3"), "{msg}");
}

#[test]
fn divergence_exits_with_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&tmp.path().join("d"), &[]);
    let out = tmp.path().join("t");
    let run = sdematch(&[
        "train", "--dataset", s(&data), "--out-dir", s(&out), "--set", "lr=1e300", "--set", "lr_decay=1", "--set",
        "iterations=500", "--set", "width=8",
    ]);
    assert_eq!(run.status.code(), Some(3), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(checkpoint::load(&out.join("model.json")).is_ok());
}
