use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nfsails::flow::{load_checkpoint, Flow};
use nfsails::io::write_points_csv;
use nfsails::metrics::ks_critical_value;
use nfsails::targets::{sample_target, TargetSpec};
use serde_json::Value;
use tempfile::TempDir;

fn nfsails(args: &[&str]) -> Output {
    nfsails_env(args, None)
}

fn nfsails_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nfsails"));
    cmd.args(args).env_remove("NFSAILS_SEED");
    if let Some(s) = seed {
        cmd.env("NFSAILS_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK_TRAIN: &[&str] = &["--epochs", "20", "--dataset-size", "1000", "--batch-size", "200", "--learning-rate", "1e-2"];

fn train_quick(dir: &Path, seed: &str) -> PathBuf {
    let mut args = vec!["train", "--target", "mixture:k=2", "--seed", seed, "--out", p(dir)];
    args.extend_from_slice(QUICK_TRAIN);
    let o = nfsails(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("model.ckpt")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn target_csv(dir: &Path, spec: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("target.csv");
    let pts = sample_target(&spec.parse().unwrap(), n, seed).unwrap();
    write_points_csv(&path, &pts, 'x').unwrap();
    path
}

#[test]
fn train_writes_checkpoint_trace_and_config() {
    let dir = TempDir::new().unwrap();
    train_quick(dir.path(), "42");
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,nll");
    assert_eq!(lines.len(), 21);
    let nll = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(nll(lines[20]) < nll(lines[1]));
    let cfg = fs::read_to_string(dir.path().join("run.cfg")).unwrap();
    assert!(cfg.contains("seed = 42\n"));
    assert!(cfg.contains("target = mixture:k=2,r=4,sigma=0.3\n"));
    assert!(load_checkpoint(&dir.path().join("model.ckpt")).is_ok());
}

#[test]
fn training_is_byte_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ca = fs::read(train_quick(a.path(), "7")).unwrap();
    let cb = fs::read(train_quick(b.path(), "7")).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(
        fs::read(a.path().join("trace.csv")).unwrap(),
        fs::read(b.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn zero_epochs_writes_the_identity() {
    let dir = TempDir::new().unwrap();
    let o = nfsails(&["train", "--epochs", "0", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    let (x, log_det) = model.forward(&[0.3, -1.7]).unwrap();
    assert_eq!(x, vec![0.3, -1.7]);
    assert_eq!(log_det, 0.0);
    assert_eq!(fs::read_to_string(dir.path().join("trace.csv")).unwrap(), "epoch,nll\n");
}

#[test]
fn divergence_exits_1_with_partial_trace() {
    let dir = TempDir::new().unwrap();
    let o = nfsails(&[
        "train", "--epochs", "3", "--dataset-size", "500", "--batch-size", "100",
        "--learning-rate", "1e300", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("diverged"));
    assert!(fs::read_to_string(dir.path().join("trace.csv")).unwrap().starts_with("epoch,nll\n"));
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn sampling_outputs_and_determinism() {
    let dir = TempDir::new().unwrap();
    let ckpt = train_quick(dir.path(), "1");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = nfsails(&["sample", "--checkpoint", p(&ckpt), "--n", "300", "--burn-in", "50", "--seed", "3", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["samples.csv", "latent.csv", "diagnostics.json"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    let latent = fs::read_to_string(out_a.join("latent.csv")).unwrap();
    assert!(latent.starts_with("z0,z1\n"));
    let d = read_json(&out_a.join("diagnostics.json"));
    assert_eq!(d["rmmala_proposed"].as_u64().unwrap() + d["imh_proposed"].as_u64().unwrap(), 300);
}

#[test]
fn naive_sampling_writes_n_rows_and_no_diagnostics() {
    let dir = TempDir::new().unwrap();
    let ckpt = train_quick(dir.path(), "1");
    let out = dir.path().join("naive");
    let o = nfsails(&["sample", "--method", "naive", "--n", "1000", "--checkpoint", p(&ckpt), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001);
    assert!(csv.starts_with("x0,x1\n"));
    assert!(!out.join("diagnostics.json").exists());
    assert!(out.join("run.cfg").exists());
}

#[test]
fn local_kernel_only_never_proposes_imh() {
    let dir = TempDir::new().unwrap();
    let ckpt = train_quick(dir.path(), "1");
    let o = nfsails(&[
        "sample", "--p", "1.0", "--n", "200", "--burn-in", "10", "--chains", "2",
        "--checkpoint", p(&ckpt), "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = read_json(&dir.path().join("diagnostics.json"));
    assert_eq!(d["imh_proposed"], 0);
    assert_eq!(d["rmmala_proposed"], 200);
    assert_eq!(d["step_sizes"].as_array().unwrap().len(), 2);
}

#[test]
fn env_seed_is_used_when_no_seed_is_given() {
    let dir = TempDir::new().unwrap();
    let ckpt = train_quick(dir.path(), "1");
    let run = |out: &Path, extra: &[&str], env: Option<&str>| {
        let mut args = vec!["sample", "--method", "naive", "--n", "20", "--checkpoint", p(&ckpt), "--out", p(out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&nfsails_env(&args, env)), 0);
        fs::read(out.join("samples.csv")).unwrap()
    };
    let from_env = run(&dir.path().join("e"), &[], Some("11"));
    let from_flag = run(&dir.path().join("f"), &["--seed", "11"], Some("99"));
    let other = run(&dir.path().join("o"), &[], None);
    assert_eq!(from_env, from_flag);
    assert_ne!(from_env, other);
    let cfg = fs::read_to_string(dir.path().join("e/run.cfg")).unwrap();
    assert!(cfg.contains("seed = 11\n"));
}

#[test]
fn checkpoint_problems_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = nfsails(&["sample", "--checkpoint", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not found"));

    let ckpt = train_quick(dir.path(), "1");
    let text = fs::read_to_string(&ckpt).unwrap().replacen("NFSAILS-CKPT v1", "NFSAILS-CKPT v9", 1);
    let bad = dir.path().join("v9.ckpt");
    fs::write(&bad, text).unwrap();
    let o = nfsails(&["sample", "--checkpoint", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("expected v1") && err.contains("found v9"), "{err}");

    let o = nfsails(&["sample", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&nfsails(&["train", "--bogus"])), 2);
    assert_eq!(code(&nfsails(&["frobnicate"])), 2);
    assert_eq!(code(&nfsails(&["train", "--target", "mixture:k=0", "--out", p(dir.path())])), 2);
    assert_eq!(code(&nfsails(&["train", "--eps", "fast", "--out", p(dir.path())])), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# header\nepochz = 3\n").unwrap();
    let o = nfsails(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn config_file_is_applied_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg.in");
    fs::write(&cfg, "epochs = 0\nseed = 5\ntarget = mixture:k=3\n").unwrap();
    let out = dir.path().join("o");
    let o = nfsails(&["train", "--config", p(&cfg), "--seed", "6", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = fs::read_to_string(out.join("run.cfg")).unwrap();
    assert!(written.contains("epochs = 0\n"));
    assert!(written.contains("seed = 6\n"));
    assert!(written.contains("target = mixture:k=3,"));
}

#[test]
fn eval_of_target_draws_is_a_null_result() {
    let dir = TempDir::new().unwrap();
    let n = 2000;
    let csv = target_csv(dir.path(), "mixture:k=3", n, 21);
    let o = nfsails(&[
        "eval", "--target", "mixture:k=3", "--samples", p(&csv), "--seed", "5",
        "--level-samples", "20000", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("report.json"));
    let ks = r["ks_stat"].as_f64().unwrap();
    assert!(ks < ks_critical_value(0.01, n, n), "ks {ks}");
    let kl = r["kl_knn"].as_f64().unwrap();
    assert!(kl.abs() <= 0.05, "kl {kl}");
    assert_eq!(r["n_samples"], 2000);
    assert!(r["mean_log_likelihood"].is_f64() && r["ood_fraction"].is_f64());
}

#[test]
fn eval_is_reproducible_and_passes_diagnostics_through() {
    let dir = TempDir::new().unwrap();
    let csv = target_csv(dir.path(), "mixture:k=2", 300, 2);
    let diag = dir.path().join("diag.json");
    fs::write(
        &diag,
        r#"{"rmmala_proposed":9,"rmmala_accepted":4,"imh_proposed":1,"imh_accepted":1,
            "invalid_proposals":0,"rmmala_acceptance_rate":0.4444444444444444,
            "imh_acceptance_rate":1.0,"step_sizes":[0.1]}"#,
    )
    .unwrap();
    let run = |out: &str, metrics: Option<&str>| {
        let out = dir.path().join(out);
        let mut args = vec!["eval", "--samples", p(&csv), "--diagnostics", p(&diag), "--level-samples", "5000", "--out", p(&out)];
        if let Some(m) = metrics {
            args.extend(["--metrics", m]);
        }
        let o = nfsails(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(out.join("report.json")).unwrap()
    };
    assert_eq!(run("a", None), run("b", None));
    let only: Value = serde_json::from_str(&run("c", Some(""))).unwrap();
    let keys: Vec<&String> = only.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["diagnostics", "n_samples"]);
    assert_eq!(only["diagnostics"]["rmmala_proposed"], 9);
}

#[test]
fn density_metric_on_two_moons_exits_1() {
    let dir = TempDir::new().unwrap();
    let csv = target_csv(dir.path(), "twomoons", 100, 1);
    let o = nfsails(&["eval", "--target", "twomoons", "--samples", p(&csv), "--metrics", "ks,loglik", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("density"), "{}", stderr(&o));
    let o = nfsails(&["eval", "--target", "twomoons", "--samples", p(&csv), "--metrics", "ks", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn plot_scatter_and_levelset() {
    let dir = TempDir::new().unwrap();
    let csv = target_csv(dir.path(), "mixture:k=3", 1000, 4);
    let o = nfsails(&[
        "plot", "--target", "mixture:k=3", "--samples", p(&csv), "--levelset", "0.975",
        "--level-samples", "20000", "--target-samples", "200", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("plot.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1200);
    assert_eq!(svg.matches("<polyline class=\"closed\"").count(), 3);

    let moons = target_csv(dir.path(), "twomoons", 50, 4);
    let out = dir.path().join("moons");
    let o = nfsails(&["plot", "--target", "twomoons", "--samples", p(&moons), "--levelset", "0.975", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 50);
    assert!(!svg.contains("levelset"));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = TempDir::new().unwrap();
    let csv = target_csv(dir.path(), "mixture:k=2", 10, 4);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = nfsails(&["plot", "--samples", p(&csv), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn repro_writes_a_comparison_table() {
    let dir = TempDir::new().unwrap();
    let o = nfsails(&[
        "repro", "--target", "mixture:k=2", "--seeds", "1,2", "--epochs", "2", "--dataset-size", "400",
        "--batch-size", "200", "--n", "100", "--burn-in", "20", "--level-samples", "2000",
        "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,naive,") && lines[4].starts_with("2,sails,"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("naive") && stdout.contains("sails"));
    assert!(dir.path().join("run.cfg").exists());
}

#[test]
fn target_parse_errors_mention_the_input() {
    let spec: Result<TargetSpec, _> = "mixture:k=two".parse();
    assert!(spec.is_err());
    let o = nfsails(&["eval", "--target", "mixture:k=two"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mixture:k=two"));
}
