use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cl2o(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cl2o"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--jobs")
        .arg("2")
        .output()
        .expect("spawn cl2o")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn default_config_has_the_protocol_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(&["inspect"], tmp.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for line in ["horizon = 50", "gamma_decay = 0.95", "episodes = 10", "meta_lr = 0.01", "epochs = 40"] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(&["train", "--epochs", "0"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let init = fs::read(tmp.path().join("checkpoints/theta_0000.ckpt")).unwrap();
    let last = fs::read(tmp.path().join("theta.ckpt")).unwrap();
    assert_eq!(init, last);
}

#[test]
fn training_is_seed_deterministic_and_writes_a_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["train", "--seed", "7", "--epochs", "2", "--horizon", "10"];
    assert_eq!(code(&cl2o(&args, a.path())), 0);
    assert_eq!(code(&cl2o(&args, b.path())), 0);
    for f in ["theta.ckpt", "checkpoints/theta_0001.ckpt", "checkpoints/theta_0002.ckpt", "train.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    for key in ["config_hash = ", "dataset_hash = ", "version = ", "seed = 7", "unrolling = full"] {
        assert!(manifest.contains(key), "manifest lacks {key:?}");
    }
    let csv = fs::read_to_string(a.path().join("train.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,mean_metaloss,grad_norm,skipped");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn verify_accepts_gradient_descent_on_a_certified_quadratic() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(&["verify", "--set", "problem=quadratic"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = fs::read_to_string(tmp.path().join("verify.txt")).unwrap();
    assert!(report.contains("descent-bound"));
    assert!(report.contains("equivalence"));
}

#[test]
fn verify_flags_an_overstepped_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(
        &["verify", "--set", "problem=quadratic", "--set", "rule_eta=2/beta", "--unsafe-stepsize"],
        tmp.path(),
    );
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    // At exactly 2/beta the top mode oscillates without decaying.
    assert!(stdout(&o).lines().any(|l| l.starts_with("square-sum") && l.contains("FAIL")));

    let o = cl2o(
        &["verify", "--set", "problem=quadratic", "--set", "rule_eta=2.5/beta", "--unsafe-stepsize"],
        tmp.path(),
    );
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("diverged at step"));
}

#[test]
fn uncertified_stepsize_without_the_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(&["verify", "--set", "problem=quadratic", "--set", "rule_eta=2/beta"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_replays_a_heavy_ball_source() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cl2o(&["verify", "--set", "problem=quadratic", "--source", "heavy-ball"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("equivalence")).unwrap().to_string();
    let dev: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(dev <= 1e-10, "{line}");
}

#[test]
fn verify_rechecks_a_saved_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cl2o(&["verify", "--set", "problem=quadratic"], tmp.path())), 0);
    let traj = tmp.path().join("verify.traj");
    let again = tempfile::tempdir().unwrap();
    let o = cl2o(&["verify", "--trajectory", traj.to_str().unwrap()], again.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = cl2o(&["inspect", "--trajectory", traj.to_str().unwrap()], again.path());
    assert!(stdout(&o).contains("steps     2000"));
}

#[test]
fn bench_needs_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cl2o(&["bench"], tmp.path())), 2);
    let missing = tmp.path().join("nope.ckpt");
    assert_eq!(code(&cl2o(&["bench", "--checkpoint", missing.to_str().unwrap()], tmp.path())), 2);
}

#[test]
fn bench_pairs_learned_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cl2o(&["train", "--epochs", "0"], tmp.path())), 0);
    let ckpt = tmp.path().join("theta.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let run = tempfile::tempdir().unwrap();
    let o = cl2o(&["bench", "--checkpoint", ckpt, "--baselines", "gd", "--set", "bench_seeds=3"], run.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(run.path().join("bench_curves.csv")).unwrap();
    assert_eq!(
        curves.lines().next().unwrap(),
        "t,learned_loss_mean,learned_loss_std,gd_loss_mean,gd_loss_std"
    );
    assert_eq!(curves.lines().count(), 1 + 101);

    let solo = tempfile::tempdir().unwrap();
    let o = cl2o(&["bench", "--checkpoint", ckpt, "--baselines", "", "--set", "bench_seeds=1"], solo.path());
    assert_eq!(code(&o), 0);
    let curves = fs::read_to_string(solo.path().join("bench_curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "t,learned_loss_mean,learned_loss_std");
    for line in curves.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap(), "0", "std of one seed: {line}");
    }
}

#[test]
fn evaluate_reports_both_rules() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cl2o(&["train", "--epochs", "0"], tmp.path())), 0);
    let ckpt = tmp.path().join("theta.ckpt");
    let o = cl2o(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("held-out metaloss"));
    assert!(tmp.path().join("evaluate.csv").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    assert_eq!(code(&cl2o(&["train", "--config", cfg.to_str().unwrap()], tmp.path())), 2);
    assert_eq!(code(&cl2o(&["train", "--activation", "softplus"], tmp.path())), 2);
    assert_eq!(code(&cl2o(&["train", "--baselines", "sgd,lbfgs"], tmp.path())), 2);
    assert_eq!(code(&cl2o(&["frobnicate"], tmp.path())), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nhorizon = 5\nseed = 3\n").unwrap();
    let o = cl2o(&["inspect", "--config", cfg.to_str().unwrap(), "--seed", "9"], tmp.path());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "horizon = 5"));
    assert!(text.lines().any(|l| l == "seed = 9"));
}
