use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use cl2o_core::baselines::{parse_baseline_list, BaselineKind};
use cl2o_core::data::{write_results, ResultsFormat, RunConfig};
use cl2o_core::experiment::{self, Setup, VerifyContext};
use cl2o_core::meta::meta_train;
use cl2o_core::stable::{spectral_norm, InnovationModel};
use cl2o_core::update::{RuleKind, Trajectory};

#[derive(Parser)]
#[command(name = "cl2o", version, about = "Train, benchmark and verify convergent learned optimizers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated baselines: gd, sgd, heavy-ball, nag, adam, rmsprop.
    #[arg(long, global = true, value_name = "LIST")]
    baselines: Option<String>,
    /// Accept stepsizes outside the certified range.
    #[arg(long, global = true)]
    unsafe_stepsize: bool,
    #[arg(long, global = true, value_parser = ["tanh", "sigmoid", "relu"])]
    activation: Option<String>,
    #[arg(long, global = true, value_parser = ["uniform", "gaussian"])]
    init: Option<String>,
    /// Any config key, e.g. `--set problem=classifier`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the innovation model.
    Train,
    /// Held-out metaloss of a checkpoint against the rule without innovation.
    Evaluate,
    /// Paired runs of a checkpoint and tuned baselines.
    Bench,
    /// Run the convergence monitors; exit 3 when one fails.
    Verify {
        /// Check a saved trajectory instead of running one.
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
        /// `rule` (the configured rule, learned when a checkpoint is given)
        /// or a baseline name.
        #[arg(long, default_value = "rule")]
        source: String,
    },
    /// Print the resolved config, a checkpoint or a trajectory.
    Inspect {
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<cl2o_core::Error>() {
            Some(cl2o_core::Error::Config(_) | cl2o_core::Error::CertificateViolation { .. }) => {
                Failure::Usage(e)
            }
            _ => Failure::Runtime(e),
        }
    }
}

impl From<cl2o_core::Error> for Failure {
    fn from(e: cl2o_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn resolve_config(c: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = c.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = c.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = c.horizon {
        set("horizon", v.to_string())?;
    }
    if let Some(v) = c.jobs {
        set("jobs", v.to_string())?;
    }
    if let Some(v) = &c.data_dir {
        set("data_dir", v.display().to_string())?;
    }
    if let Some(v) = &c.out {
        set("out_dir", v.display().to_string())?;
    }
    if let Some(v) = &c.baselines {
        set("baselines", v.clone())?;
    }
    if c.unsafe_stepsize {
        set("unsafe_stepsize", "true".into())?;
    }
    if let Some(v) = &c.activation {
        set("activation", v.clone())?;
    }
    if let Some(v) = &c.init {
        set("init", v.clone())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: Option<&Path>) -> Outcome<InnovationModel> {
    let path = path.ok_or_else(|| usage("this command needs --checkpoint"))?;
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    InnovationModel::read_checkpoint(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn out_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)?;
    Ok(dir)
}

fn cmd_train(setup: &Setup, dir: &Path) -> Outcome {
    let cfg = &setup.cfg;
    experiment::write_manifest(setup, "train", dir)?;
    let model0 = experiment::initial_model(cfg)?;
    let mcfg = experiment::metaloss_config(cfg)?;
    let mut tcfg = experiment::meta_train_config(cfg, Some(dir.join("checkpoints")));
    tcfg.jobs = None;
    let (model, report) = meta_train(&model0, &setup.dist, &mcfg, &tcfg)?;
    write_results(&report.to_report(false), &dir.join("train.csv"), ResultsFormat::Csv)?;
    model.write_checkpoint(&dir.join("theta.ckpt"))?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  metaloss {:.6e}  |grad| {:.3e}{}",
            e.epoch,
            e.mean_metaloss,
            e.grad_norm,
            if e.skipped { "  (skipped)" } else { "" }
        );
    }
    println!("wrote {}", dir.join("theta.ckpt").display());
    Ok(())
}

fn cmd_evaluate(setup: &Setup, model: &InnovationModel, dir: &Path) -> Outcome {
    experiment::write_manifest(setup, "evaluate", dir)?;
    let cmp = experiment::evaluate(setup, model)?;
    write_results(&cmp.to_report(), &dir.join("evaluate.csv"), ResultsFormat::Csv)?;
    println!(
        "held-out metaloss over {} episodes: learned {:.6e}, without innovation {:.6e} ({:+.2}%)",
        cmp.learned.len(),
        cmp.learned_mean(),
        cmp.plain_mean(),
        -100.0 * cmp.gain()
    );
    Ok(())
}

fn cmd_bench(setup: &Setup, model: &InnovationModel, dir: &Path) -> Outcome {
    experiment::write_manifest(setup, "bench", dir)?;
    let out = experiment::bench(setup, model, &setup.cfg.baselines)?;
    write_results(&out.curves(), &dir.join("bench_curves.csv"), ResultsFormat::Csv)?;
    write_results(&out.summary(), &dir.join("bench_summary.csv"), ResultsFormat::Csv)?;
    print!("{}", out.table());
    Ok(())
}

fn cmd_verify(setup: &Setup, checkpoint: Option<&Path>, trajectory: Option<&Path>, source: &str, dir: &Path) -> Outcome {
    experiment::write_manifest(setup, "verify", dir)?;
    let report = match trajectory {
        Some(p) => {
            let traj = Trajectory::read_binary(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Usage)?;
            let eta = match traj.kind {
                RuleKind::Full => traj.eta.first().copied(),
                RuleKind::Cyclic(_) => None,
            };
            experiment::verify_trajectory(
                &traj,
                VerifyContext {
                    objective: None,
                    eta,
                    descent_bound: false,
                },
            )?
        }
        None => {
            let model = match checkpoint {
                Some(p) => Some(load_checkpoint(Some(p))?),
                None => None,
            };
            let baseline = match source {
                "rule" => None,
                s => Some(s.parse::<BaselineKind>().map_err(|e| usage(e.to_string()))?),
            };
            let (traj, rep) = experiment::verify_run(setup, model.as_ref(), baseline)?;
            traj.write_binary(&dir.join("verify.traj"))?;
            rep
        }
    };
    write_results(&report.to_report(), &dir.join("verify.txt"), ResultsFormat::KeyValue)?;
    for c in &report.checks {
        println!("{:<15} {}  {}", c.name, if c.passed { "ok  " } else { "FAIL" }, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Failure::Verification(format!("failed monitors: {}", failed.join(", "))))
    }
}

fn cmd_inspect(cfg: &RunConfig, checkpoint: Option<&Path>, trajectory: Option<&Path>) -> Outcome {
    if let Some(p) = trajectory {
        let traj = Trajectory::read_binary(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(Failure::Usage)?;
        println!("trajectory {}", p.display());
        println!("  kind      {:?}", traj.kind);
        println!("  steps     {}", traj.steps());
        println!("  dim       {}", traj.dim());
        println!("  vectors   {}", traj.has_vectors());
        println!("  diverged  {:?}", traj.diverged_at);
        if let (Some(f0), Some(ft)) = (traj.value.first(), traj.value.last()) {
            println!("  f(x_0)    {f0:.6e}\n  f(x_T)    {ft:.6e}");
        }
        return Ok(());
    }
    if let Some(p) = checkpoint {
        let model = load_checkpoint(Some(p))?;
        let op = model.operator().config();
        println!("checkpoint {}", p.display());
        println!("  parameters  {}", model.theta().len());
        println!(
            "  operator    depth {} state {} gamma {} activation {}",
            op.depth,
            op.state_dim,
            op.gamma,
            op.activation.name()
        );
        println!("  features    hidden {}", model.features().hidden());
        for l in 0..op.depth {
            let s = spectral_norm(model.operator().a_eff(l), op.state_dim, op.state_dim, 200, l as u64);
            println!("  |A_eff[{l}]|  {s:.6}");
        }
        for seg in model.theta().layout().segments() {
            println!("  {:<12} {}", seg.name, seg.len());
        }
        return Ok(());
    }
    print!("{}", cfg.to_text());
    println!("# config_hash = {}", cfg.hash());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli.common)?;
    if let Some(n) = cfg.worker_threads() {
        // Ignored when a pool already exists (e.g. repeated calls in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let checkpoint = cli.common.checkpoint.as_deref();
    if let Command::Inspect { trajectory } = &cli.command {
        return cmd_inspect(&cfg, checkpoint, trajectory.as_deref());
    }
    if let Some(list) = &cli.common.baselines {
        parse_baseline_list(list).map_err(|e| usage(e.to_string()))?;
    }
    let model = match cli.command {
        Command::Evaluate | Command::Bench => Some(load_checkpoint(checkpoint)?),
        _ => None,
    };
    let setup = experiment::build(&cfg)?;
    let dir = out_dir(&cfg)?;
    match cli.command {
        Command::Train => cmd_train(&setup, &dir),
        Command::Evaluate => cmd_evaluate(&setup, model.as_ref().expect("loaded"), &dir),
        Command::Bench => cmd_bench(&setup, model.as_ref().expect("loaded"), &dir),
        Command::Verify { trajectory, source } => cmd_verify(&setup, checkpoint, trajectory.as_deref(), &source, &dir),
        Command::Inspect { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
