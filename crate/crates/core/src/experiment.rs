//! End-to-end experiment plumbing shared by the command-line tool and the
//! acceptance suite: problem construction from a [`RunConfig`], paired
//! benchmark runs, held-out metaloss evaluation, the verification suite and
//! run manifests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::baselines::{
    log_grid, run_baseline, tune_learning_rate, BaselineKind, BaselineOptimizer, Sampling,
};
use crate::convergence::{
    innovation_cap_compliance, equivalence_test, descent_bound_monitor, reconstruct_innovation,
    square_sum_diagnostics, Epsilon, EMPIRICAL_TAIL_RATIO, EQUIVALENCE_TOL,
};
use crate::data::{
    data_dir, find_mnist, format_float, load_idx, make_synthetic_classification, Dataset,
    ProblemKind, Report, RunConfig,
};
use crate::error::{Error, Result};
use crate::meta::{
    estimate_expected_metaloss, Episode, InitDistribution, MetaLossConfig, MetaTrainConfig,
    ObjectiveFamily, RuleSpec, TaskDistribution,
};
use crate::objectives::{
    make_separable_least_squares, ClassifierObjective, LowerBound, Objective, ShallowClassifier,
};
use crate::rng::split;
use crate::stable::{FeatureConfig, InnovationModel, ModelConfig, OperatorConfig, ThetaInit};
use crate::update::{
    default_eta, rollout, InnovationSource, RecordFlags, RuleKind, StepsizeSchedule, Trajectory,
    UpdateRule,
};

/// Version string recorded in manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

// Seed streams split off the run seed. Meta-training epochs use streams
// `0..epochs`, so these sit at the far end of the range.
const TUNE_STREAM: u64 = u64::MAX - 1;
const BENCH_STREAM: u64 = u64::MAX - 2;
const VERIFY_STREAM: u64 = u64::MAX - 3;
const DATA_STREAM: u64 = u64::MAX - 4;
const MODEL_STREAM: u64 = u64::MAX - 5;

pub fn model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        operator: OperatorConfig {
            state_dim: cfg.state_dim,
            depth: cfg.depth,
            gamma: cfg.contraction,
            activation: cfg.operator_activation,
            ..OperatorConfig::default()
        },
        features: FeatureConfig { hidden: cfg.hidden },
    }
}

pub fn theta_init(cfg: &RunConfig) -> ThetaInit {
    ThetaInit {
        recurrence_gain: cfg.recurrence_gain,
        recurrence_noise: cfg.recurrence_noise,
        readout_scale: cfg.readout_scale,
        feature_scale: cfg.feature_scale,
    }
}

/// The untrained model `theta_0` of a run.
pub fn initial_model(cfg: &RunConfig) -> Result<InnovationModel> {
    InnovationModel::init(model_config(cfg), theta_init(cfg), split(cfg.seed, MODEL_STREAM))
}

/// Constant `alpha`, discounted `gamma_t = decay^(T - t)`.
pub fn metaloss_config(cfg: &RunConfig) -> Result<MetaLossConfig> {
    let d = MetaLossConfig::discounted(cfg.horizon, cfg.gamma_decay)?;
    MetaLossConfig::new(vec![cfg.alpha; cfg.horizon + 1], d.gamma)
}

pub fn meta_train_config(cfg: &RunConfig, checkpoint_dir: Option<PathBuf>) -> MetaTrainConfig {
    MetaTrainConfig {
        epochs: cfg.epochs,
        lr: cfg.meta_lr,
        seed: cfg.seed,
        truncation: cfg.truncation(),
        checkpoint_dir,
        jobs: cfg.worker_threads(),
    }
}

pub fn baseline_optimizer(cfg: &RunConfig, kind: BaselineKind, lr: f64) -> BaselineOptimizer {
    BaselineOptimizer {
        momentum: cfg.momentum,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        decay: cfg.rmsprop_decay,
        power: cfg.schedule_power,
        ..BaselineOptimizer::new(kind, lr)
    }
}

/// Image data of a classifier run.
#[derive(Clone, Debug)]
pub struct ClassifierData {
    /// `mnist` or `synthetic`.
    pub source: String,
    pub train: Dataset,
    /// Share of `train` used for optimizing `theta`.
    pub meta: Dataset,
    pub eval: ShallowClassifier,
    pub eval_hash: String,
    /// SGD rate tuned on the training set; also the learned rule's `eta0`
    /// unless configured.
    pub sgd_lr: f64,
}

/// Everything a run needs besides the model.
#[derive(Clone, Debug)]
pub struct Setup {
    pub cfg: RunConfig,
    pub dist: TaskDistribution,
    pub data: Option<ClassifierData>,
}

impl Setup {
    /// Training data hash and eval data hash, or `none`.
    pub fn dataset_hash(&self) -> String {
        match &self.data {
            Some(d) => format!("{}+{}", d.train.hash(), d.eval_hash),
            None => "none".to_string(),
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.data.is_some()
    }

    /// Shared bench / tuning instance for stream seed `s`: objective and start.
    fn instance(&self, seed: u64) -> Result<Episode> {
        match &self.data {
            Some(d) => {
                let obj: Arc<dyn Objective> = Arc::new(ClassifierObjective::new(
                    &d.train,
                    self.cfg.activation,
                    self.cfg.minibatch,
                    split(seed, 0),
                )?);
                let x0 = self.dist.init.sample(obj.dim(), split(seed, 1));
                Ok(Episode {
                    seed,
                    objective: obj,
                    x0,
                })
            }
            None => self.dist.episode(seed),
        }
    }

    /// Episode `i` of the paired benchmark.
    pub fn bench_instance(&self, i: usize) -> Result<Episode> {
        self.instance(split(split(self.cfg.seed, BENCH_STREAM), i as u64))
    }

    /// Instance checked by the verification suite.
    pub fn verify_instance(&self) -> Result<Episode> {
        self.instance(split(self.cfg.seed, VERIFY_STREAM))
    }

    /// Binds the configured rule to `obj` with the given innovation.
    pub fn rule(&self, obj: &dyn Objective, innovation: InnovationSource) -> Result<UpdateRule> {
        self.dist.rule.bind(obj, innovation)
    }

    /// Grid-searched learning rate of `kind` on a tuning instance.
    pub fn tune(&self, kind: BaselineKind) -> Result<f64> {
        let cfg = &self.cfg;
        let root = split(cfg.seed, TUNE_STREAM);
        let ep = self.instance(root)?;
        let starts: Vec<Vec<f64>> = (0..cfg.tune_starts.max(1))
            .map(|i| self.dist.init.sample(ep.objective.dim(), split(root, 2 + i as u64)))
            .collect();
        let grid = log_grid(cfg.grid_lo, cfg.grid_hi, cfg.grid_points)?;
        let base = baseline_optimizer(cfg, kind, grid[0]);
        let sampling = Sampling::for_kind(kind, ep.objective.as_ref());
        let (lr, _) = tune_learning_rate(&base, ep.objective.as_ref(), &grid, cfg.tune_steps, &starts, sampling)?;
        Ok(lr)
    }
}

fn load_classifier_data(cfg: &RunConfig) -> Result<(String, Dataset, Dataset)> {
    let explicit = (!cfg.data_dir.is_empty()).then(|| PathBuf::from(&cfg.data_dir));
    let dir = data_dir(explicit.as_deref());
    let n = cfg.train_images + cfg.eval_images;
    let (source, data) = match find_mnist(&dir) {
        Some((images, labels)) => ("mnist", load_idx(&images, &labels, Some(n))?),
        None => (
            "synthetic",
            make_synthetic_classification(
                n,
                cfg.synthetic_pixels,
                cfg.synthetic_labels,
                cfg.synthetic_separation,
                split(cfg.seed, DATA_STREAM),
            )?,
        ),
    };
    if data.len() < n {
        return Err(Error::Config(format!(
            "dataset has {} records, need {n}",
            data.len()
        )));
    }
    let (train, eval) = data.split(cfg.train_images as f64 / n as f64)?;
    Ok((source.to_string(), train, eval))
}

/// Builds the objective family, inner rule and data of a run.
pub fn build(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let cyclic = |eta0: f64| -> Result<RuleSpec> {
        Ok(RuleSpec::Cyclic {
            schedule: StepsizeSchedule::new(eta0, cfg.schedule_power)?,
        })
    };
    let full = RuleSpec::Full {
        eta: cfg.rule_eta,
        allow_unsafe: cfg.unsafe_stepsize,
    };
    let (family, rule, data) = match cfg.problem {
        ProblemKind::Quadratic => (
            ObjectiveFamily::Quadratic {
                dim: cfg.dim,
                condition: cfg.condition,
            },
            full,
            None,
        ),
        ProblemKind::Mixed => (
            ObjectiveFamily::Mixed {
                dim: cfg.dim,
                condition: cfg.condition,
            },
            full,
            None,
        ),
        ProblemKind::LeastSquares => {
            let obj = make_separable_least_squares(cfg.dim, cfg.components, cfg.noise, split(cfg.seed, DATA_STREAM))?;
            let eta0 = match cfg.eta0.value() {
                Some(e) => e,
                None => default_eta(&obj).ok_or_else(|| Error::Config("least squares without beta".into()))?,
            };
            (ObjectiveFamily::Fixed(Arc::new(obj)), cyclic(eta0)?, None)
        }
        ProblemKind::Classifier => {
            let (source, train, eval_set) = load_classifier_data(cfg)?;
            let (meta, _) = train.split(cfg.meta_fraction)?;
            if cfg.minibatch > meta.len() {
                return Err(Error::Config(format!(
                    "minibatch {} exceeds the {} optimization records",
                    cfg.minibatch,
                    meta.len()
                )));
            }
            let all: Vec<usize> = (0..eval_set.len()).collect();
            let eval = ShallowClassifier::new(&eval_set, &all, cfg.activation, 1.0)?;
            let meta_obj = Arc::new(ClassifierObjective::new(
                &meta,
                cfg.activation,
                cfg.minibatch,
                split(cfg.seed, DATA_STREAM),
            )?);
            let mut setup = Setup {
                cfg: cfg.clone(),
                dist: TaskDistribution::new(ObjectiveFamily::Fixed(meta_obj.clone()), full),
                data: Some(ClassifierData {
                    source,
                    train,
                    meta,
                    eval,
                    eval_hash: eval_set.hash().to_string(),
                    sgd_lr: f64::NAN,
                }),
            };
            setup.dist.init = cfg.init_distribution();
            let lr = setup.tune(BaselineKind::Sgd)?;
            let eta0 = cfg.eta0.value().unwrap_or(lr);
            setup.dist.rule = cyclic(eta0)?;
            setup.dist.episodes = cfg.episodes;
            if let Some(d) = setup.data.as_mut() {
                d.sgd_lr = lr;
            }
            return Ok(setup);
        }
    };
    let mut dist = TaskDistribution::new(family, rule);
    dist.init = cfg.init_distribution();
    dist.episodes = cfg.episodes;
    Ok(Setup {
        cfg: cfg.clone(),
        dist,
        data,
    })
}

/// One method of a paired benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub name: String,
    /// Tuned rate of a baseline; `None` for the learned rule.
    pub lr: Option<f64>,
    /// `loss[s][t]`, training loss at step `t` of seed `s`; `+inf` after a
    /// divergence.
    pub loss: Vec<Vec<f64>>,
    /// `accuracy[s][k]` at `report_steps[k]`; empty for non-classifier runs.
    pub accuracy: Vec<Vec<f64>>,
    pub diverged: usize,
}

impl MethodResult {
    pub fn loss_at(&self, t: usize) -> (f64, f64) {
        mean_std(self.loss.iter().map(|l| l[t]))
    }

    pub fn accuracy_at(&self, k: usize) -> (f64, f64) {
        mean_std(self.accuracy.iter().map(|a| a.get(k).copied().unwrap_or(f64::NAN)))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub report_steps: Vec<usize>,
    pub methods: Vec<MethodResult>,
}

impl BenchOutcome {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Per-step curves: `t`, then `<method>_loss_mean`, `<method>_loss_std`.
    pub fn curves(&self) -> Report {
        let mut cols = vec!["t".to_string()];
        for m in &self.methods {
            cols.push(format!("{}_loss_mean", m.name));
            cols.push(format!("{}_loss_std", m.name));
        }
        let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut r = Report::new(&refs);
        let steps = self.methods.first().map_or(0, |m| m.loss.first().map_or(0, Vec::len));
        for t in 0..steps {
            let mut row = vec![t as f64];
            for m in &self.methods {
                let (mu, sd) = m.loss_at(t);
                row.extend([mu, sd]);
            }
            r.push_row(row).expect("row width");
        }
        r
    }

    /// One row per method and report step; method names in the metadata.
    pub fn summary(&self) -> Report {
        let mut r = Report::new(&[
            "method", "t", "loss_mean", "loss_std", "acc_mean", "acc_std", "lr", "diverged",
        ]);
        for (i, m) in self.methods.iter().enumerate() {
            r.meta(&format!("method.{i}"), &m.name);
            for (k, &t) in self.report_steps.iter().enumerate() {
                let (lm, ls) = m.loss_at(t);
                let (am, asd) = m.accuracy_at(k);
                r.push_row(vec![
                    i as f64,
                    t as f64,
                    lm,
                    ls,
                    am,
                    asd,
                    m.lr.unwrap_or(f64::NAN),
                    m.diverged as f64,
                ])
                .expect("row width");
            }
        }
        r.meta("seeds", self.methods.first().map_or(0, |m| m.loss.len()));
        r
    }

    /// Human-readable table of the report steps.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (k, &t) in self.report_steps.iter().enumerate() {
            out.push_str(&format!("step t = {t}\n"));
            for m in &self.methods {
                let (lm, ls) = m.loss_at(t);
                let (am, asd) = m.accuracy_at(k);
                out.push_str(&format!("  {:<10} loss {:>12} +- {:<12}", m.name, fmt4(lm), fmt4(ls)));
                if !am.is_nan() {
                    out.push_str(&format!(" acc {:.2}% +- {:.2}%", 100.0 * am, 100.0 * asd));
                }
                if m.diverged > 0 {
                    out.push_str(&format!(" diverged {}", m.diverged));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn fmt4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4e}")
    } else {
        format!("{v}")
    }
}

/// `f(x)`; classifier losses are averaged over minibatches so they read as
/// a mean cross-entropy.
fn training_loss(setup: &Setup, obj: &dyn Objective, x: &[f64]) -> f64 {
    match setup.data {
        Some(_) => obj.value(x) / obj.num_components().max(1) as f64,
        None => obj.value(x),
    }
}

fn summarize_run(setup: &Setup, obj: &dyn Objective, traj: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let steps = setup.cfg.bench_steps;
    let loss = (0..=steps)
        .map(|t| match traj.x.get(t) {
            Some(x) if traj.diverged_at.map_or(true, |d| t < d) => training_loss(setup, obj, x),
            _ => f64::INFINITY,
        })
        .collect();
    let acc = match &setup.data {
        Some(d) => setup
            .cfg
            .report_steps
            .iter()
            .map(|&t| traj.x.get(t).map_or(0.0, |x| d.eval.accuracy(x)))
            .collect(),
        None => Vec::new(),
    };
    (loss, acc)
}

/// Paired runs of the learned rule and `baselines` over the same bench
/// instances; baselines use grid-tuned rates.
pub fn bench(setup: &Setup, model: &InnovationModel, baselines: &[BaselineKind]) -> Result<BenchOutcome> {
    let cfg = &setup.cfg;
    if cfg.bench_seeds == 0 || cfg.bench_steps == 0 {
        return Err(Error::Config("bench needs at least one seed and one step".into()));
    }
    let instances = (0..cfg.bench_seeds)
        .map(|i| setup.bench_instance(i))
        .collect::<Result<Vec<_>>>()?;
    let collect = |name: String, lr: Option<f64>, runs: Vec<(Vec<f64>, Vec<f64>, bool)>| {
        let diverged = runs.iter().filter(|r| r.2).count();
        let (loss, accuracy) = runs.into_iter().map(|(l, a, _)| (l, a)).unzip();
        MethodResult {
            name,
            lr,
            loss,
            accuracy,
            diverged,
        }
    };
    let mut methods = Vec::with_capacity(1 + baselines.len());
    let learned = instances
        .par_iter()
        .map(|ep| {
            let obj = ep.objective.as_ref();
            let rule = setup.rule(obj, InnovationSource::Learned(model.clone()))?;
            let traj = rollout(&rule, obj, &ep.x0, cfg.bench_steps, RecordFlags::ALL)?;
            let (l, a) = summarize_run(setup, obj, &traj);
            Ok((l, a, traj.diverged()))
        })
        .collect::<Result<Vec<_>>>()?;
    methods.push(collect("learned".into(), None, learned));
    for &kind in baselines {
        let lr = setup.tune(kind)?;
        let opt = baseline_optimizer(cfg, kind, lr);
        let runs = instances
            .par_iter()
            .map(|ep| {
                let obj = ep.objective.as_ref();
                let sampling = Sampling::for_kind(kind, obj);
                let traj = run_baseline(&opt, obj, &ep.x0, cfg.bench_steps, sampling, RecordFlags::ALL)?;
                let (l, a) = summarize_run(setup, obj, &traj);
                Ok((l, a, traj.diverged()))
            })
            .collect::<Result<Vec<_>>>()?;
        methods.push(collect(kind.name().into(), Some(lr), runs));
    }
    Ok(BenchOutcome {
        report_steps: cfg.report_steps.clone(),
        methods,
    })
}

/// Held-out metaloss of the learned rule against the same rule with `v = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalossComparison {
    pub learned: Vec<f64>,
    pub plain: Vec<f64>,
}

impl MetalossComparison {
    pub fn learned_mean(&self) -> f64 {
        mean_std(self.learned.iter().copied()).0
    }

    pub fn plain_mean(&self) -> f64 {
        mean_std(self.plain.iter().copied()).0
    }

    /// Relative reduction `1 - learned / plain`.
    pub fn gain(&self) -> f64 {
        1.0 - self.learned_mean() / self.plain_mean()
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["episode", "learned", "plain"]);
        for (i, (a, b)) in self.learned.iter().zip(&self.plain).enumerate() {
            r.push_row(vec![i as f64, *a, *b]).expect("row width");
        }
        r.meta("learned_mean", format_float(self.learned_mean()))
            .meta("plain_mean", format_float(self.plain_mean()))
            .meta("gain", format_float(self.gain()));
        r
    }
}

/// Metaloss over `episodes` held-out episodes drawn from `seed`.
pub fn compare_metaloss(
    dist: &TaskDistribution,
    model: &InnovationModel,
    cfg: &MetaLossConfig,
    episodes: usize,
    seed: u64,
) -> Result<MetalossComparison> {
    let held_out = TaskDistribution {
        episodes,
        ..dist.clone()
    };
    let (_, learned) = estimate_expected_metaloss(Some(model), &held_out, cfg, seed)?;
    let (_, plain) = estimate_expected_metaloss(None, &held_out, cfg, seed)?;
    Ok(MetalossComparison { learned, plain })
}

/// Held-out comparison on the bench stream of a run.
pub fn evaluate(setup: &Setup, model: &InnovationModel) -> Result<MetalossComparison> {
    compare_metaloss(
        &setup.dist,
        model,
        &metaloss_config(&setup.cfg)?,
        setup.cfg.bench_seeds,
        split(setup.cfg.seed, BENCH_STREAM),
    )
}

/// One monitor of the verification suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name,
            passed,
            detail: detail.into(),
        });
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["check", "passed"]);
        for (i, c) in self.checks.iter().enumerate() {
            r.meta(&format!("check.{i}"), format!("{}: {}", c.name, c.detail));
            r.push_row(vec![i as f64, f64::from(u8::from(c.passed))]).expect("row width");
        }
        r.meta("passed", self.passed());
        r
    }
}

/// What the suite knows about how a trajectory was produced.
#[derive(Clone, Copy)]
pub struct VerifyContext<'a> {
    pub objective: Option<&'a dyn Objective>,
    /// Constant stepsize of a full-gradient rule.
    pub eta: Option<f64>,
    /// Run the descent-bound monitor (the trajectory comes from the
    /// gradient-plus-innovation rule itself).
    pub descent_bound: bool,
}

/// Divergence flag, square-sum diagnostics, and, where applicable, the
/// descent-bound monitor, the reconstruct-and-replay equivalence and the
/// cyclic innovation cap.
pub fn verify_trajectory(traj: &Trajectory, ctx: VerifyContext<'_>) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    match traj.diverged_at {
        Some(t) => rep.push("divergence", false, format!("diverged at step {t}")),
        None => rep.push("divergence", true, "bounded"),
    }
    if traj.diverged() {
        return Ok(rep);
    }
    let ss = square_sum_diagnostics(traj)?;
    rep.push(
        "square-sum",
        ss.square_sum_convergent(EMPIRICAL_TAIL_RATIO),
        format!(
            "tail ratios grad {} update {}",
            format_float(ss.tail_ratio_grad),
            format_float(ss.tail_ratio_update)
        ),
    );
    let beta = ctx.objective.and_then(|o| o.beta().value());
    let lower = ctx.objective.and_then(|o| match o.lower_bound() {
        LowerBound::Known(v) => Some(v),
        _ => None,
    });
    match (traj.kind, ctx.eta) {
        (RuleKind::Full, Some(eta)) => {
            if ctx.descent_bound {
                match beta {
                    Some(b) if eta * b < 1.0 => {
                        let l1 = descent_bound_monitor(traj, b, eta, Epsilon::Auto, lower)?;
                        rep.push(
                            "descent-bound",
                            l1.holds(),
                            format!("{} violations, surrogate f_min: {}", l1.violations(), l1.surrogate),
                        );
                    }
                    Some(b) => rep.push(
                        "descent-bound",
                        false,
                        format!("eta = {eta} is outside (0, 1/beta = {})", 1.0 / b),
                    ),
                    None => {}
                }
            }
            if let (Some(obj), true) = (ctx.objective, traj.has_vectors()) {
                let recon = reconstruct_innovation(traj, eta)?;
                let eq = equivalence_test(traj, &recon, obj, eta, EQUIVALENCE_TOL)?;
                rep.push(
                    "equivalence",
                    eq.passed(),
                    format!("max deviation {}", format_float(eq.max_deviation)),
                );
            }
        }
        (RuleKind::Cyclic(_), _) => {
            let e = innovation_cap_compliance(traj)?;
            rep.push(
                "innovation-cap",
                e.compliant,
                format!("worst ratio {}", format_float(e.worst_ratio)),
            );
        }
        _ => {}
    }
    Ok(rep)
}

/// Runs the configured rule (learned when `model` is given, else `v = 0`)
/// or a baseline at the rule's stepsize on the verification instance and
/// checks the result.
pub fn verify_run(
    setup: &Setup,
    model: Option<&InnovationModel>,
    baseline: Option<BaselineKind>,
) -> Result<(Trajectory, VerifyReport)> {
    let ep = setup.verify_instance()?;
    let obj = ep.objective.as_ref();
    let steps = setup.cfg.verify_steps;
    let innovation = match model {
        Some(m) => InnovationSource::Learned(m.clone()),
        None => InnovationSource::None,
    };
    let rule = setup.rule(obj, innovation)?;
    let eta = match &rule {
        UpdateRule::Full(r) => Some(r.eta()),
        UpdateRule::Cyclic(_) => None,
    };
    let (traj, descent_bound) = match baseline {
        Some(kind) => {
            let lr = eta.unwrap_or(setup.cfg.grid_hi);
            let opt = baseline_optimizer(&setup.cfg, kind, lr);
            let sampling = match rule {
                UpdateRule::Full(_) => Sampling::Full,
                UpdateRule::Cyclic(_) => Sampling::for_kind(kind, obj),
            };
            (run_baseline(&opt, obj, &ep.x0, steps, sampling, RecordFlags::ALL)?, false)
        }
        None => (rollout(&rule, obj, &ep.x0, steps, RecordFlags::ALL)?, true),
    };
    let rep = verify_trajectory(
        &traj,
        VerifyContext {
            objective: Some(obj),
            eta,
            descent_bound,
        },
    )?;
    Ok((traj, rep))
}

/// Key-value manifest: the full config plus hashes and version.
pub fn manifest(setup: &Setup, command: &str) -> String {
    let mut out = format!(
        "# run manifest\ncommand = {command}\nversion = {CODE_VERSION}\nconfig_hash = {}\ndataset_hash = {}\n",
        setup.cfg.hash(),
        setup.dataset_hash()
    );
    if let Some(d) = &setup.data {
        out.push_str(&format!("dataset_source = {}\ntuned_sgd_lr = {}\n", d.source, format_float(d.sgd_lr)));
    }
    out.push_str(&format!(
        "init_distribution = {}\nunrolling = {}\n",
        init_label(&setup.dist.init),
        match setup.cfg.truncation() {
            Some(k) => format!("truncated:{k}"),
            None => "full".into(),
        }
    ));
    out.push_str("# config\n");
    out.push_str(&setup.cfg.to_text());
    out
}

fn init_label(init: &InitDistribution) -> String {
    match init {
        InitDistribution::Uniform { lo, hi } => format!("uniform[{}, {}]", format_float(*lo), format_float(*hi)),
        InitDistribution::Gaussian { mean, std } => format!("gaussian({}, {})", format_float(*mean), format_float(*std)),
    }
}

pub fn write_manifest(setup: &Setup, command: &str, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest(setup, command))?;
    Ok(path)
}
