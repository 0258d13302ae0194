//! Meta-training: expected metaloss over sampled problems, its gradient
//! through unrolled rollouts, and the outer Adam loop on `theta`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::baselines::{baseline_step, BaselineKind, BaselineOptimizer, BaselineState};
use crate::data::Report;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::{make_centered_quadratic, Objective, TrigQuadratic, TRIG_AMPLITUDE, TRIG_FREQUENCY};
use crate::rng;
use crate::stable::{innovation_on_tape, ImpulseSignal, InnovationModel, ModelConfig, ModelOnTape};
use crate::update::{
    default_eta, rollout, CyclicRule, FullGradientRule, InnovationSource, RecordFlags, StepsizeSchedule,
    Trajectory, UpdateRule,
};

/// Weights of `sum_t alpha_t |grad f(x_t)|^2 + gamma_t f(x_t)`, `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLossConfig {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_GAMMA_DECAY: f64 = 0.95;

impl MetaLossConfig {
    pub fn new(alpha: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if alpha.len() != gamma.len() || alpha.len() < 2 {
            return Err(Error::invalid(format!(
                "metaloss weights need T + 1 >= 2 entries each, got {} and {}",
                alpha.len(),
                gamma.len()
            )));
        }
        if alpha.iter().chain(&gamma).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("metaloss weights must be finite and nonnegative"));
        }
        Ok(Self { alpha, gamma })
    }

    /// `alpha_t = 0`, `gamma_t = decay^(T - t)`.
    pub fn discounted(horizon: usize, decay: f64) -> Result<Self> {
        let gamma = (0..=horizon).map(|t| decay.powi((horizon - t) as i32)).collect();
        Self::new(vec![0.0; horizon + 1], gamma)
    }

    pub fn horizon(&self) -> usize {
        self.alpha.len() - 1
    }
}

impl Default for MetaLossConfig {
    fn default() -> Self {
        Self::discounted(DEFAULT_HORIZON, DEFAULT_GAMMA_DECAY).expect("static weights")
    }
}

/// Weighted sum over the first `T + 1` records of `traj`. Cyclic runs use the
/// component estimates stored in the trajectory.
pub fn metaloss(cfg: &MetaLossConfig, traj: &Trajectory) -> Result<f64> {
    let n = cfg.horizon() + 1;
    if traj.value.len() < n || traj.grad_sq.len() < n {
        return Err(Error::invalid(format!(
            "metaloss over T = {} needs {n} records, trajectory has {}",
            cfg.horizon(),
            traj.value.len()
        )));
    }
    Ok((0..n)
        .map(|t| cfg.alpha[t] * traj.grad_sq[t] + cfg.gamma[t] * traj.value[t])
        .sum())
}

/// Initial-point distribution `X0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitDistribution {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl InitDistribution {
    pub const DEFAULT_UNIFORM: Self = Self::Uniform { lo: 0.0, hi: 0.01 };
    pub const DEFAULT_GAUSSIAN: Self = Self::Gaussian { mean: 0.0, std: 0.1 };

    pub fn sample(&self, dim: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        match *self {
            Self::Uniform { lo, hi } => (0..dim).map(|_| lo + (hi - lo) * r.random::<f64>()).collect(),
            Self::Gaussian { mean, std } => (0..dim)
                .map(|_| mean + std * r.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::Gaussian { .. } => "gaussian",
        }
    }
}

impl FromStr for InitDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(Self::DEFAULT_UNIFORM),
            "gaussian" => Ok(Self::DEFAULT_GAUSSIAN),
            other => Err(Error::invalid(format!("unknown init distribution {other:?}"))),
        }
    }
}

/// Objective sampler `F`.
#[derive(Clone)]
pub enum ObjectiveFamily {
    /// Random quadratics with minimum value 0.
    Quadratic { dim: usize, condition: f64 },
    /// Random quadratics and zero-floored trig-perturbed quadratics, drawn
    /// with equal probability.
    Mixed { dim: usize, condition: f64 },
    Fixed(Arc<dyn Objective>),
}

impl fmt::Debug for ObjectiveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic { dim, condition } => write!(f, "Quadratic(d={dim}, k={condition})"),
            Self::Mixed { dim, condition } => write!(f, "Mixed(d={dim}, k={condition})"),
            Self::Fixed(o) => write!(f, "Fixed(d={})", o.dim()),
        }
    }
}

impl ObjectiveFamily {
    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic { dim, .. } | Self::Mixed { dim, .. } => *dim,
            Self::Fixed(o) => o.dim(),
        }
    }

    pub fn sample(&self, seed: u64) -> Result<Arc<dyn Objective>> {
        Ok(match self {
            Self::Quadratic { dim, condition } => Arc::new(make_centered_quadratic(*dim, *condition, seed)?),
            Self::Mixed { dim, condition } => {
                let q = make_centered_quadratic(*dim, *condition, seed)?;
                if rng::rng(rng::split(seed, 2)).random::<bool>() {
                    Arc::new(TrigQuadratic::new(q, TRIG_AMPLITUDE, TRIG_FREQUENCY).zero_floored())
                } else {
                    Arc::new(q)
                }
            }
            Self::Fixed(o) => o.clone(),
        })
    }
}

/// Stepsize of the full-gradient rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FullStepsize {
    /// `c / beta` of each sampled objective.
    PerBeta(f64),
    Fixed(f64),
}

impl FullStepsize {
    pub const DEFAULT: Self = Self::PerBeta(0.9);

    pub fn resolve(self, obj: &dyn Objective) -> Result<f64> {
        match self {
            Self::Fixed(eta) => Ok(eta),
            Self::PerBeta(c) if c == 0.9 => default_eta(obj).ok_or_else(no_beta),
            Self::PerBeta(c) => obj.beta().value().map(|b| c / b).ok_or_else(no_beta),
        }
    }
}

fn no_beta() -> Error {
    Error::invalid("objective has no smoothness constant; give eta explicitly")
}

/// How the inner rule is bound to a sampled objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RuleSpec {
    Full { eta: FullStepsize, allow_unsafe: bool },
    Cyclic { schedule: StepsizeSchedule },
}

impl RuleSpec {
    pub fn full_default() -> Self {
        Self::Full {
            eta: FullStepsize::DEFAULT,
            allow_unsafe: false,
        }
    }

    pub fn bind(&self, obj: &dyn Objective, innovation: InnovationSource) -> Result<UpdateRule> {
        Ok(match *self {
            Self::Full { eta, allow_unsafe } => UpdateRule::Full(FullGradientRule::bind(
                eta.resolve(obj)?,
                innovation,
                obj,
                allow_unsafe,
            )?),
            Self::Cyclic { schedule } => {
                if obj.num_components() == 0 {
                    return Err(Error::MissingComponents);
                }
                UpdateRule::Cyclic(CyclicRule::new(schedule, innovation))
            }
        })
    }
}

/// One sampled problem.
#[derive(Clone)]
pub struct Episode {
    pub seed: u64,
    pub objective: Arc<dyn Objective>,
    pub x0: Vec<f64>,
}

/// `E_{f ~ F, x0 ~ X0}` together with the inner rule.
#[derive(Clone, Debug)]
pub struct TaskDistribution {
    pub family: ObjectiveFamily,
    pub init: InitDistribution,
    pub episodes: usize,
    pub rule: RuleSpec,
}

impl TaskDistribution {
    pub const DEFAULT_EPISODES: usize = 10;

    pub fn new(family: ObjectiveFamily, rule: RuleSpec) -> Self {
        Self {
            family,
            init: InitDistribution::DEFAULT_UNIFORM,
            episodes: Self::DEFAULT_EPISODES,
            rule,
        }
    }

    pub fn episode(&self, seed: u64) -> Result<Episode> {
        let objective = self.family.sample(rng::split(seed, 0))?;
        let x0 = self.init.sample(objective.dim(), rng::split(seed, 1));
        Ok(Episode { seed, objective, x0 })
    }

    /// Episode `i` uses seed `split(seed, i)`.
    pub fn episode_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.episodes).map(|i| rng::split(seed, i as u64)).collect()
    }
}

/// Plain-arithmetic metaloss of one episode; `None` runs the rule with `v = 0`.
/// Divergent rollouts score `+inf`.
pub fn episode_metaloss(
    model: Option<&InnovationModel>,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    ep: &Episode,
) -> Result<f64> {
    let source = match model {
        Some(m) => InnovationSource::Learned(m.clone()),
        None => InnovationSource::None,
    };
    let rule = dist.rule.bind(ep.objective.as_ref(), source)?;
    let tr = rollout(&rule, ep.objective.as_ref(), &ep.x0, cfg.horizon(), RecordFlags::SCALARS)?;
    if tr.diverged() {
        return Ok(f64::INFINITY);
    }
    metaloss(cfg, &tr)
}

/// Mean metaloss over `dist.episodes` episodes drawn from `seed`, plus the
/// per-episode values in seed order.
pub fn estimate_expected_metaloss(
    model: Option<&InnovationModel>,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if dist.episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let values = dist
        .episode_seeds(seed)
        .into_par_iter()
        .map(|s| episode_metaloss(model, dist, cfg, &dist.episode(s)?))
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((mean, values))
}

/// Records the closed-loop rollout of `ep` on `tape` as a function of the
/// parameter column `theta` and returns the metaloss node.
///
/// With `truncation = Some(k)`, the iterate, previous update and operator
/// state are detached every `k` steps.
pub fn metaloss_on_tape(
    tape: &mut Tape,
    model_cfg: &ModelConfig,
    theta: Var,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    ep: &Episode,
    truncation: Option<usize>,
) -> Result<Var> {
    let obj = ep.objective.as_ref();
    let d = obj.dim();
    if ep.x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: ep.x0.len(),
            context: "episode x0".into(),
        });
    }
    if truncation == Some(0) {
        return Err(Error::invalid("truncation length must be positive"));
    }
    let m = ModelOnTape::bind(model_cfg, tape, theta);
    let impulse = ImpulseSignal::new(ep.x0.clone());
    let full_eta = match dist.rule {
        RuleSpec::Full { eta, allow_unsafe } => {
            // Same admission check as the plain path.
            let r = FullGradientRule::bind(eta.resolve(obj)?, InnovationSource::None, obj, allow_unsafe)?;
            Some(r.eta())
        }
        RuleSpec::Cyclic { .. } => None,
    };
    let components = obj.num_components();
    if full_eta.is_none() && components == 0 {
        return Err(Error::MissingComponents);
    }

    let mut x = tape.constant(Tensor::column(ep.x0.clone()));
    let mut prev = tape.constant(Tensor::zeros(d, 1));
    let mut state = m.z.zero_state(tape);
    let mut total = tape.constant_scalar(0.0);
    for t in 0..=cfg.horizon() {
        if let Some(k) = truncation {
            if t > 0 && t % k == 0 {
                x = tape.detach(x);
                prev = tape.detach(prev);
                for s in state.iter_mut() {
                    *s = tape.detach(*s);
                }
            }
        }
        let (f_obj, tau, epoch): (&dyn Objective, usize, usize) = match full_eta {
            Some(_) => (obj, 0, t),
            None => (
                obj.component(t % components).ok_or(Error::MissingComponents)?,
                t % components,
                t / components,
            ),
        };
        let w = if full_eta.is_some() { 1.0 } else { obj.component_weight(tau) };
        let g = f_obj.grad_on_tape(tape, x);
        let f = f_obj.value_on_tape(tape, x);
        let (g_est, f_est) = if w == 1.0 {
            (g, f)
        } else {
            (tape.scale(g, 1.0 / w), tape.scale(f, 1.0 / w))
        };

        let gsq = tape.dot(g_est, g_est);
        let a = tape.scale(gsq, cfg.alpha[t]);
        let b = tape.scale(f_est, cfg.gamma[t]);
        let term = tape.add(a, b);
        total = tape.add(total, term);
        if t == cfg.horizon() {
            break;
        }

        let input = tape.constant(Tensor::column(impulse.operator_input(t).to_vec()));
        let z = m.z.z_step(tape, &mut state, input);
        let omega = m.omega.forward(tape, x, g_est, prev, f_est);
        let u = match (full_eta, &dist.rule) {
            (Some(eta), _) => {
                let v = innovation_on_tape(tape, z, omega, 1.0);
                let step = tape.scale(g, -eta);
                tape.add(step, v)
            }
            (None, RuleSpec::Cyclic { schedule }) => {
                let eta = schedule.eta(epoch);
                let v = innovation_on_tape(tape, z, omega, eta);
                let s = tape.add(g, v);
                tape.scale(s, -eta)
            }
            (None, RuleSpec::Full { .. }) => unreachable!("full rule always has eta"),
        };
        x = tape.add(x, u);
        prev = u;
    }
    Ok(total)
}

/// Metaloss of one episode and its gradient with respect to `theta`.
pub fn episode_gradient(
    model: &InnovationModel,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    ep: &Episode,
    truncation: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta = tape.input(Tensor::column(model.theta().as_slice().to_vec()));
    let loss = metaloss_on_tape(&mut tape, model.config(), theta, dist, cfg, ep, truncation)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), grads.wrt(theta).into_data()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub truncation: Option<usize>,
    /// Writes `theta_0000.ckpt` (initial) and one checkpoint per epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.01,
            seed: 0,
            truncation: None,
            checkpoint_dir: None,
            jobs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean metaloss of the epoch's episodes at the parameters before the update.
    pub mean_metaloss: f64,
    pub grad_norm: f64,
    /// The meta-gradient was non-finite and the update was skipped.
    pub skipped: bool,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainReport {
    pub epochs: Vec<EpochRecord>,
    pub truncation: Option<usize>,
    pub initial_checkpoint: Option<PathBuf>,
}

impl MetaTrainReport {
    pub fn checkpoints(&self) -> Vec<PathBuf> {
        self.initial_checkpoint
            .iter()
            .cloned()
            .chain(self.epochs.iter().filter_map(|e| e.checkpoint.clone()))
            .collect()
    }

    /// Columns `epoch, mean_metaloss, grad_norm, skipped`; wall time is
    /// included only when asked since it varies between reruns.
    pub fn to_report(&self, with_timing: bool) -> Report {
        let mut cols = vec!["epoch", "mean_metaloss", "grad_norm", "skipped"];
        if with_timing {
            cols.push("wall_seconds");
        }
        let mut r = Report::new(&cols);
        for e in &self.epochs {
            let mut row = vec![e.epoch as f64, e.mean_metaloss, e.grad_norm, f64::from(u8::from(e.skipped))];
            if with_timing {
                row.push(e.wall_seconds);
            }
            r.push_row(row).expect("row width");
        }
        r.meta(
            "unrolling",
            match self.truncation {
                Some(k) => format!("truncated:{k}"),
                None => "full".to_string(),
            },
        );
        r
    }
}

fn epoch_gradient(
    model: &InnovationModel,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    episodes: &[Episode],
    truncation: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    let per: Vec<(f64, Vec<f64>)> = episodes
        .par_iter()
        .map(|ep| episode_gradient(model, dist, cfg, ep, truncation))
        .collect::<Result<_>>()?;
    // Fixed summation order, independent of the thread count.
    let n = per.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.theta().len()];
    for (l, g) in &per {
        loss += l;
        linalg::axpy(1.0, g, &mut grad);
    }
    Ok((loss / n, linalg::scaled(&grad, 1.0 / n)))
}

/// Adam on `theta` against the sampled metaloss. Epoch `k` draws its episodes
/// from `split(seed, k)`.
pub fn meta_train(
    model0: &InnovationModel,
    dist: &TaskDistribution,
    cfg: &MetaLossConfig,
    train: &MetaTrainConfig,
) -> Result<(InnovationModel, MetaTrainReport)> {
    let run = || -> Result<(InnovationModel, MetaTrainReport)> {
        if dist.episodes == 0 {
            return Err(Error::invalid("need at least one episode per epoch"));
        }
        let outer = BaselineOptimizer::new(BaselineKind::Adam, train.lr);
        outer.validate()?;
        let mut state = BaselineState::new(model0.theta().len());
        let mut model = model0.clone();
        let ckpt_path = |k: usize| train.checkpoint_dir.as_ref().map(|d| d.join(format!("theta_{k:04}.ckpt")));
        let initial_checkpoint = match ckpt_path(0) {
            Some(p) => {
                std::fs::create_dir_all(p.parent().expect("checkpoint dir"))?;
                model.write_checkpoint(&p)?;
                Some(p)
            }
            None => None,
        };
        let mut epochs = Vec::with_capacity(train.epochs);
        for k in 0..train.epochs {
            let started = Instant::now();
            let episodes = dist
                .episode_seeds(rng::split(train.seed, k as u64))
                .into_iter()
                .map(|s| dist.episode(s))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = epoch_gradient(&model, dist, cfg, &episodes, train.truncation)?;
            let skipped = !loss.is_finite() || !linalg::all_finite(&grad);
            if !skipped {
                let u = baseline_step(&outer, &grad, &mut state)?;
                let mut theta = model.theta().as_slice().to_vec();
                linalg::axpy(1.0, &u, &mut theta);
                model = model.with_theta(&theta)?;
            }
            let checkpoint = match ckpt_path(k + 1) {
                Some(p) => {
                    model.write_checkpoint(&p)?;
                    Some(p)
                }
                None => None,
            };
            epochs.push(EpochRecord {
                epoch: k,
                mean_metaloss: loss,
                grad_norm: if skipped { f64::NAN } else { linalg::norm(&grad) },
                skipped,
                wall_seconds: started.elapsed().as_secs_f64(),
                checkpoint,
            });
        }
        Ok((
            model,
            MetaTrainReport {
                epochs,
                truncation: train.truncation,
                initial_checkpoint,
            },
        ))
    };
    match train.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}
