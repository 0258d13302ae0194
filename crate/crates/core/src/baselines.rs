//! Hand-crafted comparison optimizers and their learning-rate tuner.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::update::{drive, RecordFlags, RuleKind, StepOutput, StepsizeSchedule, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    Gd,
    /// Incremental gradient with the cyclic schedule `lr / (e + 1)^p`.
    Sgd,
    HeavyBall,
    Nag,
    Adam,
    Rmsprop,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Gd,
        BaselineKind::Sgd,
        BaselineKind::HeavyBall,
        BaselineKind::Nag,
        BaselineKind::Adam,
        BaselineKind::Rmsprop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Gd => "gd",
            BaselineKind::Sgd => "sgd",
            BaselineKind::HeavyBall => "heavy-ball",
            BaselineKind::Nag => "nag",
            BaselineKind::Adam => "adam",
            BaselineKind::Rmsprop => "rmsprop",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s:?}")))
    }
}

/// Parses a comma list such as `gd,adam`; the empty string is the empty list.
pub fn parse_baseline_list(s: &str) -> Result<Vec<BaselineKind>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineOptimizer {
    pub kind: BaselineKind,
    pub lr: f64,
    /// Heavy-ball and NAG.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam and RMSprop denominator offset.
    pub eps: f64,
    /// RMSprop squared-gradient decay.
    pub decay: f64,
    /// SGD schedule exponent.
    pub power: f64,
}

impl BaselineOptimizer {
    pub fn new(kind: BaselineKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.9,
            power: 1.0,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("decay", self.decay)?;
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.kind == BaselineKind::Sgd {
            StepsizeSchedule::new(self.lr, self.power)?;
        }
        Ok(())
    }
}

/// Caller-owned optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    /// Steps taken so far.
    pub t: usize,
    /// Steps per epoch for the SGD schedule.
    pub steps_per_epoch: usize,
    /// Momentum buffer, or Adam's first moment.
    pub m: Vec<f64>,
    /// Adam's second moment or RMSprop's running square.
    pub s: Vec<f64>,
}

impl BaselineState {
    pub fn new(dim: usize) -> Self {
        Self::with_epoch_length(dim, 1)
    }

    pub fn with_epoch_length(dim: usize, steps_per_epoch: usize) -> Self {
        Self {
            t: 0,
            steps_per_epoch: steps_per_epoch.max(1),
            m: vec![0.0; dim],
            s: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One update `u_t` of the named method; advances `state`.
pub fn baseline_step(opt: &BaselineOptimizer, grad: &[f64], state: &mut BaselineState) -> Result<Vec<f64>> {
    if grad.len() != state.dim() {
        return Err(Error::Dimension {
            expected: state.dim(),
            found: grad.len(),
            context: format!("{} state", opt.kind),
        });
    }
    let lr = opt.lr;
    let u = match opt.kind {
        BaselineKind::Gd => grad.iter().map(|g| -lr * g).collect(),
        BaselineKind::Sgd => {
            let eta = StepsizeSchedule::new(lr, opt.power)?.eta(state.t / state.steps_per_epoch);
            // Same arithmetic as the cyclic rule with a zero innovation.
            grad.iter().map(|g| -eta * (g + 0.0)).collect()
        }
        BaselineKind::HeavyBall => {
            // u_t = -lr g_t + mu u_{t-1}
            for (m, g) in state.m.iter_mut().zip(grad) {
                *m = -lr * g + opt.momentum * *m;
            }
            state.m.clone()
        }
        BaselineKind::Nag => {
            // x_{t+1} = y_t - lr g_t, y_{t+1} = x_{t+1} + mu (x_{t+1} - x_t) with
            // y the iterate. Tracking m_t = x_{t+1} - x_t gives
            // m_t = mu m_{t-1} - lr g_t and u_t = -lr g_t + mu m_t.
            state
                .m
                .iter_mut()
                .zip(grad)
                .map(|(m, g)| {
                    *m = opt.momentum * *m - lr * g;
                    -lr * g + opt.momentum * *m
                })
                .collect()
        }
        BaselineKind::Adam => {
            let k = (state.t + 1) as i32;
            let c1 = 1.0 - opt.beta1.powi(k);
            let c2 = 1.0 - opt.beta2.powi(k);
            state
                .m
                .iter_mut()
                .zip(state.s.iter_mut())
                .zip(grad)
                .map(|((m, s), g)| {
                    *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                    *s = opt.beta2 * *s + (1.0 - opt.beta2) * g * g;
                    -lr * (*m / c1) / ((*s / c2).sqrt() + opt.eps)
                })
                .collect()
        }
        BaselineKind::Rmsprop => state
            .s
            .iter_mut()
            .zip(grad)
            .map(|(s, g)| {
                *s = opt.decay * *s + (1.0 - opt.decay) * g * g;
                -lr * g / (s.sqrt() + opt.eps)
            })
            .collect(),
    };
    state.t += 1;
    Ok(u)
}

/// Gradient oracle a baseline run consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Full,
    /// `grad f_{t mod M}`, the same stream as the cyclic rule.
    Cyclic,
}

impl Sampling {
    /// SGD always consumes components when the objective has them.
    pub fn for_kind(kind: BaselineKind, obj: &dyn Objective) -> Self {
        if kind == BaselineKind::Sgd && obj.num_components() > 0 {
            Sampling::Cyclic
        } else {
            Sampling::Full
        }
    }

    fn rule_kind(self, obj: &dyn Objective) -> Result<RuleKind> {
        match self {
            Sampling::Full => Ok(RuleKind::Full),
            Sampling::Cyclic => match obj.num_components() {
                0 => Err(Error::MissingComponents),
                m => Ok(RuleKind::Cyclic(m)),
            },
        }
    }
}

pub fn run_baseline(
    opt: &BaselineOptimizer,
    obj: &dyn Objective,
    x0: &[f64],
    steps: usize,
    sampling: Sampling,
    record: RecordFlags,
) -> Result<Trajectory> {
    opt.validate()?;
    let kind = sampling.rule_kind(obj)?;
    let per_epoch = match kind {
        RuleKind::Full => 1,
        RuleKind::Cyclic(m) => m,
    };
    let mut state = BaselineState::with_epoch_length(x0.len(), per_epoch);
    drive(kind, obj, x0, steps, record, |inp| {
        let eta = match opt.kind {
            BaselineKind::Sgd => StepsizeSchedule::new(opt.lr, opt.power)?.eta(inp.epoch),
            _ => opt.lr,
        };
        let u = baseline_step(opt, inp.grad, &mut state)?;
        Ok(StepOutput {
            v: vec![0.0; u.len()],
            u,
            z_norm: 0.0,
            eta,
        })
    })
}

/// `n` points log-spaced from `lo` to `hi`, inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(Error::invalid(format!("bad grid [{lo}, {hi}] x {n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect())
}

/// `1e-4 ... 1e0`, 13 points.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-4, 1.0, 13).expect("static grid")
}

/// Learning rate minimizing the mean of `f(x_T)` over `starts`.
///
/// Runs that diverge or end non-finite score `+inf`. Ties go to the smaller
/// rate. Returns the chosen rate and the per-rate scores in ascending-rate
/// order.
pub fn tune_learning_rate(
    base: &BaselineOptimizer,
    obj: &dyn Objective,
    grid: &[f64],
    steps: usize,
    starts: &[Vec<f64>],
    sampling: Sampling,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::invalid("learning-rate grid is empty"));
    }
    if starts.is_empty() {
        return Err(Error::invalid("tuning needs at least one start point"));
    }
    let mut rates = grid.to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut scores = Vec::with_capacity(rates.len());
    for &lr in &rates {
        let opt = BaselineOptimizer { lr, ..*base };
        let mut total = 0.0;
        for x0 in starts {
            let tr = run_baseline(&opt, obj, x0, steps, sampling, RecordFlags::SCALARS)?;
            let f = obj.value(&tr.x_final);
            total += if tr.diverged() || !f.is_finite() { f64::INFINITY } else { f };
        }
        scores.push((lr, total / starts.len() as f64));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(lr, s) in &scores {
        if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
            best = Some((lr, s));
        }
    }
    match best {
        Some((lr, _)) => Ok((lr, scores)),
        None => Err(Error::AllDiverged(rates)),
    }
}
