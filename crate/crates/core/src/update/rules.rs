use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::Objective;
use crate::stable::{
    assemble_features, innovation_batch, innovation_full, FeatureMode, FeatureWindow,
    ImpulseSignal, InnovationModel, OperatorState,
};

use super::schedule::StepsizeSchedule;
use super::trajectory::{Probe, RuleKind, Trajectory, DIVERGENCE_THRESHOLD};

/// Where `v_t` comes from.
#[derive(Clone, Debug)]
pub enum InnovationSource {
    None,
    /// `v_t` from Z and Ω.
    Learned(InnovationModel),
    /// A fixed open-loop sequence; zero once exhausted. For cyclic rules the
    /// entries are the `v_t` inside `-eta_e (grad f_tau + v_t)`.
    Sequence(Vec<Vec<f64>>),
}

/// Per-rollout state of an innovation source.
#[derive(Clone, Debug)]
pub struct InnovationState {
    op: Option<OperatorState>,
    impulse: ImpulseSignal,
}

impl InnovationSource {
    pub fn start(&self, x0: &[f64]) -> InnovationState {
        InnovationState {
            op: match self {
                InnovationSource::Learned(m) => Some(m.operator().zero_state()),
                _ => None,
            },
            impulse: ImpulseSignal::new(x0.to_vec()),
        }
    }

    /// `(v_t, |z_t|)`. `eta` is `Some(eta_e)` for the cyclic combinator.
    fn next(
        &self,
        st: &mut InnovationState,
        input: &StepInput<'_>,
        eta: Option<f64>,
    ) -> Result<(Vec<f64>, f64)> {
        let d = input.x.len();
        match self {
            InnovationSource::None => Ok((vec![0.0; d], 0.0)),
            InnovationSource::Sequence(seq) => {
                let v = seq.get(input.t).cloned().unwrap_or_else(|| vec![0.0; d]);
                if v.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        found: v.len(),
                        context: "innovation sequence entry".into(),
                    });
                }
                let n = linalg::norm(&v);
                Ok((v, eta.map_or(n, |e| n / e)))
            }
            InnovationSource::Learned(model) => {
                let op_state = st.op.as_mut().expect("learned source has operator state");
                let z = model
                    .operator()
                    .z_step(op_state, &st.impulse.operator_input(input.t))?;
                let mode = if input.component.is_some() {
                    FeatureMode::Batch { share: input.weight }
                } else {
                    FeatureMode::Full
                };
                let feats = assemble_features(
                    &FeatureWindow {
                        x: input.x,
                        grad: input.grad,
                        loss: input.value,
                        prev_update: input.prev_update,
                    },
                    mode,
                )?;
                let omega = model.features().forward(&feats)?;
                let v = match eta {
                    None => innovation_full(&z, &omega),
                    Some(e) => innovation_batch(&z, &omega, e)?,
                };
                Ok((v, linalg::norm(&z)))
            }
        }
    }
}

/// `u_t = -eta grad f(x_t) + v_t` with `v_t = |z_t| omega_t / |omega_t|`.
#[derive(Clone, Debug)]
pub struct FullGradientRule {
    eta: f64,
    innovation: InnovationSource,
    certified: bool,
}

impl FullGradientRule {
    /// Binds the stepsize to `obj`: `eta < 1/beta` is required unless
    /// `allow_unsafe`. Objectives without a smoothness constant yield an
    /// uncertified rule.
    pub fn bind(
        eta: f64,
        innovation: InnovationSource,
        obj: &dyn Objective,
        allow_unsafe: bool,
    ) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("stepsize must be positive, got {eta}")));
        }
        let certified = match obj.beta().value() {
            Some(_) if obj.non_smooth() => false,
            Some(beta) => {
                let ok = eta * beta < 1.0;
                if !ok && !allow_unsafe {
                    return Err(Error::CertificateViolation {
                        eta,
                        limit: 1.0 / beta,
                    });
                }
                ok
            }
            None => false,
        };
        Ok(Self {
            eta,
            innovation,
            certified,
        })
    }

    pub fn gradient_descent(eta: f64, obj: &dyn Objective) -> Result<Self> {
        Self::bind(eta, InnovationSource::None, obj, false)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn innovation(&self) -> &InnovationSource {
        &self.innovation
    }

    /// Whether `eta < 1/beta` was verified at binding.
    pub fn certified(&self) -> bool {
        self.certified
    }
}

/// `eta = 0.9 / beta`.
pub fn default_eta(obj: &dyn Objective) -> Option<f64> {
    obj.beta().value().filter(|b| *b > 0.0).map(|b| 0.9 / b)
}

/// `x_{t+1} = x_t - eta_e (grad f_tau(x_t) + v_t)`, `tau = t mod M`,
/// `e = floor(t / M)`, `v_t = eta_e |z_t| omega_t / |omega_t|`.
#[derive(Clone, Debug)]
pub struct CyclicRule {
    schedule: StepsizeSchedule,
    innovation: InnovationSource,
}

impl CyclicRule {
    pub fn new(schedule: StepsizeSchedule, innovation: InnovationSource) -> Self {
        Self {
            schedule,
            innovation,
        }
    }

    pub fn schedule(&self) -> &StepsizeSchedule {
        &self.schedule
    }

    pub fn innovation(&self) -> &InnovationSource {
        &self.innovation
    }
}

#[derive(Clone, Debug)]
pub enum UpdateRule {
    Full(FullGradientRule),
    Cyclic(CyclicRule),
}

impl UpdateRule {
    pub fn innovation(&self) -> &InnovationSource {
        match self {
            UpdateRule::Full(r) => &r.innovation,
            UpdateRule::Cyclic(r) => &r.innovation,
        }
    }
}

/// What an update policy sees at step `t`.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub t: usize,
    pub x: &'a [f64],
    /// `grad f(x_t)`, or `grad f_tau(x_t)` for cyclic runs.
    pub grad: &'a [f64],
    /// `f(x_t)`, or `f_tau(x_t)` for cyclic runs.
    pub value: f64,
    /// `Some(tau)` for cyclic runs.
    pub component: Option<usize>,
    /// Component weight `w_tau` (1 for full-gradient runs).
    pub weight: f64,
    pub epoch: usize,
    pub prev_update: Option<&'a [f64]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub z_norm: f64,
    pub eta: f64,
}

/// Caller-owned state of a rollout in progress.
#[derive(Clone, Debug)]
pub struct RolloutState {
    pub t: usize,
    pub x: Vec<f64>,
    pub prev_update: Option<Vec<f64>>,
    innovation: InnovationState,
}

impl RolloutState {
    pub fn new(rule: &UpdateRule, x0: Vec<f64>) -> Self {
        Self {
            t: 0,
            innovation: rule.innovation().start(&x0),
            x: x0,
            prev_update: None,
        }
    }
}

/// One update plus the oracle values it consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub grad: Vec<f64>,
    pub value: f64,
    pub out: StepOutput,
}

fn full_policy(
    rule: &FullGradientRule,
    st: &mut InnovationState,
    input: &StepInput<'_>,
) -> Result<StepOutput> {
    let (v, z_norm) = rule.innovation.next(st, input, None)?;
    let u = input
        .grad
        .iter()
        .zip(&v)
        .map(|(g, vi)| -rule.eta * g + vi)
        .collect();
    Ok(StepOutput {
        u,
        v,
        z_norm,
        eta: rule.eta,
    })
}

fn cyclic_policy(
    rule: &CyclicRule,
    st: &mut InnovationState,
    input: &StepInput<'_>,
) -> Result<StepOutput> {
    let eta = rule.schedule.eta(input.epoch);
    let (v, z_norm) = rule.innovation.next(st, input, Some(eta))?;
    let u = input
        .grad
        .iter()
        .zip(&v)
        .map(|(g, vi)| -eta * (g + vi))
        .collect();
    Ok(StepOutput { u, v, z_norm, eta })
}

fn check_dim(obj: &dyn Objective, x: &[f64]) -> Result<()> {
    if x.len() != obj.dim() {
        return Err(Error::Dimension {
            expected: obj.dim(),
            found: x.len(),
            context: "iterate".into(),
        });
    }
    Ok(())
}

pub fn step_full(
    rule: &FullGradientRule,
    obj: &dyn Objective,
    state: &mut RolloutState,
) -> Result<StepRecord> {
    check_dim(obj, &state.x)?;
    let grad = obj.grad(&state.x);
    let value = obj.value(&state.x);
    let input = StepInput {
        t: state.t,
        x: &state.x,
        grad: &grad,
        value,
        component: None,
        weight: 1.0,
        epoch: state.t,
        prev_update: state.prev_update.as_deref(),
    };
    let out = full_policy(rule, &mut state.innovation, &input)?;
    linalg::axpy(1.0, &out.u, &mut state.x);
    state.prev_update = Some(out.u.clone());
    state.t += 1;
    Ok(StepRecord { grad, value, out })
}

pub fn step_cyclic(
    rule: &CyclicRule,
    obj: &dyn Objective,
    state: &mut RolloutState,
) -> Result<StepRecord> {
    check_dim(obj, &state.x)?;
    let m = obj.num_components();
    if m == 0 {
        return Err(Error::MissingComponents);
    }
    let (tau, epoch) = (state.t % m, state.t / m);
    let comp = obj.component(tau).ok_or(Error::MissingComponents)?;
    let grad = comp.grad(&state.x);
    let value = comp.value(&state.x);
    let input = StepInput {
        t: state.t,
        x: &state.x,
        grad: &grad,
        value,
        component: Some(tau),
        weight: obj.component_weight(tau),
        epoch,
        prev_update: state.prev_update.as_deref(),
    };
    let out = cyclic_policy(rule, &mut state.innovation, &input)?;
    linalg::axpy(1.0, &out.u, &mut state.x);
    state.prev_update = Some(out.u.clone());
    state.t += 1;
    Ok(StepRecord { grad, value, out })
}

/// What to keep besides the scalar series and probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordFlags {
    pub vectors: bool,
}

impl RecordFlags {
    pub const ALL: Self = Self { vectors: true };
    pub const SCALARS: Self = Self { vectors: false };
}

fn is_divergent(x: &[f64]) -> bool {
    !linalg::all_finite(x) || linalg::norm(x) > DIVERGENCE_THRESHOLD
}

/// Runs `steps` updates of an arbitrary policy from `x0`.
///
/// Full-gradient runs feed the policy `grad f(x_t)`. Cyclic runs feed
/// `grad f_tau(x_t)` and take a full-gradient probe every `M` steps, which the
/// policy never sees.
pub fn drive<F>(
    kind: RuleKind,
    obj: &dyn Objective,
    x0: &[f64],
    steps: usize,
    record: RecordFlags,
    mut policy: F,
) -> Result<Trajectory>
where
    F: FnMut(&StepInput<'_>) -> Result<StepOutput>,
{
    if steps == 0 {
        return Err(Error::invalid("rollout needs T >= 1"));
    }
    check_dim(obj, x0)?;
    if let RuleKind::Cyclic(m) = kind {
        if obj.num_components() == 0 {
            return Err(Error::MissingComponents);
        }
        if m != obj.num_components() {
            return Err(Error::invalid(format!(
                "cyclic rule over {m} components, objective has {}",
                obj.num_components()
            )));
        }
    }
    let mut traj = Trajectory::new(kind, x0.to_vec());
    let mut x = x0.to_vec();
    let mut prev: Option<Vec<f64>> = None;

    // Oracle values at the current point: (grad, value, component, weight).
    let observe = |x: &[f64], t: usize| -> (Vec<f64>, f64, Option<usize>, f64) {
        match kind {
            RuleKind::Full => (obj.grad(x), obj.value(x), None, 1.0),
            RuleKind::Cyclic(m) => {
                let tau = t % m;
                let c = obj.component(tau).expect("component index below M");
                (c.grad(x), c.value(x), Some(tau), obj.component_weight(tau))
            }
        }
    };
    let push_point = |traj: &mut Trajectory, x: &[f64], t: usize| -> (Vec<f64>, f64, Option<usize>, f64) {
        let (g, value, comp, w) = observe(x, t);
        traj.value.push(value / w);
        traj.grad_sq.push(linalg::norm_sq(&g) / (w * w));
        if let RuleKind::Cyclic(m) = kind {
            if t % m == 0 {
                traj.probes.push(Probe {
                    t,
                    x: x.to_vec(),
                    grad: obj.grad(x),
                    value: obj.value(x),
                });
            }
        }
        if record.vectors {
            traj.x.push(x.to_vec());
            traj.g.push(g.clone());
        }
        (g, value, comp, w)
    };

    for t in 0..steps {
        let (g, value, component, weight) = push_point(&mut traj, &x, t);
        let epoch = match kind {
            RuleKind::Full => t,
            RuleKind::Cyclic(m) => t / m,
        };
        let input = StepInput {
            t,
            x: &x,
            grad: &g,
            value,
            component,
            weight,
            epoch,
            prev_update: prev.as_deref(),
        };
        let out = policy(&input)?;
        if out.u.len() != x.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                found: out.u.len(),
                context: "policy update".into(),
            });
        }
        linalg::axpy(1.0, &out.u, &mut x);
        traj.u_sq.push(linalg::norm_sq(&out.u));
        traj.v_sq.push(linalg::norm_sq(&out.v));
        traj.z_norm.push(out.z_norm);
        traj.eta.push(out.eta);
        if record.vectors {
            traj.u.push(out.u.clone());
            traj.v.push(out.v);
        }
        prev = Some(out.u);
        if is_divergent(&x) {
            traj.diverged_at = Some(t + 1);
            break;
        }
    }
    let t_end = traj.steps();
    push_point(&mut traj, &x, t_end);
    traj.x_final = x;
    Ok(traj)
}

/// Closed-loop rollout of a convergent rule.
pub fn rollout(
    rule: &UpdateRule,
    obj: &dyn Objective,
    x0: &[f64],
    steps: usize,
    record: RecordFlags,
) -> Result<Trajectory> {
    let mut st = rule.innovation().start(x0);
    match rule {
        UpdateRule::Full(r) => drive(RuleKind::Full, obj, x0, steps, record, |inp| {
            full_policy(r, &mut st, inp)
        }),
        UpdateRule::Cyclic(r) => {
            let m = obj.num_components();
            if m == 0 {
                return Err(Error::MissingComponents);
            }
            drive(RuleKind::Cyclic(m), obj, x0, steps, record, |inp| {
                cyclic_policy(r, &mut st, inp)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::objectives::{Quadratic, Separable};

    fn half_square() -> Quadratic {
        Quadratic::new(vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn gd_on_half_square_is_geometric() {
        let f = half_square();
        let rule = UpdateRule::Full(FullGradientRule::gradient_descent(0.5, &f).unwrap());
        let tr = rollout(&rule, &f, &[1.0], 200, RecordFlags::ALL).unwrap();
        for t in 0..30 {
            assert_eq!(tr.x[t][0], 0.5f64.powi(t as i32));
        }
        let k = *tr.grad_energy().last().unwrap();
        assert!((k - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn critical_point_is_fixed() {
        let f = half_square();
        let rule = UpdateRule::Full(FullGradientRule::gradient_descent(0.5, &f).unwrap());
        let tr = rollout(&rule, &f, &[0.0], 5, RecordFlags::ALL).unwrap();
        assert!(tr.x.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn certificate_refused_without_override() {
        let f = half_square();
        assert!(matches!(
            FullGradientRule::gradient_descent(1.0, &f),
            Err(Error::CertificateViolation { .. })
        ));
        let r = FullGradientRule::bind(2.0, InnovationSource::None, &f, true).unwrap();
        assert!(!r.certified());
    }

    #[test]
    fn cyclic_recursion_and_indices() {
        let quarter = Arc::new(Quadratic::new(vec![0.5], vec![0.0]).unwrap());
        let f = Separable::new(vec![quarter.clone() as Arc<dyn crate::objectives::Objective>, quarter]).unwrap();
        let rule = CyclicRule::new(StepsizeSchedule::harmonic(0.5).unwrap(), InnovationSource::None);
        let mut st = RolloutState::new(&UpdateRule::Cyclic(rule.clone()), vec![1.0]);
        step_cyclic(&rule, &f, &mut st).unwrap();
        assert_eq!(st.x, vec![0.75]);
        step_cyclic(&rule, &f, &mut st).unwrap();
        assert_eq!(st.x, vec![0.5625]);

        let f3 = Separable::identical(Arc::new(half_square()), 3).unwrap();
        let mut st = RolloutState::new(&UpdateRule::Cyclic(rule.clone()), vec![1.0]);
        st.t = 7;
        let rec = step_cyclic(&rule, &f3, &mut st).unwrap();
        assert_eq!(rec.out.eta, 0.5 / 3.0);
        assert!(step_cyclic(&rule, &half_square(), &mut st).is_err());
    }

    #[test]
    fn single_step_rollout_and_divergence_flag() {
        let f = half_square();
        let rule = UpdateRule::Full(FullGradientRule::gradient_descent(0.5, &f).unwrap());
        let tr = rollout(&rule, &f, &[1.0], 1, RecordFlags::ALL).unwrap();
        assert_eq!(tr.x.len(), 2);
        assert_eq!(tr.steps(), 1);

        let wild = UpdateRule::Full(FullGradientRule::bind(3.0, InnovationSource::None, &f, true).unwrap());
        let tr = rollout(&wild, &f, &[1.0], 1000, RecordFlags::SCALARS).unwrap();
        assert!(tr.diverged());
        assert!(tr.steps() < 1000);
    }
}
