//! Executable convergence theory: square-sum diagnostics, the descent-bound
//! monitor, innovation reconstruction with trajectory replay, and the checks
//! behind the cyclic convergence result.

use crate::data::Report;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::{Objective, SampleBox};
use crate::rng;
use crate::update::{
    rollout, FullGradientRule, InnovationSource, RecordFlags, RuleKind, Trajectory, UpdateRule,
};

/// Share of the horizon treated as the tail.
pub const TAIL_FRACTION: f64 = 0.1;
/// Tail energy at most this share of the total counts as finite energy.
pub const EMPIRICAL_TAIL_RATIO: f64 = 1e-8;
/// Replay tolerance for the equivalence test.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

fn tail_len(n: usize) -> usize {
    ((n as f64 * TAIL_FRACTION).ceil() as usize).min(n)
}

fn partial_sums(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn tail_ratio(values: &[f64]) -> (f64, f64) {
    let total: f64 = values.iter().sum();
    let tail: f64 = values[values.len() - tail_len(values.len())..].iter().sum();
    (tail, if total > 0.0 { tail / total } else { 0.0 })
}

/// Square-sum partial sums of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    /// Times of the full-gradient records.
    pub times: Vec<usize>,
    /// `K_grad` partial sums over the full-gradient records.
    pub k_grad: Vec<f64>,
    /// `K_pi` partial sums over the updates.
    pub k_update: Vec<f64>,
    pub tail_grad: f64,
    pub tail_update: f64,
    /// Tail energy over total energy (0 when the total is 0).
    pub tail_ratio_grad: f64,
    pub tail_ratio_update: f64,
    pub diverged: bool,
}

impl ConvergenceReport {
    pub fn total_grad(&self) -> f64 {
        self.k_grad.last().copied().unwrap_or(0.0)
    }

    pub fn total_update(&self) -> f64 {
        self.k_update.last().copied().unwrap_or(0.0)
    }

    /// Finite energy judged from the tail: both ratios at most `threshold`
    /// and no divergence.
    pub fn square_sum_convergent(&self, threshold: f64) -> bool {
        !self.diverged && self.tail_ratio_grad <= threshold && self.tail_ratio_update <= threshold
    }

    /// Partial sums as columns `t, k_grad, k_update`; `k_update` is NaN where
    /// the time has no update.
    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["t", "k_grad", "k_update"]);
        for (&t, &k) in self.times.iter().zip(&self.k_grad) {
            let ku = self.k_update.get(t).copied().unwrap_or(f64::NAN);
            r.push_row(vec![t as f64, k, ku]).expect("row width");
        }
        r.meta("total_grad", self.total_grad())
            .meta("total_update", self.total_update())
            .meta("tail_ratio_grad", self.tail_ratio_grad)
            .meta("tail_ratio_update", self.tail_ratio_update)
            .meta("diverged", self.diverged)
            .meta("square_sum_convergent", self.square_sum_convergent(EMPIRICAL_TAIL_RATIO));
        r
    }
}

pub fn square_sum_diagnostics(traj: &Trajectory) -> Result<ConvergenceReport> {
    let records = traj.full_grad_sq();
    if records.is_empty() {
        return Err(Error::invalid("trajectory has no full-gradient records"));
    }
    let (times, g): (Vec<usize>, Vec<f64>) = records.into_iter().unzip();
    let (tail_grad, tail_ratio_grad) = tail_ratio(&g);
    let (tail_update, tail_ratio_update) = if traj.u_sq.is_empty() {
        (0.0, 0.0)
    } else {
        tail_ratio(&traj.u_sq)
    };
    Ok(ConvergenceReport {
        times,
        k_grad: partial_sums(&g),
        k_update: partial_sums(&traj.u_sq),
        tail_grad,
        tail_update,
        tail_ratio_grad,
        tail_ratio_update,
        diverged: traj.diverged(),
    })
}

/// Young's-inequality parameter of the descent bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Epsilon {
    /// Twice the threshold `1 / (2 eta (1 - beta eta))`.
    Auto,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentBoundReport {
    pub epsilon: f64,
    pub threshold: f64,
    pub rho: f64,
    pub f_min: f64,
    /// `f_min` is the running minimum along the trajectory, not a known bound.
    pub surrogate: bool,
    /// `sum_{t <= T} |grad f(x_t)|^2` for each prefix `T`.
    pub lhs: Vec<f64>,
    /// Right-hand side for each prefix.
    pub rhs: Vec<f64>,
    /// First prefix where the bound fails.
    pub first_violation: Option<usize>,
}

impl DescentBoundReport {
    pub fn holds(&self) -> bool {
        self.first_violation.is_none()
    }

    pub fn violations(&self) -> usize {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .filter(|(l, r)| !bound_holds(**l, **r))
            .count()
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["t", "lhs", "rhs"]);
        for (t, (l, h)) in self.lhs.iter().zip(&self.rhs).enumerate() {
            r.push_row(vec![t as f64, *l, *h]).expect("row width");
        }
        r.meta("epsilon", self.epsilon)
            .meta("rho", self.rho)
            .meta("f_min", self.f_min)
            .meta("surrogate", self.surrogate)
            .meta("holds", self.holds());
        r
    }
}

// Relative slack for rounding in the two accumulations.
fn bound_holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-12 * rhs.abs().max(lhs.abs())
}

/// Checks, for every prefix `T`,
/// `sum_{t<=T} |g_t|^2 <= (2 eps / rho)(f(x0) - f_min) + (eps / rho)(eps + 2 beta) sum_{t<=T} |v_t|^2`
/// with `rho = 2 eta eps (1 - beta eta) - 1`.
///
/// `f_min` falls back to the smallest recorded value when `lower_bound` is
/// `None`; the report is then flagged as a surrogate.
pub fn descent_bound_monitor(
    traj: &Trajectory,
    beta: f64,
    eta: f64,
    epsilon: Epsilon,
    lower_bound: Option<f64>,
) -> Result<DescentBoundReport> {
    if traj.kind != RuleKind::Full {
        return Err(Error::invalid("descent-bound monitor needs a full-gradient trajectory"));
    }
    if !(beta > 0.0) || !(eta > 0.0 && eta * beta < 1.0) {
        return Err(Error::invalid(format!(
            "monitor needs 0 < eta < 1/beta, got eta = {eta}, beta = {beta}"
        )));
    }
    let threshold = 1.0 / (2.0 * eta * (1.0 - beta * eta));
    let eps = match epsilon {
        Epsilon::Auto => 2.0 * threshold,
        Epsilon::Value(e) => e,
    };
    if !(eps > threshold) {
        return Err(Error::invalid(format!(
            "epsilon {eps} must exceed the threshold {threshold}"
        )));
    }
    let rho = 2.0 * eta * eps * (1.0 - beta * eta) - 1.0;
    let (f_min, surrogate) = match lower_bound {
        Some(v) => (v, false),
        None => (
            traj.value.iter().copied().fold(f64::INFINITY, f64::min),
            true,
        ),
    };
    let f0 = traj.value[0];
    let a = 2.0 * eps / rho * (f0 - f_min);
    let b = eps / rho * (eps + 2.0 * beta);
    let lhs = partial_sums(&traj.grad_sq[..traj.steps()]);
    let rhs: Vec<f64> = partial_sums(&traj.v_sq).into_iter().map(|s| a + b * s).collect();
    let first_violation = lhs.iter().zip(&rhs).position(|(l, r)| !bound_holds(*l, *r));
    Ok(DescentBoundReport {
        epsilon: eps,
        threshold,
        rho,
        f_min,
        surrogate,
        lhs,
        rhs,
        first_violation,
    })
}

/// `V_t = eta g_t + u_t` recorded from a source trajectory; replayed open loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedInnovation {
    pub eta: f64,
    pub x0: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

impl ReconstructedInnovation {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.v.iter().map(|v| linalg::norm_sq(v)).sum()
    }

    pub fn as_source(&self) -> InnovationSource {
        InnovationSource::Sequence(self.v.clone())
    }
}

pub fn reconstruct_innovation(source: &Trajectory, eta: f64) -> Result<ReconstructedInnovation> {
    if source.kind != RuleKind::Full {
        return Err(Error::invalid("reconstruction needs full-gradient records"));
    }
    if !source.has_vectors() || source.u.len() != source.steps() {
        return Err(Error::invalid("source trajectory lacks gradient and update records"));
    }
    let v = source
        .g
        .iter()
        .zip(&source.u)
        .map(|(g, u)| g.iter().zip(u).map(|(gi, ui)| eta * gi + ui).collect())
        .collect();
    Ok(ReconstructedInnovation {
        eta,
        x0: source.x0.clone(),
        v,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// `max_t |x_t^replay - x_t^source|`.
    pub max_deviation: f64,
    pub deviations: Vec<f64>,
    /// First step where the induction `x_t^replay = x_t^source` fails at `tol`.
    pub first_failure: Option<usize>,
    pub tol: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Replays `x_{t+1} = x_t - eta grad f(x_t) + V_t` from the source's `x0` and
/// compares iterates step by step.
pub fn equivalence_test(
    source: &Trajectory,
    recon: &ReconstructedInnovation,
    obj: &dyn Objective,
    eta: f64,
    tol: f64,
) -> Result<EquivalenceReport> {
    if !source.has_vectors() {
        return Err(Error::invalid("source trajectory lacks iterate records"));
    }
    if recon.len() != source.steps() || recon.x0 != source.x0 {
        return Err(Error::invalid("reconstruction does not belong to this source"));
    }
    let rule = FullGradientRule::bind(eta, recon.as_source(), obj, true)?;
    let replay = rollout(
        &UpdateRule::Full(rule),
        obj,
        &source.x0,
        source.steps(),
        RecordFlags::ALL,
    )?;
    if replay.x.len() != source.x.len() {
        return Err(Error::invalid("replay stopped early (divergence)"));
    }
    let deviations: Vec<f64> = replay
        .x
        .iter()
        .zip(&source.x)
        .map(|(a, b)| linalg::max_abs_diff(a, b))
        .collect();
    let max_deviation = deviations.iter().copied().fold(0.0, f64::max);
    let first_failure = deviations.iter().position(|d| !(*d <= tol));
    Ok(EquivalenceReport {
        max_deviation,
        deviations,
        first_failure,
        tol,
    })
}

/// Least-squares line `y ~ a + b x` plus the largest positive residual, so
/// `y <= (a + max_residual) + b x` on the samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub max_residual: f64,
}

pub fn fit_affine(xs: &[f64], ys: &[f64]) -> Result<AffineFit> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::invalid("affine fit needs equal, non-empty samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let max_residual = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| y - intercept - slope * x)
        .fold(0.0, f64::max);
    Ok(AffineFit {
        intercept,
        slope,
        max_residual,
    })
}

/// Fit of `max_i |grad f_i(x)|` against `|grad f(x)|` on sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub fit: AffineFit,
    pub samples: usize,
}

impl AssumptionReport {
    pub fn a(&self) -> f64 {
        self.fit.intercept
    }

    pub fn b(&self) -> f64 {
        self.fit.slope
    }
}

pub fn growth_assumption_probe(
    obj: &dyn Objective,
    region: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    let m = obj.num_components();
    if m == 0 {
        return Err(Error::MissingComponents);
    }
    if region.dim() != obj.dim() || samples == 0 {
        return Err(Error::invalid("probe needs a matching box and at least one sample"));
    }
    let mut r = rng::rng(seed);
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = region.sample(&mut r);
        xs.push(linalg::norm(&obj.grad(&x)));
        let worst = (0..m)
            .filter_map(|i| obj.component(i))
            .map(|c| linalg::norm(&c.grad(&x)))
            .fold(0.0, f64::max);
        ys.push(worst);
    }
    Ok(AssumptionReport {
        fit: fit_affine(&xs, &ys)?,
        samples,
    })
}

/// Check of `|v_t| <= eta_e (C + D |grad f(x_t)|)` with `D = 0` and
/// `C = max_s |z_s|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnovationCapReport {
    pub c: f64,
    /// `max_t |v_t| / (eta_e C)`; at most 1 up to rounding when compliant.
    pub worst_ratio: f64,
    pub compliant: bool,
}

pub fn innovation_cap_compliance(traj: &Trajectory) -> Result<InnovationCapReport> {
    if !matches!(traj.kind, RuleKind::Cyclic(_)) {
        return Err(Error::invalid("magnitude condition applies to cyclic trajectories"));
    }
    let c = traj.z_norm.iter().copied().fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut compliant = true;
    for (&vsq, &eta) in traj.v_sq.iter().zip(&traj.eta) {
        let v = vsq.sqrt();
        let cap = eta * c;
        // Norms are recomputed from squares, so allow a few ulps.
        if v > cap * (1.0 + 8.0 * f64::EPSILON) {
            compliant = false;
        }
        if cap > 0.0 {
            worst = worst.max(v / cap);
        } else if v > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(InnovationCapReport {
        c,
        worst_ratio: worst,
        compliant,
    })
}

/// Per-epoch residual `r_e = x_{t+M} - x_t + eta_e grad f(x_t)` at epoch
/// starts `t = eM`.
#[derive(Clone, Debug, PartialEq)]
pub struct MstepReport {
    pub epochs: Vec<MstepEpoch>,
    /// Envelope of `|r_e| / eta_e` against `|grad f(x_t)|`.
    pub envelope: Option<AffineFit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MstepEpoch {
    pub epoch: usize,
    pub t: usize,
    pub eta: f64,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub grad_norm: f64,
}

impl MstepEpoch {
    pub fn scaled(&self) -> f64 {
        self.residual_norm / self.eta
    }
}

impl MstepReport {
    pub fn max_scaled(&self) -> f64 {
        self.epochs.iter().map(MstepEpoch::scaled).fold(0.0, f64::max)
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["epoch", "t", "eta", "residual_norm", "scaled", "grad_norm"]);
        for e in &self.epochs {
            r.push_row(vec![
                e.epoch as f64,
                e.t as f64,
                e.eta,
                e.residual_norm,
                e.scaled(),
                e.grad_norm,
            ])
            .expect("row width");
        }
        if let Some(f) = self.envelope {
            r.meta("envelope_intercept", f.intercept)
                .meta("envelope_slope", f.slope)
                .meta("envelope_max_residual", f.max_residual);
        }
        r
    }
}

/// `x_{t+M} - x_t` is taken as the sum of recorded updates when vectors are
/// present, otherwise as the difference of consecutive probes.
pub fn mstep_recursion_residual(traj: &Trajectory) -> Result<MstepReport> {
    let RuleKind::Cyclic(m) = traj.kind else {
        return Err(Error::invalid("M-step residual needs a cyclic trajectory"));
    };
    let mut epochs = Vec::new();
    for (e, pair) in traj.probes.windows(2).enumerate() {
        let (p, q) = (&pair[0], &pair[1]);
        if q.t != p.t + m {
            break;
        }
        let eta = traj.eta[p.t];
        let mut r = if traj.u.len() >= q.t {
            let mut acc = traj.u[p.t].clone();
            for u in &traj.u[p.t + 1..q.t] {
                linalg::axpy(1.0, u, &mut acc);
            }
            acc
        } else {
            linalg::sub(&q.x, &p.x)
        };
        linalg::axpy(eta, &p.grad, &mut r);
        epochs.push(MstepEpoch {
            epoch: e,
            t: p.t,
            eta,
            residual_norm: linalg::norm(&r),
            residual: r,
            grad_norm: linalg::norm(&p.grad),
        });
    }
    let envelope = if epochs.is_empty() {
        None
    } else {
        let xs: Vec<f64> = epochs.iter().map(|e| e.grad_norm).collect();
        let ys: Vec<f64> = epochs.iter().map(MstepEpoch::scaled).collect();
        Some(fit_affine(&xs, &ys)?)
    };
    Ok(MstepReport { epochs, envelope })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::baselines::{run_baseline, BaselineKind, BaselineOptimizer, Sampling};
    use crate::objectives::{Quadratic, Separable};
    use crate::update::{CyclicRule, StepsizeSchedule};

    fn half_square() -> Quadratic {
        Quadratic::new(vec![1.0], vec![0.0]).unwrap()
    }

    fn gd(f: &Quadratic, x0: f64, steps: usize) -> Trajectory {
        let rule = UpdateRule::Full(FullGradientRule::gradient_descent(0.5, f).unwrap());
        rollout(&rule, f, &[x0], steps, RecordFlags::ALL).unwrap()
    }

    #[test]
    fn gd_square_sum_limit() {
        let r = square_sum_diagnostics(&gd(&half_square(), 1.0, 200)).unwrap();
        assert!((r.total_grad() - 4.0 / 3.0).abs() < 1e-15);
        assert!(r.k_grad.windows(2).all(|w| w[1] >= w[0]));
        let fixed = square_sum_diagnostics(&gd(&half_square(), 0.0, 10)).unwrap();
        assert_eq!(fixed.total_grad(), 0.0);
        assert_eq!(fixed.total_update(), 0.0);
    }

    #[test]
    fn descent_bound_hand_example() {
        let f = half_square();
        let tr = gd(&f, 1.0, 200);
        let rep = descent_bound_monitor(&tr, 1.0, 0.5, Epsilon::Value(4.0), Some(0.0)).unwrap();
        assert_eq!(rep.rho, 1.0);
        assert_eq!(rep.rhs[0], 4.0);
        assert!((rep.lhs.last().unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(rep.holds());
        let auto = descent_bound_monitor(&tr, 1.0, 0.5, Epsilon::Auto, None).unwrap();
        assert_eq!(auto.epsilon, 4.0);
        assert!(auto.surrogate);
        assert!(descent_bound_monitor(&tr, 1.0, 0.5, Epsilon::Value(2.0), None).is_err());

        let at_min = descent_bound_monitor(&gd(&f, 0.0, 5), 1.0, 0.5, Epsilon::Auto, Some(0.0)).unwrap();
        assert!(at_min.lhs.iter().chain(&at_min.rhs).all(|v| *v == 0.0));
        assert!(at_min.holds());
    }

    #[test]
    fn heavy_ball_reconstruction_example() {
        let f = half_square();
        let hb = BaselineOptimizer::new(BaselineKind::HeavyBall, 0.5).with_momentum(0.5);
        let tr = run_baseline(&hb, &f, &[1.0], 50, Sampling::Full, RecordFlags::ALL).unwrap();
        let rec = reconstruct_innovation(&tr, 0.5).unwrap();
        assert_eq!(rec.v[0], vec![0.0]);
        assert_eq!(rec.v[1], vec![-0.25]);
        let eq = equivalence_test(&tr, &rec, &f, 0.5, EQUIVALENCE_TOL).unwrap();
        assert!(eq.passed(), "{}", eq.max_deviation);
    }

    #[test]
    fn gd_reconstruction_is_zero() {
        let f = Quadratic::new(vec![2.0, 0.3, 0.3, 1.0], vec![0.5, -1.0]).unwrap();
        let rule = UpdateRule::Full(FullGradientRule::gradient_descent(0.3, &f).unwrap());
        let tr = rollout(&rule, &f, &[1.0, -2.0], 100, RecordFlags::ALL).unwrap();
        let rec = reconstruct_innovation(&tr, 0.3).unwrap();
        assert!(rec.v.iter().flatten().all(|v| *v == 0.0));
        let eq = equivalence_test(&tr, &rec, &f, 0.3, 0.0).unwrap();
        assert_eq!(eq.max_deviation, 0.0);
    }

    #[test]
    fn identical_components_fit() {
        let f = Separable::identical(Arc::new(half_square()), 4).unwrap();
        let rep = growth_assumption_probe(&f, &SampleBox::cube(1, -3.0, 3.0), 200, 1).unwrap();
        assert!(rep.a().abs() < 1e-12);
        assert!((rep.b() - 0.25).abs() < 1e-12);
        assert!(growth_assumption_probe(&half_square(), &SampleBox::cube(1, 0.0, 1.0), 5, 1).is_err());
    }

    #[test]
    fn single_component_residual_is_zero() {
        let f = Separable::identical(Arc::new(half_square()), 1).unwrap();
        let rule = UpdateRule::Cyclic(CyclicRule::new(
            StepsizeSchedule::harmonic(0.5).unwrap(),
            InnovationSource::None,
        ));
        let tr = rollout(&rule, &f, &[1.3], 40, RecordFlags::ALL).unwrap();
        let rep = mstep_recursion_residual(&tr).unwrap();
        assert_eq!(rep.epochs.len(), 40);
        assert!(rep.epochs.iter().all(|e| e.residual_norm == 0.0));
    }

    #[test]
    fn two_component_residual_matches_expansion() {
        let a = Arc::new(Quadratic::new(vec![0.8], vec![0.3]).unwrap());
        let b = Arc::new(Quadratic::new(vec![0.2], vec![-0.5]).unwrap());
        let f = Separable::new(vec![a as Arc<dyn Objective>, b]).unwrap();
        let rule = UpdateRule::Cyclic(CyclicRule::new(
            StepsizeSchedule::harmonic(0.4).unwrap(),
            InnovationSource::None,
        ));
        let tr = rollout(&rule, &f, &[2.0], 20, RecordFlags::SCALARS).unwrap();
        let rep = mstep_recursion_residual(&tr).unwrap();
        let mut x = 2.0;
        for e in &rep.epochs {
            let eta = 0.4 / (e.epoch + 1) as f64;
            let y = x - eta * (0.8 * x + 0.3);
            let x2 = y - eta * (0.2 * y - 0.5);
            let want = x2 - x + eta * (x + 0.3 - 0.5);
            assert!((e.residual[0] - want).abs() < 1e-12);
            x = x2;
        }
    }
}
