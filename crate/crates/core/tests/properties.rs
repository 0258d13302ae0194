use proptest::prelude::*;

use cl2o_core::autodiff::{finite_difference_check, ParamVector, Tape, Var};
use cl2o_core::baselines::{run_baseline, BaselineKind, BaselineOptimizer, Sampling};
use cl2o_core::convergence::{
    innovation_cap_compliance, equivalence_test, reconstruct_innovation, square_sum_diagnostics,
};
use cl2o_core::linalg;
use cl2o_core::meta::InitDistribution;
use cl2o_core::objectives::{make_quadratic, make_separable_least_squares, Objective};
use cl2o_core::rng::split;
use cl2o_core::stable::{
    innovation_batch, innovation_full, ContractingOperator, InnovationModel, ModelConfig,
    OperatorConfig, ThetaInit,
};
use cl2o_core::update::{
    default_eta, rollout, CyclicRule, FullGradientRule, InnovationSource, RecordFlags,
    RuleKind, StepsizeSchedule, Trajectory, UpdateRule,
};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn learned(seed: u64) -> InnovationSource {
    InnovationSource::Learned(
        InnovationModel::init(ModelConfig::default(), ThetaInit::default(), seed).unwrap(),
    )
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Sin,
    Cos,
    Log,
    Sqrt,
    Recip,
}

const UNARY: [Unary; 9] = [
    Unary::Tanh,
    Unary::Sigmoid,
    Unary::Relu,
    Unary::Exp,
    Unary::Sin,
    Unary::Cos,
    Unary::Log,
    Unary::Sqrt,
    Unary::Recip,
];

fn apply(tape: &mut Tape, op: Unary, x: Var) -> Var {
    match op {
        Unary::Tanh => tape.tanh(x),
        Unary::Sigmoid => tape.sigmoid(x),
        Unary::Relu => tape.relu(x),
        Unary::Exp => tape.exp(x),
        Unary::Sin => tape.sin(x),
        Unary::Cos => tape.cos(x),
        // Keep the argument positive: x^2 + 0.5.
        Unary::Log | Unary::Sqrt | Unary::Recip => {
            let sq = tape.mul(x, x);
            let shifted = tape.add_scalar(sq, 0.5);
            match op {
                Unary::Log => tape.log(shifted),
                Unary::Sqrt => tape.sqrt(shifted),
                _ => tape.recip(shifted),
            }
        }
    }
}

fn away_from_kinks(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.abs() > 1e-3)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn primitives_match_central_differences(
        op in 0..UNARY.len(),
        xs in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        let op = UNARY[op];
        prop_assume!(!matches!(op, Unary::Relu) || away_from_kinks(&xs));
        let program = |tape: &mut Tape, x: Var| {
            let y = apply(tape, op, x);
            tape.sum(y)
        };
        let err = finite_difference_check(program, &ParamVector::flat(xs), 1e-5).unwrap();
        prop_assert!(err <= 1e-6, "{op:?}: {err:e}");
    }

    #[test]
    fn max_matches_central_differences(
        ab in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..8),
    ) {
        prop_assume!(ab.iter().all(|(a, b)| (a - b).abs() > 1e-3));
        let n = ab.len();
        let flat: Vec<f64> = ab.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let program = move |tape: &mut Tape, x: Var| {
            let lhs = tape.slice(x, 0, n, 1);
            let rhs = tape.slice(x, n, n, 1);
            let m = tape.max(lhs, rhs);
            let sq = tape.mul(m, m);
            tape.sum(sq)
        };
        let mut packed = flat.iter().step_by(2).copied().collect::<Vec<_>>();
        packed.extend(flat.iter().skip(1).step_by(2));
        let err = finite_difference_check(program, &ParamVector::flat(packed), 1e-5).unwrap();
        prop_assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn innovation_magnitude_is_exact(
        z in prop::collection::vec(-10.0f64..10.0, 1..6),
        omega in prop::collection::vec(-10.0f64..10.0, 1..12),
        eta in 1e-4f64..1.0,
    ) {
        let zn = linalg::norm(&z);
        let wn = linalg::norm(&omega);
        prop_assume!(wn > 1e-9);
        let ulp = 4.0 * f64::EPSILON;
        let v = innovation_full(&z, &omega);
        prop_assert!((linalg::norm(&v) - zn).abs() <= ulp * zn.max(f64::MIN_POSITIVE));
        let vb = innovation_batch(&z, &omega, eta).unwrap();
        prop_assert!((linalg::norm(&vb) - eta * zn).abs() <= ulp * (eta * zn).max(f64::MIN_POSITIVE));
        let cos = linalg::dot(&v, &omega) / (linalg::norm(&v) * wn);
        prop_assert!(zn == 0.0 || (cos - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn operator_is_contracting_for_any_theta(
        seed in any::<u64>(),
        log_scale in -2.0f64..2.0,
    ) {
        use rand::Rng as _;
        use rand_distr::{Distribution, Normal};
        let cfg = OperatorConfig::default();
        let mut r = cl2o_core::rng::rng(seed);
        let normal = Normal::new(0.0, 10f64.powf(log_scale)).unwrap();
        let params: Vec<f64> = (0..cfg.num_params()).map(|_| normal.sample(&mut r)).collect();
        let op = ContractingOperator::new(cfg, &params).unwrap();
        for l in 0..cfg.depth {
            let sigma = cl2o_core::stable::spectral_norm(op.a_eff(l), cfg.state_dim, cfg.state_dim, 300, seed);
            prop_assert!(sigma <= cfg.gamma * (1.0 + 1e-9), "layer {l}: {sigma}");
        }
        let amp = r.random_range(0.1..10.0);
        let resp = op.impulse_response(&[amp, 1.0], 600).unwrap();
        let energy: Vec<f64> = resp.iter().map(|z| linalg::norm_sq(z)).collect();
        let total: f64 = energy.iter().sum();
        let tail: f64 = energy[201..].iter().sum();
        prop_assert!(total.is_finite());
        prop_assert!(total == 0.0 || tail / total <= 1e-6, "tail {:e}", tail / total);
    }
}

fn quadratic_case(dim: usize, condition: f64, seed: u64) -> (cl2o_core::objectives::Quadratic, Vec<f64>) {
    let obj = make_quadratic(dim, condition, seed).unwrap();
    let x0 = InitDistribution::Gaussian { mean: 0.0, std: 1.0 }.sample(dim, split(seed, 1));
    (obj, x0)
}

fn check_full_decomposition(traj: &Trajectory, eta: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(traj.x.len(), traj.steps() + 1);
    for t in 0..traj.steps() {
        let expect: Vec<f64> = traj.g[t]
            .iter()
            .zip(&traj.v[t])
            .map(|(g, v)| -eta * g + v)
            .collect();
        let scale = 1.0 + linalg::norm(&expect);
        prop_assert!(linalg::max_abs_diff(&traj.u[t], &expect) <= 1e-14 * scale);
        let moved = linalg::sub(&traj.x[t + 1], &traj.x[t]);
        prop_assert!(linalg::max_abs_diff(&moved, &traj.u[t]) <= 1e-14 * (1.0 + linalg::norm(&traj.x[t])));
    }
    Ok(())
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn full_rule_update_decomposes(
        dim in 1usize..12,
        condition in 1.5f64..50.0,
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let eta = default_eta(&obj).unwrap();
        let rule = UpdateRule::Full(FullGradientRule::bind(eta, learned(split(seed, 2)), &obj, false).unwrap());
        let traj = rollout(&rule, &obj, &x0, 60, RecordFlags::ALL).unwrap();
        check_full_decomposition(&traj, eta)?;
        for (t, g) in traj.g.iter().enumerate() {
            prop_assert_eq!(g, &obj.grad(&traj.x[t]));
        }
    }

    #[test]
    fn cyclic_rule_update_decomposes_and_respects_cap(
        dim in 1usize..8,
        components in 1usize..6,
        eta0 in 0.005f64..0.1,
        seed in any::<u64>(),
    ) {
        let obj = make_separable_least_squares(dim, components, 0.1, seed).unwrap();
        let schedule = StepsizeSchedule::harmonic(eta0).unwrap();
        let rule = UpdateRule::Cyclic(CyclicRule::new(schedule, learned(split(seed, 3))));
        let x0 = InitDistribution::DEFAULT_UNIFORM.sample(dim, split(seed, 4));
        let traj = rollout(&rule, &obj, &x0, 40 * components, RecordFlags::ALL).unwrap();
        prop_assert_eq!(traj.kind, RuleKind::Cyclic(components));
        for t in 0..traj.steps() {
            let e = t / components;
            prop_assert_eq!(traj.eta[t], schedule.eta(e));
            prop_assert_eq!(&traj.g[t], &obj.component(t % components).unwrap().grad(&traj.x[t]));
            let expect: Vec<f64> = traj.g[t]
                .iter()
                .zip(&traj.v[t])
                .map(|(g, v)| -traj.eta[t] * (g + v))
                .collect();
            let scale = 1.0 + linalg::norm(&expect);
            prop_assert!(linalg::max_abs_diff(&traj.u[t], &expect) <= 1e-14 * scale);
        }
        let report = innovation_cap_compliance(&traj).unwrap();
        prop_assert!(report.compliant, "worst ratio {}", report.worst_ratio);
    }

    #[test]
    fn running_min_gradient_norm_never_increases(
        dim in 1usize..10,
        condition in 1.5f64..30.0,
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let rule = UpdateRule::Full(
            FullGradientRule::bind(default_eta(&obj).unwrap(), learned(seed), &obj, false).unwrap(),
        );
        let traj = rollout(&rule, &obj, &x0, 200, RecordFlags::SCALARS).unwrap();
        let best = traj.running_min_grad_norm();
        prop_assert!(best.windows(2).all(|w| w[1] <= w[0]));
        let grads: Vec<f64> = traj.full_grad_sq().iter().map(|(_, g)| g.sqrt()).collect();
        for (b, g) in best.iter().zip(&grads) {
            prop_assert!(b <= g);
        }
    }

    #[test]
    fn rollout_is_deterministic(
        dim in 1usize..10,
        condition in 1.5f64..30.0,
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let rule = UpdateRule::Full(
            FullGradientRule::bind(default_eta(&obj).unwrap(), learned(seed), &obj, false).unwrap(),
        );
        let a = rollout(&rule, &obj, &x0, 100, RecordFlags::ALL).unwrap();
        let b = rollout(&rule, &obj, &x0, 100, RecordFlags::ALL).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn diagnostics_leave_the_trajectory_untouched(
        dim in 1usize..10,
        condition in 1.5f64..30.0,
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let eta = default_eta(&obj).unwrap();
        let rule = UpdateRule::Full(FullGradientRule::bind(eta, learned(seed), &obj, false).unwrap());
        let traj = rollout(&rule, &obj, &x0, 100, RecordFlags::ALL).unwrap();
        let before = traj.to_bytes();
        let first = square_sum_diagnostics(&traj).unwrap();
        let recon = reconstruct_innovation(&traj, eta).unwrap();
        let _ = traj.running_min_grad_norm();
        let _ = traj.to_report();
        prop_assert_eq!(&traj.to_bytes(), &before);
        prop_assert_eq!(square_sum_diagnostics(&traj).unwrap(), first);
        prop_assert_eq!(reconstruct_innovation(&traj, eta).unwrap().v, recon.v);
    }

    #[test]
    fn sgd_equals_cyclic_rule_without_innovation(
        dim in 1usize..8,
        components in 1usize..6,
        lr in 0.005f64..0.1,
        power in 0.5f64..1.0,
        seed in any::<u64>(),
    ) {
        let obj = make_separable_least_squares(dim, components, 0.2, seed).unwrap();
        let x0 = InitDistribution::DEFAULT_UNIFORM.sample(dim, split(seed, 5));
        let steps = 30 * components;
        let mut opt = BaselineOptimizer::new(BaselineKind::Sgd, lr);
        opt.power = power;
        let sgd = run_baseline(&opt, &obj, &x0, steps, Sampling::for_kind(BaselineKind::Sgd, &obj), RecordFlags::ALL).unwrap();
        let rule = UpdateRule::Cyclic(CyclicRule::new(
            StepsizeSchedule::new(lr, power).unwrap(),
            InnovationSource::None,
        ));
        let cyc = rollout(&rule, &obj, &x0, steps, RecordFlags::ALL).unwrap();
        prop_assert_eq!(sgd.x, cyc.x);
        prop_assert_eq!(sgd.value, cyc.value);
    }

    #[test]
    fn momentum_and_adaptive_baselines_replay_exactly(
        dim in 1usize..10,
        condition in 1.5f64..30.0,
        kind in prop::sample::select(vec![BaselineKind::HeavyBall, BaselineKind::Nag, BaselineKind::Adam, BaselineKind::Rmsprop]),
        lr_scale in 0.05f64..0.9,
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let beta = obj.beta().value().unwrap();
        let lr = match kind {
            BaselineKind::Adam | BaselineKind::Rmsprop => lr_scale * 0.1,
            _ => lr_scale / beta,
        };
        let src = run_baseline(&BaselineOptimizer::new(kind, lr), &obj, &x0, 300, Sampling::Full, RecordFlags::ALL).unwrap();
        let eta = default_eta(&obj).unwrap();
        let recon = reconstruct_innovation(&src, eta).unwrap();
        let report = equivalence_test(&src, &recon, &obj, eta, 1e-10).unwrap();
        prop_assert!(report.passed(), "{kind}: {:e}", report.max_deviation);
    }
}

/// Textbook fixed parameters for a quadratic with spectrum in `[mu, beta]`.
fn optimal_fixed(kind: BaselineKind, mu: f64, beta: f64) -> BaselineOptimizer {
    let rk = (beta / mu).sqrt();
    match kind {
        BaselineKind::HeavyBall => {
            BaselineOptimizer::new(kind, 4.0 / (beta.sqrt() + mu.sqrt()).powi(2))
                .with_momentum(((rk - 1.0) / (rk + 1.0)).powi(2))
        }
        BaselineKind::Nag => BaselineOptimizer::new(kind, 1.0 / beta).with_momentum((rk - 1.0) / (rk + 1.0)),
        _ => BaselineOptimizer::new(kind, 2.0 / (mu + beta)),
    }
}

proptest! {
    #![proptest_config(config(24))]

    // After the first 10% of the run the suboptimality never rises by more
    // than rounding noise.
    #[test]
    fn optimally_stepped_baselines_decrease_after_transient(
        dim in 2usize..12,
        condition in 1.5f64..25.0,
        kind in prop::sample::select(vec![BaselineKind::Gd, BaselineKind::Sgd, BaselineKind::HeavyBall, BaselineKind::Nag]),
        seed in any::<u64>(),
    ) {
        let (obj, x0) = quadratic_case(dim, condition, seed);
        let opt = optimal_fixed(kind, obj.mu(), obj.beta().value().unwrap());
        let traj = run_baseline(&opt, &obj, &x0, 1000, Sampling::Full, RecordFlags::SCALARS).unwrap();
        let fmin = obj.min_value();
        let noise = 64.0 * f64::EPSILON * (1.0 + fmin.abs());
        for t in 100..traj.value.len() - 1 {
            let rise = traj.value[t + 1] - traj.value[t];
            prop_assert!(rise <= noise, "{kind} rose by {rise:e} at t = {t}");
        }
    }
}
