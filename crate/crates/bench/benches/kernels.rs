use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cl2o_bench::{fixed_distribution, mixed_distribution, model, quadratic};
use cl2o_core::autodiff::{evaluate_with_tape, reverse_gradient, ParamVector};
use cl2o_core::baselines::{run_baseline, BaselineKind, BaselineOptimizer, Sampling};
use cl2o_core::meta::{episode_gradient, episode_metaloss, MetaLossConfig};
use cl2o_core::objectives::Objective;
use cl2o_core::stable::spectral_norm;
use cl2o_core::update::{rollout, FullGradientRule, InnovationSource, RecordFlags, UpdateRule};

fn tape_gradient(c: &mut Criterion) {
    let mut g = c.benchmark_group("tape_gradient");
    for dim in [10, 100, 1000] {
        let obj = quadratic(dim);
        let x = ParamVector::flat(vec![0.1; dim]);
        g.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| {
                let (_, tape) = evaluate_with_tape(|t, v| obj.value_on_tape(t, v), black_box(&x)).unwrap();
                reverse_gradient(&tape).unwrap()
            })
        });
    }
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let obj = quadratic(10);
    let x0 = vec![0.005; 10];
    let eta = 0.9 / obj.beta().value().unwrap();
    let mut g = c.benchmark_group("rollout_100_steps");
    let gd = UpdateRule::Full(FullGradientRule::bind(eta, InnovationSource::None, &obj, false).unwrap());
    g.bench_function("gd", |b| b.iter(|| rollout(&gd, &obj, black_box(&x0), 100, RecordFlags::SCALARS).unwrap()));
    let learned = UpdateRule::Full(FullGradientRule::bind(eta, InnovationSource::Learned(model(1)), &obj, false).unwrap());
    g.bench_function("learned", |b| {
        b.iter(|| rollout(&learned, &obj, black_box(&x0), 100, RecordFlags::SCALARS).unwrap())
    });
    let adam = BaselineOptimizer::new(BaselineKind::Adam, 0.01);
    g.bench_function("adam", |b| {
        b.iter(|| run_baseline(&adam, &obj, black_box(&x0), 100, Sampling::Full, RecordFlags::SCALARS).unwrap())
    });
    g.finish();
}

fn meta_gradient(c: &mut Criterion) {
    let dist = mixed_distribution(10, 1);
    let ep = dist.episode(3).unwrap();
    let cfg = MetaLossConfig::default();
    let m = model(2);
    let mut g = c.benchmark_group("metaloss_horizon_50");
    g.sample_size(20);
    g.bench_function("plain", |b| b.iter(|| episode_metaloss(Some(&m), &dist, &cfg, &ep).unwrap()));
    g.bench_function("tape_gradient", |b| b.iter(|| episode_gradient(&m, &dist, &cfg, &ep, None).unwrap()));
    g.bench_function("tape_gradient_truncated_10", |b| {
        b.iter(|| episode_gradient(&m, &dist, &cfg, &ep, Some(10)).unwrap())
    });
    g.finish();
    let fixed = fixed_distribution(Arc::new(quadratic(10)));
    let ep = fixed.episode(4).unwrap();
    c.bench_function("metaloss_fixed_quadratic", |b| {
        b.iter(|| episode_metaloss(Some(&m), &fixed, &cfg, &ep).unwrap())
    });
}

fn operator(c: &mut Criterion) {
    let m = model(5);
    let n = m.operator().config().state_dim;
    c.bench_function("spectral_norm_power_iteration", |b| {
        b.iter(|| spectral_norm(black_box(m.operator().a_eff(0)), n, n, 200, 0))
    });
    c.bench_function("impulse_response_1000", |b| {
        b.iter(|| m.operator().impulse_response(black_box(&[1.0, 1.0]), 1000).unwrap())
    });
}

criterion_group!(benches, tape_gradient, rollouts, meta_gradient, operator);
criterion_main!(benches);
