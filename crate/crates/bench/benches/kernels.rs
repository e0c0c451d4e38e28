use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use difkit::genlog::test_item;
use difkit::stats::holm_adjust;
use difkit::{
    chisq_sf, fit_mml_em, generate, purify_and_test, split_scores_missing_policy, ConstraintPlan,
    FitOptions, GenLogOptions, MissingPolicy, SimScenario,
};

fn scenario(g: usize) -> SimScenario {
    let means = [0.0, -0.3, 0.2, -0.5, 0.3, -0.6];
    SimScenario::panel(28, SimScenario::groups(500, &means[..g]), 3, 11).with_dif(4, 1, 0.6, 1.0)
}

fn stats(c: &mut Criterion) {
    c.bench_function("chisq_sf", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for df in 1..=6 {
                for k in 0..20 {
                    s += chisq_sf(black_box(0.5 * k as f64), df);
                }
            }
            s
        })
    });
    let p: Vec<f64> = (0..28).map(|i| (i as f64 * 0.37).fract()).collect();
    c.bench_function("holm_28", |b| b.iter(|| holm_adjust(black_box(&p))));
}

fn irt(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_mml_em");
    group.sample_size(10);
    for g in [2, 3, 6] {
        let sc = scenario(g);
        let data = generate(&sc, 0);
        let specs = sc.item_specs();
        let plan = ConstraintPlan::anchored(28, g, &[0]);
        group.bench_function(format!("G{g}"), |b| {
            b.iter(|| fit_mml_em(&data, &specs, &plan, &FitOptions::default()).map(|f| f.loglik))
        });
    }
    group.finish();
}

fn genlog(c: &mut Criterion) {
    let sc = scenario(3);
    let data = generate(&sc, 0);
    let view = split_scores_missing_policy(&data, MissingPolicy::ScoreAsIncorrect);
    let basis: Vec<usize> = (0..28).collect();
    c.bench_function("genlog_test_item", |b| {
        b.iter(|| test_item(&view, black_box(4), &basis, 0.05).map(|r| r.all.lambda))
    });
    let mut group = c.benchmark_group("genlog_purify");
    group.sample_size(20);
    group.bench_function("G3", |b| b.iter(|| purify_and_test(&data, &GenLogOptions::default()).is_ok()));
    group.finish();
}

criterion_group!(benches, stats, irt, genlog);
criterion_main!(benches);
