use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use loaded_dice::experiments::{estimate_batch, BatchSpec, Problem, SweepConfig};
use loaded_dice::gradcheck::RandomExpr;
use loaded_dice::mdp::{init_logits, random_mdp};
use loaded_dice::oracle::{exact_value, true_derivatives};
use loaded_dice::{Graph, RngSeed, TabularPolicy};

fn nested_grad(c: &mut Criterion) {
    let expr = RandomExpr::generate(6, 40, RngSeed(3));
    let x = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2];
    c.bench_function("hessian_random_expr_40", |b| {
        b.iter(|| expr.hessian(black_box(&x)).unwrap())
    });
}

fn exact_derivatives(c: &mut Criterion) {
    let mdp = random_mdp(5, 4, 0.95, RngSeed(0)).unwrap();
    let logits = init_logits(5, 4, Some(RngSeed(1)));
    c.bench_function("exact_value_order3_5x4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let policy = TabularPolicy::new(&mut g, 5, 4, &logits).unwrap();
            let (v, _) = exact_value(&mut g, &mdp, &policy).unwrap();
            true_derivatives(&mut g, v, &policy, 3).unwrap()
        })
    });
}

fn batch_estimate(c: &mut Criterion) {
    let cfg = SweepConfig {
        batch_size: 32,
        orders: vec![1, 2, 3],
        ..SweepConfig::default()
    };
    let problem = Problem::from_config(&cfg).unwrap();
    let spec = BatchSpec::from_config(&cfg);
    let mut group = c.benchmark_group("estimate_batch");
    group.sample_size(10);
    group.bench_function("loaded_dice_b32_t50_order3", |b| {
        b.iter(|| estimate_batch(&problem, &spec, RngSeed(9)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, nested_grad, exact_derivatives, batch_estimate);
criterion_main!(benches);
