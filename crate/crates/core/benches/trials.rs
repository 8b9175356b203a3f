use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridswarm_core::experiments::{fusion_study, planner_fuzz};
use gridswarm_core::par;

fn bench_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("trial_runner");
    group.sample_size(10);
    let work = |i: u64| fusion_study(20, 0.002, i).two_tag_mean_error;
    for n in [64u64, 256] {
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| par::map_trials(n, work))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| par::map_trials_sequential(n, work))
        });
    }
    group.finish();

    let mut fuzz = c.benchmark_group("planner_fuzz");
    fuzz.sample_size(10);
    fuzz.bench_function("100_scenarios", |b| b.iter(|| planner_fuzz(100, 10, 5, 8, 7)));
    fuzz.finish();
}

criterion_group!(benches, bench_trials);
criterion_main!(benches);
