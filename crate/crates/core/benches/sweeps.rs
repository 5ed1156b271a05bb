use criterion::{criterion_group, criterion_main, Criterion};

use coserve_core::engine::{run, SimConfig};
use coserve_core::sweep::{map, map_seq};
use coserve_core::workload::{generate, FinetuneSpec, Trace, TraceConfig};

fn traces() -> Vec<Trace> {
    (0..8)
        .map(|seed| {
            let base = TraceConfig::default();
            generate(&TraceConfig {
                seed,
                duration_s: 30.0,
                rate_rps: 4.0 + 2.0 * seed as f64,
                finetune: FinetuneSpec {
                    sequences: 200,
                    ..base.finetune
                },
                ..base
            })
            .unwrap()
        })
        .collect()
}

fn simulate(t: &Trace) -> f64 {
    run(t, &SimConfig::default()).unwrap().summary.slo_attainment
}

fn bench_sweep(c: &mut Criterion) {
    let ts = traces();
    let mut g = c.benchmark_group("rate_sweep");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| map_seq(&ts, simulate)));
    g.bench_function("parallel", |b| b.iter(|| map(&ts, simulate)));
    g.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
