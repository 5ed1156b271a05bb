use coserve_core::workload::*;

fn flat(seed: u64, rate: f64, duration_s: f64) -> TraceConfig {
    let mut cfg = TraceConfig {
        seed,
        rate_rps: rate,
        duration_s,
        ..TraceConfig::default()
    };
    cfg.burst.amplitude = 0.0;
    cfg
}

#[test]
fn poisson_count_within_three_sigma() {
    let t = generate(&flat(1, 4.0, 1200.0)).unwrap();
    let n = t.inference_count() as f64;
    let sigma = 4800f64.sqrt();
    assert!((n - 4800.0).abs() <= 3.0 * sigma, "{n} arrivals");
}

#[test]
fn realized_rate_close_to_target_with_bursts() {
    let mut total = 0.0;
    for seed in 0..10 {
        let cfg = TraceConfig {
            seed,
            rate_rps: 4.0,
            duration_s: 600.0,
            ..TraceConfig::default()
        };
        total += generate(&cfg).unwrap().inference_count() as f64 / 600.0;
    }
    let mean = total / 10.0;
    assert!((mean - 4.0).abs() / 4.0 <= 0.05, "mean rate {mean}");
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TraceConfig::default();
    cfg.finetune.sequences = 3;
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    generate(&cfg).unwrap().to_file(&a).unwrap();
    generate(&cfg).unwrap().to_file(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn write_read_write_is_byte_identical() {
    let mut cfg = TraceConfig {
        rate_rps: 7.0,
        tenants: 3,
        ..TraceConfig::default()
    };
    cfg.finetune.sequences = 4;
    let t = generate(&cfg).unwrap();
    let mut first = Vec::new();
    t.write_csv(&mut first).unwrap();
    let back = Trace::read_csv(first.as_slice()).unwrap();
    assert_eq!(back.arrivals, t.arrivals);
    let mut second = Vec::new();
    back.write_csv(&mut second).unwrap();
    assert_eq!(first, second);
}

#[test]
fn doubling_rate_by_rescale_halves_gaps() {
    let t = generate(&flat(3, 5.0, 300.0)).unwrap();
    let r = t.rescale(2.0).unwrap();
    let span = |t: &Trace| t.arrivals.last().unwrap().time_ms - t.arrivals[0].time_ms;
    assert!((span(&t) / span(&r) - 2.0).abs() < 1e-12);
    assert_eq!(r.meta.rate_rps, 10.0);
}
