use coserve_core::baselines::Policy;
use coserve_core::cost::LatencyProfile;
use coserve_core::engine::{run, SimConfig, SimMetrics};
use coserve_core::sweep::compare;
use coserve_core::workload::{generate, Arrival, FinetuneSpec, Kind, Trace, TraceConfig, TraceMeta};
use proptest::prelude::*;

fn trace(rate: f64, seed: u64, sequences: u32, tenants: u32) -> Trace {
    let base = TraceConfig::default();
    generate(&TraceConfig {
        seed,
        rate_rps: rate,
        duration_s: 30.0,
        tenants,
        finetune: FinetuneSpec {
            sequences,
            ..base.finetune
        },
        ..base
    })
    .unwrap()
}

fn sim(t: &Trace, policy: &str) -> SimMetrics {
    run(
        t,
        &SimConfig {
            policy: policy.parse().unwrap(),
            ..SimConfig::default()
        },
    )
    .unwrap()
}

fn check_invariants(t: &Trace, m: &SimMetrics, cfg: &SimConfig) {
    let inference = t.inference_count();
    assert_eq!(m.requests.len(), inference);
    for r in &m.requests {
        assert!(r.first_token_ms > r.arrival_ms);
        assert!(r.completion_ms >= r.first_token_ms);
        let ok = r.tpot_ms <= cfg.scheduler.tpot_slo_ms + 1e-9 && r.ttft_ms <= cfg.scheduler.ttft_slo_ms;
        assert_eq!(r.slo_ok, ok);
        if r.gen_len == 1 {
            assert_eq!(r.tpot_ms, 0.0);
        }
    }
    let expected: u64 = t
        .arrivals
        .iter()
        .filter_map(|a| match a.kind {
            Kind::Inference { gen_len, .. } => Some(gen_len as u64),
            _ => None,
        })
        .sum();
    assert_eq!(m.summary.inference_tokens, expected);
    for w in m.timeline.windows(2) {
        assert!(w[1].time_ms > w[0].time_ms);
        assert!(w[1].iteration > w[0].iteration);
    }
    assert!(m.timeline.iter().all(|r| r.latency_ms > 0.0));
}

#[test]
fn every_policy_completes_all_requests() {
    let t = trace(8.0, 3, 50, 1);
    for p in ["coserve", "vtc", "dts", "temporal:64", "temporal:inf", "spatial:0.5", "isolate:0.75"] {
        let m = sim(&t, p);
        check_invariants(&t, &m, &SimConfig::default());
        assert_eq!(m.summary.policy, p);
    }
}

#[test]
fn finetuning_token_accounting_matches_sequence_lengths() {
    let t = trace(2.0, 5, 3, 1);
    let layers = SimConfig::default().ft_layers as u64;
    let cfg = SimConfig {
        drain_finetune: true,
        ..SimConfig::default()
    };
    let per_batch: Vec<u64> = t
        .arrivals
        .iter()
        .filter_map(|a| match a.kind {
            Kind::Finetune { seq_len } => Some(seq_len as u64 * (1 + layers)),
            _ => None,
        })
        .collect();
    for p in ["coserve", "temporal:16", "spatial:0.5"] {
        let m = run(
            &t,
            &SimConfig {
                policy: p.parse().unwrap(),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(m.summary.minibatches_completed, 3, "{p}");
        assert_eq!(m.summary.finetune_tokens, per_batch.iter().sum::<u64>(), "{p}");
    }
}

#[test]
fn disabled_temporal_sharing_never_finetunes() {
    let t = trace(4.0, 1, 20, 1);
    let m = sim(&t, "temporal:inf");
    assert_eq!(m.summary.finetune_tokens, 0);
    assert!(m.timeline.iter().all(|r| r.s == 0));
}

#[test]
fn coserving_keeps_every_inference_iteration_within_budget() {
    let t = trace(16.0, 2, 200, 1);
    let m = sim(&t, "coserve");
    let budget = SimConfig::default().scheduler.step_budget_ms();
    assert!(m.summary.max_predicted_ms_with_inference <= budget + 1e-9);
    assert!(m.timeline.iter().filter(|r| r.c > 0).all(|r| r.latency_ms <= budget + 1e-9));
    assert!(m.timeline.iter().any(|r| r.c > 0 && r.s > 0));
}

#[test]
fn vtc_serves_multiple_tenants() {
    let t = trace(10.0, 9, 40, 3);
    let m = sim(&t, "vtc");
    check_invariants(&t, &m, &SimConfig::default());
    let tenants: std::collections::BTreeSet<u32> = m.requests.iter().map(|r| r.tenant).collect();
    assert_eq!(tenants.len(), 3);
    assert!(m.summary.finetune_tokens > 0);
}

#[test]
fn isolation_gives_the_lowest_finetuning_throughput_under_light_load() {
    let tc = TraceConfig {
        duration_s: 60.0,
        finetune: FinetuneSpec {
            sequences: 500,
            ..TraceConfig::default().finetune
        },
        ..TraceConfig::default()
    };
    let policies: Vec<Policy> = ["coserve", "temporal:128", "spatial:0.5", "isolate:0.75"]
        .iter()
        .map(|p| p.parse().unwrap())
        .collect();
    let rows = compare(&tc, &[2.0], &[0], &policies, &SimConfig::default()).unwrap();
    let iso = rows.iter().find(|r| r.policy == "isolate:0.75").unwrap();
    for r in rows.iter().filter(|r| r.policy != "isolate:0.75") {
        assert!(iso.finetune_throughput_tps < r.finetune_throughput_tps, "{}", r.policy);
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let t = trace(8.0, 4, 30, 2);
    let cfg = SimConfig {
        policy: Policy::Vtc,
        seed: 4,
        ..SimConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run(&t, &cfg).unwrap().write_outputs(d.path(), &cfg).unwrap();
    }
    for f in ["metrics.csv", "timeline.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(dirs[0].path().join(f)).unwrap(),
            std::fs::read(dirs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dirs[0].path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 4);
}

#[test]
fn queued_requests_past_the_ttft_limit_are_served_but_fail() {
    let arrivals = (0..4)
        .map(|i| Arrival {
            time_ms: i as f64,
            tenant: 0,
            kind: Kind::Inference {
                prompt_len: 64,
                gen_len: 4,
            },
        })
        .collect();
    let t = Trace {
        arrivals,
        meta: TraceMeta {
            seed: 0,
            duration_s: 0.0,
            rate_rps: 0.0,
        },
    };
    let cfg = SimConfig {
        profile: LatencyProfile::new(1.0, 0.05, None).unwrap(),
        scheduler: coserve_core::scheduler::SchedulerConfig {
            max_batch: 1,
            ttft_slo_ms: 10.0,
            ..Default::default()
        },
        ..SimConfig::default()
    };
    let m = run(&t, &cfg).unwrap();
    assert_eq!(m.requests.len(), 4);
    assert!(m.requests[0].slo_ok);
    assert!(!m.requests[3].slo_ok);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariants_hold_on_random_workloads(
        seed in 0u64..1000,
        rate in 1.0f64..12.0,
        sequences in 0u32..5,
        policy in prop::sample::select(vec!["coserve", "vtc", "dts", "temporal:32", "spatial:0.4", "isolate:0.6"]),
    ) {
        let t = trace(rate, seed, sequences, 2);
        let cfg = SimConfig { policy: policy.parse().unwrap(), total_pages: 2048, ..SimConfig::default() };
        let m = run(&t, &cfg).unwrap();
        check_invariants(&t, &m, &cfg);
    }
}
