mod common;

use std::collections::BTreeMap;

use common::{adversarial, L_INPUT};
use coserve_core::vtc::*;

#[test]
fn counter_spread_and_service_bounds_hold_on_adversarial_traces() {
    for seed in 0..10 {
        let cfg = adversarial(seed);
        let run = simulate_fairness(&cfg).unwrap();
        assert!(
            run.max_spread <= run.spread_bound,
            "seed {seed}: spread {} > {}",
            run.max_spread,
            run.spread_bound
        );
        assert_eq!(run.idle_with_pending, 0, "seed {seed}: not work-conserving");
        let checkpoints: Vec<usize> = (0..run.history.len()).step_by(250).collect();
        let tenants: Vec<u32> = cfg.tenants.keys().copied().collect();
        let mut checked = 0;
        for (i, &t1) in checkpoints.iter().enumerate() {
            for &t2 in &checkpoints[i + 1..] {
                for (a, &f) in tenants.iter().enumerate() {
                    for &g in &tenants[a + 1..] {
                        let c = check_fairness_bound(&run.history, t1, t2, f, g, run.spread_bound).unwrap();
                        assert!(c.ok, "seed {seed} [{t1},{t2}) {f} vs {g}: {} > {}", c.diff, c.bound);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn symmetric_tenants_receive_equal_service() {
    let d = Demand::Inference { prompt: 64, gen: 16 };
    let tenants = (0..2)
        .map(|t| {
            (
                t,
                Arrivals::Backlogged {
                    pattern: vec![d],
                    depth: 2,
                },
            )
        })
        .collect();
    let run = simulate_fairness(&FairnessConfig {
        weights: VtcWeights::default(),
        l_input: L_INPUT,
        capacity: 80 * 10,
        window: 0,
        iterations: 1000,
        tenants,
    })
    .unwrap();
    let last = run.history.last().unwrap();
    let c = check_fairness_bound(&run.history, 0, run.history.len() - 1, 0, 1, run.spread_bound).unwrap();
    assert!(c.ok);
    assert!(c.diff <= 64.0 + 1e-9, "{}", c.diff);
    assert!(last.service[&0] > 0.0);
}

#[test]
fn unbacklogged_interval_is_not_applicable() {
    let mut tenants = BTreeMap::new();
    tenants.insert(
        0,
        Arrivals::Backlogged {
            pattern: vec![Demand::Inference { prompt: 8, gen: 8 }],
            depth: 1,
        },
    );
    tenants.insert(
        1,
        Arrivals::At {
            demand: Demand::Inference { prompt: 8, gen: 8 },
            iterations: vec![5],
        },
    );
    let run = simulate_fairness(&FairnessConfig {
        weights: VtcWeights::default(),
        l_input: L_INPUT,
        capacity: 64,
        window: 0,
        iterations: 50,
        tenants,
    })
    .unwrap();
    assert!(check_fairness_bound(&run.history, 10, 40, 0, 1, run.spread_bound).is_err());
}

#[test]
fn light_tenant_requests_are_all_dispatched() {
    for seed in 0..5 {
        let mut cfg = adversarial(seed);
        let light = 99;
        let demand = Demand::Inference { prompt: 16, gen: 8 };
        cfg.tenants.insert(
            light,
            Arrivals::At {
                demand,
                iterations: (1..20).map(|k| k * 400 + seed).collect(),
            },
        );
        let run = simulate_fairness(&cfg).unwrap();
        let t2 = run.history.len() - 1;
        let total: f64 = run.history[t2].service.values().sum();
        let n = cfg.tenants.len() as f64;
        let requested = 19.0 * (16.0 + 2.0 * 8.0);
        let threshold = total / n - 5.0 * run.spread_bound;
        assert!(requested < threshold, "seed {seed}: light tenant not under the threshold");
        let d = &run.dispatch[&light];
        assert_eq!(d.len(), 19);
        for &(arrived, dispatched) in d {
            let at = dispatched.unwrap_or_else(|| panic!("seed {seed}: request at {arrived} never dispatched"));
            assert!(at as usize <= t2 && at >= arrived);
        }
    }
}
