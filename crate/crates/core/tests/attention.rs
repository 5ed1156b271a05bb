use coserve_core::attention::*;
use coserve_core::tensor::{rel_err_scalar, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn reference_gradients_match_finite_differences() {
    let cfg = TinyConfig::new(2, 6, 12, 2);
    let base = TinyModel::random(cfg, 3).unwrap();
    let toks = tokens(7, cfg.vocab, 4);
    let (_, acts) = forward_full(&base, &toks).unwrap();
    let grads = backward_full(&base, &acts).lora;
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layer in 0..cfg.depth {
        for t in TARGETS {
            for use_b in [false, true] {
                for _ in 0..3 {
                    let g = grads.get(layer, t, use_b);
                    let (r, c) = (rng.random_range(0..g.rows()), rng.random_range(0..g.cols()));
                    let eval = |delta: f64| {
                        let mut m = base.clone();
                        let lo = &mut m.layers[layer].lora[t as usize];
                        let w: &mut Matrix = if use_b { &mut lo.b } else { &mut lo.a };
                        w.add_at(r, c, delta);
                        forward_full(&m, &toks).unwrap().0
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let analytic = g.get(r, c);
                    let err = (fd - analytic).abs() / analytic.abs().max(1e-3);
                    assert!(err <= 1e-6, "{layer} {t:?} b={use_b} ({r},{c}): fd {fd} vs {analytic}");
                }
            }
        }
    }
}

#[test]
fn token_level_matches_reference_on_random_partitions() {
    let cfg = TinyConfig::new(2, 16, 64, 2);
    let reports = verify_token_level(cfg, 32, 50, 17).unwrap();
    assert_eq!(reports.len(), 7);
    for r in &reports {
        assert!(r.shapes_ok, "{}", r.class);
        assert!(r.worst.max() <= 1e-10, "{}: {:?}", r.class, r.worst);
    }
}

#[test]
fn multi_head_token_level_matches_reference() {
    let cfg = TinyConfig {
        heads: 4,
        ..TinyConfig::new(2, 8, 20, 2)
    };
    for r in verify_token_level(cfg, 12, 10, 2).unwrap() {
        assert!(r.worst.max() <= 1e-10, "{}: {:?}", r.class, r.worst);
    }
}

#[test]
fn single_token_windows_descend_from_end() {
    let cfg = TinyConfig::new(1, 16, 64, 2);
    let m = TinyModel::random(cfg, 1).unwrap();
    let toks = tokens(8, cfg.vocab, 1);
    let one = WindowSchedule::uniform(8, 1).unwrap();
    let r = finetune_token_level(&m, &toks, &one, std::slice::from_ref(&one)).unwrap();
    let ends: Vec<usize> = r.shapes.iter().map(|s| s.l_j).collect();
    assert_eq!(ends, vec![8, 7, 6, 5, 4, 3, 2, 1]);
    assert!(r.shapes.iter().all(|s| s.dq == (1, 16) && s.dk == (s.l_j, 16)));
}

#[test]
fn no_frozen_weight_gradient_is_allocated() {
    let cfg = TinyConfig::new(2, 8, 16, 2);
    let m = TinyModel::random(cfg, 9).unwrap();
    let toks = tokens(6, cfg.vocab, 9);
    take_allocation_audit();
    let s = WindowSchedule::uniform(6, 2).unwrap();
    finetune_token_level(&m, &toks, &s, &[s.clone(), s.clone()]).unwrap();
    let (_, acts) = forward_full(&m, &toks).unwrap();
    backward_full(&m, &acts);
    let names = take_allocation_audit();
    assert!(!names.is_empty());
    let frozen = ["wq", "wk", "wv", "wo", "w_up", "w_down", "embed", "head"];
    for n in &names {
        assert!(
            n.contains(".lora.") || n.contains(".window.") || n.starts_with("dKVAccum"),
            "unexpected buffer {n}"
        );
        assert!(!frozen.iter().any(|f| n.split('.').any(|p| p == *f)), "{n}");
    }
}

#[test]
fn loss_is_invariant_to_forward_partition() {
    let cfg = TinyConfig::new(2, 8, 16, 2);
    let m = TinyModel::random(cfg, 4).unwrap();
    let toks = tokens(10, cfg.vocab, 4);
    let (full, _) = forward_full(&m, &toks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let f = WindowSchedule::random(10, &mut rng);
        let r = finetune_token_level(&m, &toks, &f, &[f.clone(), f.clone()]).unwrap();
        assert!(rel_err_scalar(r.loss, full) <= 1e-12);
    }
}
