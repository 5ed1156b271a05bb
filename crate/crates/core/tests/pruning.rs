mod common;

use std::collections::BTreeSet;

use common::{dependency_oracle, random_feeds, random_graph, satisfiable};
use coserve_core::graph_exec::{backward, forward, full_store, plan_store};
use coserve_core::pcg::{validate_pcg, TensorId};
use coserve_core::pruning::{
    account_memory, account_memory_windowed, build_mlp_lora, build_transformer_block, prune, reverse_autodiff,
    PruneOptions,
};
use coserve_core::tensor::rel_err;

#[test]
fn random_graphs_pass_sufficiency_and_minimality() {
    for seed in 0..200u64 {
        let g = random_graph(seed);
        assert!(g.operators.len() <= 12, "seed {seed}: {} ops", g.operators.len());
        assert!(validate_pcg(&g).is_empty());
        let full = reverse_autodiff(&g).unwrap();
        let (pruned, plan) = prune(&g, &full, &PruneOptions::default()).unwrap();
        assert!(plan.a.is_disjoint(&plan.r));

        let values = forward(&g, &random_feeds(&g, seed)).unwrap();
        let reference = backward(&g, &full, &full_store(&values), None).unwrap();
        let store = plan_store(&g, &plan, &values).unwrap();
        let got = backward(&g, &pruned, &|t| store.get(t).cloned(), None).unwrap();
        assert_eq!(got.keys().collect::<Vec<_>>(), reference.keys().collect::<Vec<_>>(), "seed {seed}");
        for (k, v) in &reference {
            assert!(rel_err(&got[k], v) <= 1e-12, "seed {seed}: gradient of {k}");
        }

        assert!(satisfiable(&g, &pruned, &plan, &plan.a));
        for t in &plan.a {
            let mut fewer = plan.a.clone();
            fewer.remove(t);
            assert!(!satisfiable(&g, &pruned, &plan, &fewer), "seed {seed}: {t} is not needed");
        }

        let needed = dependency_oracle(&g);
        assert_eq!(plan.a_before_remat, needed.values, "seed {seed}");
        let masks: BTreeSet<_> = needed.masks.difference(&needed.values).cloned().collect();
        assert_eq!(plan.c, masks, "seed {seed}");

        let (again, plan2) = prune(&g, &pruned, &PruneOptions::default()).unwrap();
        assert_eq!(again, pruned);
        assert_eq!((plan2.a, plan2.r, plan2.c), (plan.a.clone(), plan.r.clone(), plan.c.clone()));
    }
}

#[test]
fn mlp_lora_matches_dependency_oracle() {
    let g = build_mlp_lora(8, 16, 2);
    let (_, plan) = prune(&g, &reverse_autodiff(&g).unwrap(), &PruneOptions::default()).unwrap();
    let needed = dependency_oracle(&g);
    assert_eq!(plan.a_before_remat, needed.values);
    let ids = |xs: &[&str]| xs.iter().map(|s| TensorId::new(*s)).collect::<BTreeSet<_>>();
    assert_eq!(needed.values, ids(&["x", "xa", "y2"]));
    assert!(!plan.a_before_remat.contains(&TensorId::new("lin1")));
    assert!(!plan.a_before_remat.contains(&TensorId::new("r")));
}

#[test]
fn transformer_block_memory_stages_shrink() {
    let g = build_transformer_block(1024, 1024, 4096, 16);
    let (_, plan) = prune(&g, &reverse_autodiff(&g).unwrap(), &PruneOptions::default()).unwrap();
    let base = account_memory(&plan, 1024, 1, 2);
    assert!((0.61..=0.84).contains(&base.pruning_reduction), "{}", base.pruning_reduction);
    let windowed = account_memory_windowed(&plan, 1024, 1, 2, Some(64));
    let s = windowed.stages;
    assert!(s.pruned < s.retain_all);
    assert!(s.pruned_remat < s.pruned);
    assert!(s.pruned_remat_token < s.pruned_remat);
    assert!(windowed.to_csv().unwrap().starts_with("category,bytes,percent"));
}

#[test]
fn retain_all_is_the_sum_of_forward_activations_plus_peak_gradients() {
    let g = build_mlp_lora(4, 8, 2);
    let (_, plan) = prune(&g, &reverse_autodiff(&g).unwrap(), &PruneOptions::default()).unwrap();
    let forward_bytes: usize = plan.all_activations.iter().map(|t| plan.sizes[t].elements * 2).sum();
    let r = account_memory(&plan, 4, 1, 2);
    assert!(r.stages.retain_all >= forward_bytes as f64);
    assert_eq!(r.optimizer_states, 2.0 * 4.0 * plan.trainable_weight_elements as f64);
}

