#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use coserve_core::pcg::{ElementKind, GraphBuilder, OpKind, Pcg, TensorId};
use coserve_core::pruning::{BackwardGraph, BwdTensor, PruningPlan};
use coserve_core::tensor::Matrix;
use coserve_core::vtc::{Arrivals, Demand, FairnessConfig, VtcWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOKENS: usize = 3;
pub const HIDDEN: usize = 4;

/// Random frozen backbone with trainable pieces; at most 12 operators
/// including the input and the loss.
pub fn random_graph(seed: u64) -> Pcg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[TOKENS, HIDDEN]);
    let mut acts = vec![x];
    let mut ops = 1usize;
    let mut n = 0usize;
    let mut any_trainable = false;
    let target = rng.random_range(3..=10usize);
    while ops < target || !any_trainable {
        n += 1;
        let pick = |rng: &mut ChaCha8Rng, acts: &Vec<TensorId>| acts[rng.random_range(0..acts.len())].clone();
        let a = pick(&mut rng, &acts);
        let kind = if ops + 3 > 11 { rng.random_range(0..2) } else { rng.random_range(0..8) };
        let out = format!("t{n}");
        let t = match kind {
            0 | 1 => {
                let trainable = kind == 1 || (ops + 2 > 11 && !any_trainable);
                any_trainable |= trainable;
                let w = b.weight(&format!("w{n}"), &[HIDDEN, HIDDEN]);
                ops += 1;
                b.matmul(&a, &w, &out, trainable)
            }
            2 => {
                let wa = b.weight(&format!("lora{n}.A"), &[HIDDEN, 2]);
                let wb = b.weight(&format!("lora{n}.B"), &[2, HIDDEN]);
                let xa = b.matmul(&a, &wa, &format!("lora{n}.xa"), true);
                let lb = b.matmul(&xa, &wb, &format!("lora{n}.out"), true);
                let base = pick(&mut rng, &acts);
                any_trainable = true;
                ops += 3;
                b.op(OpKind::Add, &[&base, &lb], &out, false)
            }
            3 => {
                let c = pick(&mut rng, &acts);
                ops += 1;
                b.op(OpKind::Add, &[&a, &c], &out, false)
            }
            4 => {
                ops += 1;
                b.op(OpKind::ReLU, &[&a], &out, false)
            }
            5 => {
                let c = pick(&mut rng, &acts);
                ops += 1;
                b.op(OpKind::ElemMul, &[&a, &c], &out, false)
            }
            6 => {
                let trainable = rng.random_bool(0.5);
                any_trainable |= trainable;
                let w = b.weight(&format!("s{n}"), &[1, HIDDEN]);
                ops += 1;
                b.op(OpKind::ElemMul, &[&a, &w], &out, trainable)
            }
            _ => {
                ops += 1;
                b.op(OpKind::Softmax, &[&a], &out, false)
            }
        };
        acts.push(t);
    }
    let last = acts.last().unwrap().clone();
    b.op(OpKind::Loss, &[&last], "loss", false);
    b.finish()
}

pub fn random_feeds(g: &Pcg, seed: u64) -> HashMap<TensorId, Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut f = HashMap::new();
    for t in &g.tensors {
        let is_input = g.producer_of(&t.id).is_some_and(|o| o.kind == OpKind::Input);
        if t.kind == ElementKind::Weight || is_input {
            let e = t.extents();
            f.insert(t.id.clone(), Matrix::random(e[0], e[1], 1.0, &mut rng));
        }
    }
    f
}

/// Forward values and bitmasks a backward pass needs to produce every
/// trainable-weight gradient, derived from path reachability alone.
pub struct Needed {
    pub values: BTreeSet<TensorId>,
    pub masks: BTreeSet<TensorId>,
}

pub fn dependency_oracle(g: &Pcg) -> Needed {
    let loss = g.loss.clone().unwrap();
    let order = g.topo_order().unwrap();
    // Tensors downstream of a trainable weight.
    let mut below = BTreeSet::new();
    for &i in &order {
        let op = &g.operators[i];
        let fed = op.inputs.iter().any(|t| below.contains(t) || (op.trainable && g.tensor(t).unwrap().kind == ElementKind::Weight));
        if fed {
            below.extend(op.outputs.iter().cloned());
        }
    }
    // Tensors that influence the loss.
    let mut reaches = BTreeSet::from([loss.clone()]);
    for &i in order.iter().rev() {
        let op = &g.operators[i];
        if op.outputs.iter().any(|t| reaches.contains(t)) {
            reaches.extend(op.inputs.iter().cloned());
        }
    }
    let grad_needed = |t: &TensorId| below.contains(t) && reaches.contains(t);
    let mut values = BTreeSet::new();
    let mut masks = BTreeSet::new();
    for op in &g.operators {
        let z = &op.outputs[0];
        if op.kind == OpKind::Input || !grad_needed(z) {
            continue;
        }
        for (slot, v) in op.inputs.iter().enumerate() {
            let is_weight = g.tensor(v).unwrap().kind == ElementKind::Weight;
            let wanted = if is_weight { op.trainable } else { grad_needed(v) };
            if !wanted {
                continue;
            }
            match op.kind {
                OpKind::MatMul | OpKind::MatMulT | OpKind::ElemMul | OpKind::Embedding => {
                    values.insert(op.inputs[1 - slot].clone());
                }
                OpKind::Softmax => {
                    values.insert(z.clone());
                }
                OpKind::ReLU => {
                    masks.insert(v.clone());
                }
                OpKind::Loss => {
                    values.insert(v.clone());
                }
                _ => {}
            }
        }
    }
    values.retain(|t| g.tensor(t).unwrap().kind != ElementKind::Weight);
    Needed { values, masks }
}

/// Whether every surviving backward node can read its forward inputs when
/// only `kept` (plus weights and whatever is recomputable from them) is stored.
pub fn satisfiable(g: &Pcg, bwd: &BackwardGraph, plan: &PruningPlan, kept: &BTreeSet<TensorId>) -> bool {
    let mut avail: BTreeSet<TensorId> = kept.clone();
    avail.extend(g.tensors.iter().filter(|t| t.kind == ElementKind::Weight).map(|t| t.id.clone()));
    for &i in &g.topo_order().unwrap() {
        let op = &g.operators[i];
        for t in op.outputs.iter().filter(|t| plan.r.contains(*t)) {
            if op.inputs.iter().all(|x| avail.contains(x)) {
                avail.insert(t.clone());
            }
        }
    }
    bwd.surviving().all(|n| {
        n.inputs.iter().all(|t| match t {
            BwdTensor::Fwd { id } => avail.contains(id),
            BwdTensor::Mask { id } => plan.c.contains(id) || avail.contains(id),
            _ => true,
        })
    })
}


pub const L_INPUT: u64 = 512;
pub const CAPACITY: u64 = 4096;

/// 2 to 4 backlogged tenants with mixed, skewed demand.
pub fn adversarial(seed: u64) -> FairnessConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4u32);
    let mut tenants = BTreeMap::new();
    for t in 0..n {
        let pattern: Vec<Demand> = match (t + seed as u32) % 4 {
            0 => vec![Demand::Inference { prompt: L_INPUT, gen: 1 }],
            1 => vec![Demand::Inference {
                prompt: 1,
                gen: rng.random_range(100..400),
            }],
            2 => vec![Demand::Finetune {
                tokens: rng.random_range(500..3000),
            }],
            _ => (0..8)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        Demand::Finetune {
                            tokens: rng.random_range(1..2000),
                        }
                    } else {
                        Demand::Inference {
                            prompt: rng.random_range(1..=L_INPUT),
                            gen: rng.random_range(1..300),
                        }
                    }
                })
                .collect(),
        };
        tenants.insert(
            t,
            Arrivals::Backlogged {
                pattern,
                depth: rng.random_range(1..4),
            },
        );
    }
    FairnessConfig {
        weights: VtcWeights::default(),
        l_input: L_INPUT,
        capacity: CAPACITY,
        window: rng.random_range(64..512),
        iterations: 10_000,
        tenants,
    }
}

