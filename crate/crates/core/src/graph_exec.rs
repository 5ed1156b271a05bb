//! Dense numeric execution of non-parallel graphs and their backward graphs.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::pcg::{ElementKind, OpKind, Pcg, TensorId};
use crate::pruning::{BackwardGraph, BwdTensor, PruningPlan};
use crate::tensor::Matrix;

/// Forward value of a single operator.
pub fn eval_op(kind: OpKind, ins: &[&Matrix]) -> Result<Matrix> {
    Ok(match kind {
        OpKind::MatMul | OpKind::Embedding => ins[0].matmul(ins[1]),
        OpKind::MatMulT => ins[0].matmul_t(ins[1]),
        OpKind::Add => ins[0].add(ins[1]),
        OpKind::ElemMul => elem_mul(ins[0], ins[1]),
        OpKind::ReLU => ins[0].map(|v| v.max(0.0)),
        OpKind::Softmax => softmax_rows(ins[0]),
        OpKind::Loss => Matrix::from_vec(1, 1, vec![0.5 * ins[0].data().iter().map(|v| v * v).sum::<f64>()]),
        OpKind::Identity | OpKind::Partition | OpKind::Combine | OpKind::Replicate | OpKind::Reduce => ins[0].clone(),
        OpKind::Input => return Err(Error::InvalidConfiguration("inputs are fed, not evaluated".into())),
    })
}

fn elem_mul(a: &Matrix, b: &Matrix) -> Matrix {
    if b.rows() == 1 && a.rows() != 1 {
        a.mul_row_vector(b)
    } else {
        a.hadamard(b)
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Evaluates every operator; `feeds` supplies graph inputs and weights.
pub fn forward(g: &Pcg, feeds: &HashMap<TensorId, Matrix>) -> Result<HashMap<TensorId, Matrix>> {
    let order = g
        .topo_order()
        .ok_or_else(|| Error::InvalidConfiguration("graph has a cycle".into()))?;
    let mut values = feeds.clone();
    for i in order {
        let op = &g.operators[i];
        if op.kind == OpKind::Input {
            for t in &op.outputs {
                if !values.contains_key(t) {
                    return Err(Error::InvalidConfiguration(format!("no feed for input {t}")));
                }
            }
            continue;
        }
        let ins: Vec<&Matrix> = op
            .inputs
            .iter()
            .map(|t| values.get(t).ok_or_else(|| Error::InvalidConfiguration(format!("no value for {t}"))))
            .collect::<Result<_>>()?;
        let out = eval_op(op.kind, &ins)?;
        values.insert(op.outputs[0].clone(), out);
    }
    Ok(values)
}

fn mask_of(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Every backward value derivable from a full set of forward values.
pub fn full_store(values: &HashMap<TensorId, Matrix>) -> impl Fn(&BwdTensor) -> Option<Matrix> + '_ {
    move |t| match t {
        BwdTensor::Fwd { id } => values.get(id).cloned(),
        BwdTensor::Mask { id } => values.get(id).map(mask_of),
        _ => None,
    }
}

/// Backward values reconstructed from what a plan keeps: memorized tensors,
/// weights, tensors recomputed from those, and decoded bitmasks.
pub fn plan_store(g: &Pcg, plan: &PruningPlan, values: &HashMap<TensorId, Matrix>) -> Result<HashMap<BwdTensor, Matrix>> {
    let mut store = HashMap::new();
    for t in &g.tensors {
        if t.kind == ElementKind::Weight {
            if let Some(v) = values.get(&t.id) {
                store.insert(BwdTensor::Fwd { id: t.id.clone() }, v.clone());
            }
        }
    }
    for t in &plan.a {
        let v = values
            .get(t)
            .ok_or_else(|| Error::InvalidConfiguration(format!("no value for memorized {t}")))?;
        store.insert(BwdTensor::Fwd { id: t.clone() }, v.clone());
    }
    for t in &plan.c {
        let v = values
            .get(t)
            .ok_or_else(|| Error::InvalidConfiguration(format!("no value for masked {t}")))?;
        store.insert(BwdTensor::Mask { id: t.clone() }, mask_of(v));
    }
    let order = g.topo_order().unwrap_or_default();
    for i in order {
        let op = &g.operators[i];
        for t in op.outputs.iter().filter(|t| plan.r.contains(*t)) {
            let ins: Vec<Matrix> = op
                .inputs
                .iter()
                .map(|x| {
                    store.get(&BwdTensor::Fwd { id: x.clone() }).cloned().ok_or_else(|| {
                        Error::DependencyViolation(format!("cannot recompute {t}: {x} is not stored"))
                    })
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Matrix> = ins.iter().collect();
            store.insert(BwdTensor::Fwd { id: t.clone() }, eval_op(op.kind, &refs)?);
        }
    }
    // A stored tensor also yields its own sign mask.
    let derived: Vec<(BwdTensor, Matrix)> = store
        .iter()
        .filter_map(|(k, v)| match k {
            BwdTensor::Fwd { id } => Some((BwdTensor::Mask { id: id.clone() }, mask_of(v))),
            _ => None,
        })
        .collect();
    for (k, v) in derived {
        store.entry(k).or_insert(v);
    }
    Ok(store)
}

/// Runs the surviving backward nodes and returns trainable-weight gradients.
///
/// `seed` is the gradient of the loss tensor when it is not produced by a
/// `Loss` operator. A value missing from `provide` is a dependency violation.
pub fn backward(
    g: &Pcg,
    bwd: &BackwardGraph,
    provide: &dyn Fn(&BwdTensor) -> Option<Matrix>,
    seed: Option<&Matrix>,
) -> Result<BTreeMap<TensorId, Matrix>> {
    let mut grads: HashMap<TensorId, Matrix> = HashMap::new();
    if let Some(s) = seed {
        grads.insert(bwd.loss.clone(), s.clone());
    }
    let get = |t: &BwdTensor| -> Result<Matrix> {
        provide(t).ok_or_else(|| Error::DependencyViolation(format!("backward value {t:?} unavailable")))
    };
    for node in bwd.surviving() {
        let op = g
            .op(&node.forward)
            .ok_or_else(|| Error::InvalidConfiguration(format!("unknown operator {}", node.forward)))?;
        let y = &op.outputs[0];
        let dy = if op.kind == OpKind::Loss {
            None
        } else {
            Some(
                grads
                    .get(y)
                    .cloned()
                    .ok_or_else(|| Error::DependencyViolation(format!("gradient of {y} unavailable")))?,
            )
        };
        for out in &node.outputs {
            let BwdTensor::Contrib { of, slot, .. } = out else {
                continue;
            };
            let fwd = |i: usize| get(&BwdTensor::Fwd { id: op.inputs[i].clone() });
            let dy = dy.as_ref();
            let contrib = match op.kind {
                OpKind::MatMul | OpKind::Embedding => {
                    let dy = dy.expect("non-loss");
                    if *slot == 0 {
                        dy.matmul_t(&fwd(1)?)
                    } else {
                        fwd(0)?.t_matmul(dy)
                    }
                }
                OpKind::MatMulT => {
                    let dy = dy.expect("non-loss");
                    if *slot == 0 {
                        dy.matmul(&fwd(1)?)
                    } else {
                        dy.t_matmul(&fwd(0)?)
                    }
                }
                OpKind::ElemMul => {
                    let dy = dy.expect("non-loss");
                    let other = fwd(1 - slot)?;
                    let shape = g.tensor(of).map(|t| t.extents()).unwrap_or_default();
                    let full = if other.rows() == 1 && dy.rows() != 1 {
                        dy.mul_row_vector(&other)
                    } else {
                        dy.hadamard(&other)
                    };
                    if shape.first() == Some(&1) && dy.rows() != 1 {
                        Matrix::from_fn(1, full.cols(), |_, c| (0..full.rows()).map(|r| full.get(r, c)).sum())
                    } else {
                        full
                    }
                }
                OpKind::ReLU => dy.expect("non-loss").hadamard(&get(&BwdTensor::Mask { id: op.inputs[0].clone() })?),
                OpKind::Softmax => {
                    let dy = dy.expect("non-loss");
                    let yv = get(&BwdTensor::Fwd { id: y.clone() })?;
                    let mut dx = Matrix::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let dot: f64 = (0..yv.cols()).map(|c| dy.get(r, c) * yv.get(r, c)).sum();
                        for c in 0..yv.cols() {
                            dx.set(r, c, yv.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    dx
                }
                OpKind::Loss => fwd(0)?,
                _ => dy.expect("non-loss").clone(),
            };
            match grads.get_mut(of) {
                Some(acc) => acc.add_assign(&contrib),
                None => {
                    grads.insert(of.clone(), contrib);
                }
            }
        }
    }
    Ok(g
        .trainable_weights()
        .into_iter()
        .filter_map(|w| grads.remove(&w).map(|v| (w, v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcg::GraphBuilder;
    use crate::pruning::{build_mlp_lora, prune, reverse_autodiff, PruneOptions};
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feeds(g: &Pcg, rng: &mut ChaCha8Rng) -> HashMap<TensorId, Matrix> {
        let mut f = HashMap::new();
        for t in &g.tensors {
            let is_input = g.producer_of(&t.id).is_some_and(|o| o.kind == OpKind::Input);
            if t.kind == ElementKind::Weight || is_input {
                let e = t.extents();
                f.insert(t.id.clone(), Matrix::random(e[0], e[1], 1.0, rng));
            }
        }
        f
    }

    #[test]
    fn pruned_gradients_match_retain_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = build_mlp_lora(4, 6, 2);
        let values = forward(&g, &feeds(&g, &mut rng)).unwrap();
        let full_bwd = reverse_autodiff(&g).unwrap();
        let reference = backward(&g, &full_bwd, &full_store(&values), None).unwrap();
        let (pruned, plan) = prune(&g, &full_bwd, &PruneOptions::default()).unwrap();
        let store = plan_store(&g, &plan, &values).unwrap();
        let got = backward(&g, &pruned, &|t| store.get(t).cloned(), None).unwrap();
        assert_eq!(reference.len(), 2);
        for (k, v) in &reference {
            assert!(rel_err(&got[k], v) <= 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3, 4]);
        let w = b.weight("w", &[4, 4]);
        let v = b.weight("v", &[1, 4]);
        let h = b.matmul(&x, &w, "h", true);
        let s = b.op(OpKind::Softmax, &[&h], "s", false);
        let e = b.op(OpKind::ElemMul, &[&s, &v], "e", true);
        b.op(OpKind::Loss, &[&e], "loss", false);
        let g = b.finish();
        let f = feeds(&g, &mut rng);
        let values = forward(&g, &f).unwrap();
        let grads = backward(&g, &reverse_autodiff(&g).unwrap(), &full_store(&values), None).unwrap();
        let loss_at = |f: &HashMap<TensorId, Matrix>| forward(&g, f).unwrap()[&TensorId::new("loss")].get(0, 0);
        let eps = 1e-6;
        for wid in ["w", "v"] {
            let id = TensorId::new(wid);
            let gw = &grads[&id];
            for idx in 0..gw.len() {
                let mut plus = f.clone();
                plus.get_mut(&id).unwrap().data_mut()[idx] += eps;
                let mut minus = f.clone();
                minus.get_mut(&id).unwrap().data_mut()[idx] -= eps;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                assert!((fd - gw.data()[idx]).abs() < 1e-6, "{wid}[{idx}]");
            }
        }
    }
}
