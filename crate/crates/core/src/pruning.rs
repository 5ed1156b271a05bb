//! Static pruning of the backward graph of a PEFT model.
//!
//! [`reverse_autodiff`] builds one backward node per differentiable forward
//! operator. [`prune`] removes every gradient that only feeds frozen weights,
//! then picks which forward activations to memorize, rematerialize, or keep
//! as ReLU bitmasks. [`account_memory`] turns a plan into byte counts.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcg::{ElementKind, GraphBuilder, OpId, OpKind, OperatorNode, Pcg, TensorId};

/// A value flowing through the backward graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BwdTensor {
    /// A forward activation or weight.
    Fwd { id: TensorId },
    /// One bit per element: `x > 0`.
    Mask { id: TensorId },
    /// Total gradient of a forward tensor: the sum of its contributions.
    Grad { id: TensorId },
    /// Gradient contribution of operator `via` to its input at `slot`.
    Contrib { of: TensorId, via: OpId, slot: usize },
}

impl BwdTensor {
    fn fwd(t: &TensorId) -> Self {
        BwdTensor::Fwd { id: t.clone() }
    }

    fn grad(t: &TensorId) -> Self {
        BwdTensor::Grad { id: t.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardNode {
    pub forward: OpId,
    pub kind: OpKind,
    pub inputs: BTreeSet<BwdTensor>,
    pub outputs: BTreeSet<BwdTensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardGraph {
    /// Reverse topological order of the forward graph.
    pub nodes: Vec<BackwardNode>,
    pub loss: TensorId,
}

impl BackwardGraph {
    pub fn node(&self, op: &OpId) -> Option<&BackwardNode> {
        self.nodes.iter().find(|n| &n.forward == op)
    }

    pub fn consumes(&self, t: &BwdTensor) -> bool {
        self.nodes.iter().any(|n| n.inputs.contains(t))
    }

    pub fn surviving(&self) -> impl Iterator<Item = &BackwardNode> {
        self.nodes.iter().filter(|n| !n.outputs.is_empty())
    }
}

/// Inputs needed to compute the gradient contribution to input `slot` of `op`.
pub fn contribution_needs(op: &OperatorNode, slot: usize) -> Result<BTreeSet<BwdTensor>> {
    let mut need = BTreeSet::new();
    let dy = || BwdTensor::grad(&op.outputs[0]);
    let other = |i: usize| BwdTensor::fwd(&op.inputs[1 - i]);
    match op.kind {
        OpKind::MatMul | OpKind::MatMulT | OpKind::Embedding | OpKind::ElemMul => {
            need.insert(dy());
            need.insert(other(slot));
        }
        OpKind::Add
        | OpKind::Identity
        | OpKind::Partition
        | OpKind::Combine
        | OpKind::Replicate
        | OpKind::Reduce => {
            need.insert(dy());
        }
        OpKind::ReLU => {
            need.insert(dy());
            need.insert(BwdTensor::Mask {
                id: op.inputs[0].clone(),
            });
        }
        OpKind::Softmax => {
            need.insert(dy());
            need.insert(BwdTensor::fwd(&op.outputs[0]));
        }
        OpKind::Loss => {
            need.insert(BwdTensor::fwd(&op.inputs[0]));
        }
        OpKind::Input => return Err(Error::AutodiffUnsupported(op.kind.to_string())),
    }
    Ok(need)
}

fn update_input(op: &OperatorNode, outputs: &BTreeSet<BwdTensor>) -> BTreeSet<BwdTensor> {
    let mut need = BTreeSet::new();
    for o in outputs {
        if let BwdTensor::Contrib { slot, .. } = o {
            need.extend(contribution_needs(op, *slot).expect("checked at construction"));
        }
    }
    need
}

/// Reverse-mode AD over the merged graph.
pub fn reverse_autodiff(g: &Pcg) -> Result<BackwardGraph> {
    let loss = g
        .loss
        .clone()
        .ok_or_else(|| Error::InvalidConfiguration("no loss tensor designated".into()))?;
    if g.tensor(&loss).is_none() {
        return Err(Error::InvalidConfiguration(format!("unknown loss tensor {loss}")));
    }
    let order = g
        .topo_order()
        .ok_or_else(|| Error::InvalidConfiguration("graph has a cycle".into()))?;
    // Only operators with a path to the loss are differentiated.
    let mut reaches: BTreeSet<&TensorId> = BTreeSet::from([&loss]);
    for &i in order.iter().rev() {
        let op = &g.operators[i];
        if op.outputs.iter().any(|t| reaches.contains(t)) {
            reaches.extend(op.inputs.iter());
        }
    }
    let mut nodes = Vec::new();
    for &i in order.iter().rev() {
        let op = &g.operators[i];
        if op.kind == OpKind::Input || !op.outputs.iter().any(|t| reaches.contains(t)) {
            continue;
        }
        if op.outputs.len() != 1 {
            return Err(Error::AutodiffUnsupported(format!("{} with {} outputs", op.kind, op.outputs.len())));
        }
        let mut outputs = BTreeSet::new();
        for (slot, t) in op.inputs.iter().enumerate() {
            contribution_needs(op, slot)?;
            outputs.insert(BwdTensor::Contrib {
                of: t.clone(),
                via: op.id.clone(),
                slot,
            });
        }
        let inputs = update_input(op, &outputs);
        nodes.push(BackwardNode {
            forward: op.id.clone(),
            kind: op.kind,
            inputs,
            outputs,
        });
    }
    Ok(BackwardGraph { nodes, loss })
}

fn is_frozen_weight(g: &Pcg, t: &TensorId) -> bool {
    g.tensor(t).is_some_and(|x| x.kind == ElementKind::Weight) && !g.is_trainable_weight(t)
}

/// Whether a contribution still has a consumer: the optimizer for trainable
/// weights, otherwise whichever backward node needs the total gradient.
fn contribution_consumed(g: &Pcg, bwd: &BackwardGraph, of: &TensorId) -> bool {
    if g.is_trainable_weight(of) {
        return true;
    }
    bwd.consumes(&BwdTensor::grad(of))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct PruneOptions {
    /// Recompute-cost threshold in flops; `None` uses one `[s, h] × [h, h]` matmul
    /// sized from the first graph input.
    pub remat_threshold_flops: Option<f64>,
}


/// Element count of a forward tensor and how many of its dimensions scale
/// with the token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSize {
    pub elements: usize,
    pub token_dims: u32,
}

/// Gradient buffers and recomputed activations live during one backward step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFootprint {
    pub op: OpId,
    pub grads: BTreeSet<TensorId>,
    pub remat: BTreeSet<TensorId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Memorized activations.
    pub a: BTreeSet<TensorId>,
    /// Rematerialized activations.
    pub r: BTreeSet<TensorId>,
    /// Activations kept only as ReLU bitmasks.
    pub c: BTreeSet<TensorId>,
    /// Memorized set after graph pruning, before rematerialization.
    pub a_before_remat: BTreeSet<TensorId>,
    pub threshold_flops: f64,
    /// Token extent the graph was built with.
    pub base_tokens: usize,
    pub sizes: BTreeMap<TensorId, TensorSize>,
    pub frozen_weight_elements: usize,
    pub trainable_weight_elements: usize,
    /// Every forward activation, the retain-all baseline.
    pub all_activations: BTreeSet<TensorId>,
    pub steps: Vec<StepFootprint>,
    pub baseline_steps: Vec<StepFootprint>,
}

/// Runs both pruning steps on `bwd` and returns the pruned backward graph with its plan.
pub fn prune(g: &Pcg, bwd: &BackwardGraph, options: &PruneOptions) -> Result<(BackwardGraph, PruningPlan)> {
    let mut out = bwd.clone();
    let ops: HashMap<&OpId, &OperatorNode> = g.operators.iter().map(|o| (&o.id, o)).collect();
    let op_of = |id: &OpId| -> Result<&OperatorNode> {
        ops.get(id)
            .copied()
            .ok_or_else(|| Error::InvalidConfiguration(format!("backward node for unknown operator {id}")))
    };

    // Step 1: drop frozen-weight gradients.
    for node in &mut out.nodes {
        let before = node.outputs.len();
        node.outputs
            .retain(|t| !matches!(t, BwdTensor::Contrib { of, .. } if is_frozen_weight(g, of)));
        if node.outputs.len() != before {
            node.inputs = update_input(op_of(&node.forward)?, &node.outputs);
        }
    }
    // Every node is queued so gradients flowing into graph inputs are dropped too.
    let mut queue: VecDeque<usize> = (0..out.nodes.len()).collect();
    let mut queued = vec![true; out.nodes.len()];
    while let Some(i) = queue.pop_front() {
        queued[i] = false;
        let dead: Vec<BwdTensor> = out.nodes[i]
            .outputs
            .iter()
            .filter(|t| match t {
                BwdTensor::Contrib { of, .. } => !contribution_consumed(g, &out, of),
                _ => false,
            })
            .cloned()
            .collect();
        if dead.is_empty() {
            continue;
        }
        let fwd = out.nodes[i].forward.clone();
        for t in &dead {
            out.nodes[i].outputs.remove(t);
        }
        let op = op_of(&fwd)?;
        out.nodes[i].inputs = update_input(op, &out.nodes[i].outputs);
        if !queued[i] {
            queued[i] = true;
            queue.push_back(i);
        }
        // Consumers of this operator's outputs produce contributions that may now be orphaned.
        for (j, n) in out.nodes.iter().enumerate() {
            let feeds = n
                .outputs
                .iter()
                .any(|t| matches!(t, BwdTensor::Contrib { of, .. } if op.outputs.contains(of)));
            if feeds && !queued[j] {
                queued[j] = true;
                queue.push_back(j);
            }
        }
    }

    let mut consumed_fwd = BTreeSet::new();
    let mut consumed_mask = BTreeSet::new();
    for n in &out.nodes {
        for t in &n.inputs {
            match t {
                BwdTensor::Fwd { id } => {
                    consumed_fwd.insert(id.clone());
                }
                BwdTensor::Mask { id } => {
                    consumed_mask.insert(id.clone());
                }
                _ => {}
            }
        }
    }
    let order = g.topo_order().expect("validated by reverse_autodiff");
    let mut a = BTreeSet::new();
    let mut all_activations = BTreeSet::new();
    for &i in &order {
        for t in &g.operators[i].outputs {
            all_activations.insert(t.clone());
            if consumed_fwd.contains(t) {
                a.insert(t.clone());
            }
        }
    }
    let c: BTreeSet<TensorId> = consumed_mask.difference(&a).cloned().collect();
    let a_before_remat = a.clone();

    // Step 2: rematerialize cheap tensors whose producer inputs are all stored.
    let (base_tokens, hidden) = first_input_extents(g);
    let threshold_flops = options
        .remat_threshold_flops
        .unwrap_or(2.0 * base_tokens as f64 * hidden as f64 * hidden as f64);
    let mut r = BTreeSet::new();
    for &i in &order {
        let op = &g.operators[i];
        if op.kind == OpKind::Input {
            continue;
        }
        for t in &op.outputs {
            if !a.contains(t) {
                continue;
            }
            let inputs_stored = op.inputs.iter().all(|x| {
                a.contains(x) || g.tensor(x).is_some_and(|tt| tt.kind == ElementKind::Weight)
            });
            if inputs_stored && recompute_flops(g, op) < threshold_flops {
                a.remove(t);
                r.insert(t.clone());
            }
        }
    }

    let sizes = tensor_sizes(g);
    let steps = footprints(g, &out, &r);
    let baseline_steps = footprints(g, bwd, &BTreeSet::new());
    let (mut frozen, mut trainable) = (0, 0);
    for t in g.tensors.iter().filter(|t| t.kind == ElementKind::Weight) {
        if g.is_trainable_weight(&t.id) {
            trainable += t.elements();
        } else {
            frozen += t.elements();
        }
    }
    let plan = PruningPlan {
        a,
        r,
        c,
        a_before_remat,
        threshold_flops,
        base_tokens,
        sizes,
        frozen_weight_elements: frozen,
        trainable_weight_elements: trainable,
        all_activations,
        steps,
        baseline_steps,
    };
    Ok((out, plan))
}

fn first_input_extents(g: &Pcg) -> (usize, usize) {
    g.operators
        .iter()
        .find(|o| o.kind == OpKind::Input)
        .and_then(|o| g.tensor(&o.outputs[0]))
        .map(|t| {
            let e = t.extents();
            (e.first().copied().unwrap_or(1), e.get(1).copied().unwrap_or(1))
        })
        .unwrap_or((1, 1))
}

/// Analytic flops to recompute an operator's outputs.
pub fn recompute_flops(g: &Pcg, op: &OperatorNode) -> f64 {
    let ext = |t: &TensorId| g.tensor(t).map(|x| x.extents()).unwrap_or_default();
    match op.kind {
        OpKind::MatMul | OpKind::Embedding => {
            let (a, b) = (ext(&op.inputs[0]), ext(&op.inputs[1]));
            2.0 * a[0] as f64 * a[1] as f64 * b[1] as f64
        }
        OpKind::MatMulT => {
            let (a, b) = (ext(&op.inputs[0]), ext(&op.inputs[1]));
            2.0 * a[0] as f64 * a[1] as f64 * b[0] as f64
        }
        OpKind::Softmax => 5.0 * ext(&op.outputs[0]).iter().product::<usize>() as f64,
        _ => ext(&op.outputs[0]).iter().product::<usize>() as f64,
    }
}

/// Which tensors carry token dimensions, traced from the graph inputs.
fn tensor_sizes(g: &Pcg) -> BTreeMap<TensorId, TensorSize> {
    let mut token_dim: HashMap<TensorId, Vec<bool>> = HashMap::new();
    let order = g.topo_order().unwrap_or_default();
    for &i in &order {
        let op = &g.operators[i];
        let flags = |t: &TensorId, token_dim: &HashMap<TensorId, Vec<bool>>| {
            token_dim.get(t).cloned().unwrap_or_else(|| {
                vec![false; g.tensor(t).map_or(2, |x| x.dims.len())]
            })
        };
        let out_flags = match op.kind {
            OpKind::Input => {
                let n = g.tensor(&op.outputs[0]).map_or(2, |x| x.dims.len());
                let mut f = vec![false; n];
                if n > 0 {
                    f[0] = true;
                }
                f
            }
            OpKind::MatMul | OpKind::Embedding => {
                let (a, b) = (flags(&op.inputs[0], &token_dim), flags(&op.inputs[1], &token_dim));
                vec![a[0], b.get(1).copied().unwrap_or(false)]
            }
            OpKind::MatMulT => {
                let (a, b) = (flags(&op.inputs[0], &token_dim), flags(&op.inputs[1], &token_dim));
                vec![a[0], b[0]]
            }
            OpKind::Loss => vec![false, false],
            _ => flags(&op.inputs[0], &token_dim),
        };
        for t in &op.outputs {
            token_dim.insert(t.clone(), out_flags.clone());
        }
    }
    g.tensors
        .iter()
        .map(|t| {
            let td = token_dim.get(&t.id).map_or(0, |f| f.iter().filter(|&&x| x).count() as u32);
            (
                t.id.clone(),
                TensorSize {
                    elements: t.elements(),
                    token_dims: td,
                },
            )
        })
        .collect()
}

fn footprints(g: &Pcg, bwd: &BackwardGraph, r: &BTreeSet<TensorId>) -> Vec<StepFootprint> {
    bwd.surviving()
        .map(|n| {
            let mut step = StepFootprint {
                op: n.forward.clone(),
                ..StepFootprint::default()
            };
            for t in n.inputs.iter().chain(&n.outputs) {
                match t {
                    BwdTensor::Grad { id } => {
                        step.grads.insert(id.clone());
                    }
                    BwdTensor::Contrib { of, .. } => {
                        if g.tensor(of).is_some_and(|x| x.kind != ElementKind::Weight) {
                            step.grads.insert(of.clone());
                        }
                    }
                    BwdTensor::Fwd { id } if r.contains(id) => {
                        step.remat.insert(id.clone());
                    }
                    _ => {}
                }
            }
            step
        })
        .collect()
}

/// Bytes for `n` elements stored as one bit each.
pub fn bitmask_bytes(elements: usize) -> usize {
    elements.div_ceil(8)
}

/// Activation bytes under the four optimization stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStages {
    pub retain_all: f64,
    pub pruned: f64,
    pub pruned_remat: f64,
    pub pruned_remat_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub seqlen: usize,
    pub batch: usize,
    pub dtype_bytes: usize,
    pub window: Option<usize>,
    pub frozen_weights: f64,
    pub peft_weights: f64,
    pub peft_gradients: f64,
    pub optimizer_states: f64,
    pub memorized: f64,
    pub bitmasks: f64,
    pub rematerialization_workspace: f64,
    pub gradient_workspace: f64,
    pub stages: ActivationStages,
    /// `1 − pruned / retain_all`
    pub pruning_reduction: f64,
    /// `1 − pruned_remat_token / retain_all`
    pub total_reduction: f64,
}

impl MemoryReport {
    /// Category rows in the breakdown CSV layout.
    pub fn categories(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("frozen_weights", self.frozen_weights),
            ("peft_weights", self.peft_weights),
            ("peft_gradients", self.peft_gradients),
            ("optimizer_states", self.optimizer_states),
            ("memorized_activations", self.memorized),
            ("bitmasks", self.bitmasks),
            ("rematerialization_workspace", self.rematerialization_workspace),
            ("gradient_workspace", self.gradient_workspace),
        ]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "bytes", "percent"])?;
        let total: f64 = self.categories().iter().map(|(_, b)| b).sum();
        for (name, bytes) in self.categories() {
            // folds -0.0 into 0.0
            let bytes = bytes + 0.0;
            let pct = if total > 0.0 { 100.0 * bytes / total } else { 0.0 };
            w.write_record([name.to_owned(), format!("{bytes:.0}"), format!("{pct:.4}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii"))
    }
}

/// Byte accounting without token-level windows.
pub fn account_memory(plan: &PruningPlan, seqlen: usize, batch: usize, dtype_bytes: usize) -> MemoryReport {
    account_memory_windowed(plan, seqlen, batch, dtype_bytes, None)
}

/// Byte accounting where backward gradient buffers and recomputed tensors
/// cover only `window` tokens at a time.
pub fn account_memory_windowed(
    plan: &PruningPlan,
    seqlen: usize,
    batch: usize,
    dtype_bytes: usize,
    window: Option<usize>,
) -> MemoryReport {
    let base = plan.base_tokens.max(1) as f64;
    let bytes_at = |t: &TensorId, tokens: f64| -> f64 {
        plan.sizes.get(t).map_or(0.0, |s| {
            let scale = (tokens / base).powi(s.token_dims as i32);
            let b = if s.token_dims > 0 { batch as f64 } else { 1.0 };
            s.elements as f64 * scale * b * dtype_bytes as f64
        })
    };
    let full = seqlen as f64;
    let bytes = |t: &TensorId| bytes_at(t, full);
    let sum = |set: &BTreeSet<TensorId>| set.iter().map(bytes).sum::<f64>();
    let mask_bytes: f64 = plan
        .c
        .iter()
        .map(|t| {
            let elems = bytes(t) / dtype_bytes as f64;
            bitmask_bytes(elems.ceil() as usize) as f64
        })
        .sum();

    // Peak transient bytes over backward steps; gradient and recompute buffers
    // scale their token dimensions down to the window when one is given.
    let peak = |steps: &[StepFootprint], with_remat: bool, tokens: f64| -> f64 {
        steps
            .iter()
            .map(|s| {
                let g: f64 = s.grads.iter().map(|t| grad_bytes(plan, t, tokens, full, batch, dtype_bytes)).sum();
                let r: f64 = if with_remat {
                    s.remat.iter().map(|t| grad_bytes(plan, t, tokens, full, batch, dtype_bytes)).sum()
                } else {
                    0.0
                };
                g + r
            })
            .fold(0.0, f64::max)
    };
    let w = window.map_or(full, |w| (w as f64).min(full));
    let baseline_ws = peak(&plan.baseline_steps, false, full);
    let pruned_ws = peak(&plan.steps, false, full);
    let remat_ws = peak(&plan.steps, true, full);
    let token_ws = peak(&plan.steps, true, w);

    let retain_all = sum(&plan.all_activations) + baseline_ws;
    let pruned_memorized: BTreeSet<TensorId> = plan.a_before_remat.clone();
    let pruned = sum(&pruned_memorized) + mask_bytes + pruned_ws;
    let pruned_remat = sum(&plan.a) + mask_bytes + remat_ws;
    let pruned_remat_token = sum(&plan.a) + mask_bytes + token_ws;

    let trainable = plan.trainable_weight_elements as f64;
    MemoryReport {
        seqlen,
        batch,
        dtype_bytes,
        window,
        frozen_weights: plan.frozen_weight_elements as f64 * dtype_bytes as f64,
        peft_weights: trainable * dtype_bytes as f64,
        peft_gradients: trainable * dtype_bytes as f64,
        optimizer_states: 2.0 * trainable * 4.0,
        memorized: sum(&plan.a),
        bitmasks: mask_bytes,
        rematerialization_workspace: plan
            .steps
            .iter()
            .map(|s| s.remat.iter().map(|t| grad_bytes(plan, t, w, full, batch, dtype_bytes)).sum::<f64>())
            .fold(0.0, f64::max),
        gradient_workspace: token_ws,
        stages: ActivationStages {
            retain_all,
            pruned,
            pruned_remat,
            pruned_remat_token,
        },
        pruning_reduction: 1.0 - pruned / retain_all,
        total_reduction: 1.0 - pruned_remat_token / retain_all,
    }
}

fn grad_bytes(plan: &PruningPlan, t: &TensorId, tokens: f64, full: f64, batch: usize, dtype_bytes: usize) -> f64 {
    let base = plan.base_tokens.max(1) as f64;
    plan.sizes.get(t).map_or(0.0, |s| {
        // A window covers `tokens` query rows; extra token dims (attention
        // scores) still span the full sequence.
        let scale = match s.token_dims {
            0 => 1.0,
            k => (tokens / base) * (full / base).powi(k as i32 - 1),
        };
        let b = if s.token_dims > 0 { batch as f64 } else { 1.0 };
        s.elements as f64 * scale * b * dtype_bytes as f64
    })
}

/// Transformer block used for memory accounting: single-head attention and
/// a ReLU MLP, all frozen, with LoRA on the MLP down-projection. The block
/// output is the loss seed.
pub fn build_transformer_block(seqlen: usize, hidden: usize, ffn: usize, rank: usize) -> Pcg {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[seqlen, hidden]);
    let wq = b.weight("wq", &[hidden, hidden]);
    let wk = b.weight("wk", &[hidden, hidden]);
    let wv = b.weight("wv", &[hidden, hidden]);
    let wo = b.weight("wo", &[hidden, hidden]);
    let wup = b.weight("w_up", &[hidden, ffn]);
    let wdown = b.weight("w_down", &[ffn, hidden]);
    let la = b.weight("lora.A", &[ffn, rank]);
    let lb = b.weight("lora.B", &[rank, hidden]);
    let q = b.matmul(&x, &wq, "q", false);
    let k = b.matmul(&x, &wk, "k", false);
    let v = b.matmul(&x, &wv, "v", false);
    let s = b.op(OpKind::MatMulT, &[&q, &k], "scores", false);
    let p = b.op(OpKind::Softmax, &[&s], "probs", false);
    let ctx = b.matmul(&p, &v, "ctx", false);
    let o = b.matmul(&ctx, &wo, "attn_out", false);
    let h1 = b.op(OpKind::Add, &[&x, &o], "h1", false);
    let u = b.matmul(&h1, &wup, "up", false);
    let a = b.op(OpKind::ReLU, &[&u], "act", false);
    let d = b.matmul(&a, &wdown, "down", false);
    let xa = b.matmul(&a, &la, "lora.xa", true);
    let xb = b.matmul(&xa, &lb, "lora.out", true);
    let y = b.op(OpKind::Add, &[&d, &xb], "mlp_out", false);
    let out = b.op(OpKind::Add, &[&h1, &y], "block_out", false);
    b.set_loss(&out);
    b.finish()
}

/// Two-layer MLP with LoRA on the first linear and a quadratic loss.
pub fn build_mlp_lora(tokens: usize, hidden: usize, rank: usize) -> Pcg {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[tokens, hidden]);
    let w1 = b.weight("w1", &[hidden, hidden]);
    let w2 = b.weight("w2", &[hidden, hidden]);
    let a = b.weight("lora.A", &[hidden, rank]);
    let bb = b.weight("lora.B", &[rank, hidden]);
    let lin1 = b.matmul(&x, &w1, "lin1", false);
    let xa = b.matmul(&x, &a, "xa", true);
    let lb = b.matmul(&xa, &bb, "lora_out", true);
    let y1 = b.op(OpKind::Add, &[&lin1, &lb], "y1", false);
    let r = b.op(OpKind::ReLU, &[&y1], "r", false);
    let y2 = b.matmul(&r, &w2, "y2", false);
    b.op(OpKind::Loss, &[&y2], "loss", false);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> BTreeSet<TensorId> {
        xs.iter().map(|s| TensorId::new(*s)).collect()
    }

    #[test]
    fn frozen_matmul_rules() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let w = b.weight("w", &[3, 3]);
        let y = b.matmul(&x, &w, "y", false);
        b.set_loss(&y);
        let bwd = reverse_autodiff(&b.finish()).unwrap();
        assert_eq!(bwd.nodes.len(), 1);
        let n = &bwd.nodes[0];
        let op = OperatorNode::new(n.forward.clone(), OpKind::MatMul, vec![x.clone(), w.clone()], vec![y.clone()]);
        assert_eq!(contribution_needs(&op, 0).unwrap(), [BwdTensor::grad(&y), BwdTensor::fwd(&w)].into());
        assert_eq!(contribution_needs(&op, 1).unwrap(), [BwdTensor::grad(&y), BwdTensor::fwd(&x)].into());
    }

    #[test]
    fn relu_needs_only_a_mask() {
        let op = OperatorNode::new("r", OpKind::ReLU, vec!["x".into()], vec!["y".into()]);
        let need = contribution_needs(&op, 0).unwrap();
        assert!(need.contains(&BwdTensor::Mask { id: "x".into() }));
        assert!(!need.contains(&BwdTensor::Fwd { id: "x".into() }));
    }

    #[test]
    fn add_saves_nothing() {
        let op = OperatorNode::new("a", OpKind::Add, vec!["x".into(), "z".into()], vec!["y".into()]);
        for slot in 0..2 {
            let need = contribution_needs(&op, slot).unwrap();
            assert!(need.iter().all(|t| matches!(t, BwdTensor::Grad { .. })));
        }
    }

    #[test]
    fn frozen_mlp_keeps_nothing() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 4]);
        let w1 = b.weight("w1", &[4, 4]);
        let w2 = b.weight("w2", &[4, 4]);
        let h = b.matmul(&x, &w1, "h", false);
        let r = b.op(OpKind::ReLU, &[&h], "r", false);
        let y = b.matmul(&r, &w2, "y", false);
        b.op(OpKind::Loss, &[&y], "loss", false);
        let g = b.finish();
        let (pruned, plan) = prune(&g, &reverse_autodiff(&g).unwrap(), &PruneOptions::default()).unwrap();
        assert!(plan.a.is_empty() && plan.r.is_empty() && plan.c.is_empty());
        assert_eq!(pruned.surviving().count(), 0);
    }

    #[test]
    fn mlp_lora_sets() {
        let g = build_mlp_lora(4, 8, 2);
        let (_, plan) = prune(&g, &reverse_autodiff(&g).unwrap(), &PruneOptions::default()).unwrap();
        assert_eq!(plan.a_before_remat, ids(&["x", "xa", "y2"]));
        assert_eq!(plan.c, ids(&["y1"]));
        assert_eq!(plan.r, ids(&["xa"]));
        assert_eq!(plan.a, ids(&["x", "y2"]));
        assert!(!plan.a_before_remat.contains(&TensorId::new("r")));
    }

    #[test]
    fn prune_is_idempotent() {
        let g = build_mlp_lora(4, 8, 2);
        let opts = PruneOptions::default();
        let (once, plan1) = prune(&g, &reverse_autodiff(&g).unwrap(), &opts).unwrap();
        let (twice, plan2) = prune(&g, &once, &opts).unwrap();
        assert_eq!(once, twice);
        assert_eq!((plan1.a, plan1.r, plan1.c), (plan2.a, plan2.r, plan2.c));
    }

    #[test]
    fn relu_input_bitmask_size() {
        let elems = 1024 * 4096;
        assert_eq!(elems * 2, 8 * 1024 * 1024);
        assert_eq!(bitmask_bytes(elems), 512 * 1024);
    }

    #[test]
    fn missing_loss_is_rejected() {
        let mut b = GraphBuilder::new();
        b.input("x", &[2, 2]);
        assert!(reverse_autodiff(&b.finish()).is_err());
    }
}
