//! State inference for parallel operators and enumeration of bypass
//! parallelizations that stay compatible with a fixed backbone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcg::{
    BypassNetwork, Dim, DimState, ElementKind, OpId, OpKind, OperatorNode, ParallelTensor, Pcg, TensorId,
};
use crate::tensor::Matrix;

fn fail(op: &OperatorNode, reason: impl Into<String>) -> Error {
    Error::StateInference {
        op: op.id.to_string(),
        reason: reason.into(),
    }
}

/// Output states of `op` given the states of its inputs.
pub fn infer_states(op: &OperatorNode, inputs: &[Vec<DimState>]) -> Result<Vec<Vec<DimState>>> {
    let out = infer_single(op, inputs)?;
    Ok(vec![out; op.outputs.len().max(1)])
}

fn infer_single(op: &OperatorNode, inputs: &[Vec<DimState>]) -> Result<Vec<DimState>> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(fail(op, format!("expected {n} inputs, got {}", inputs.len())));
        }
        Ok(())
    };
    let no_pre_reduce = |s: &[DimState]| -> Result<()> {
        if s.iter().any(|d| d.is_pre_reduce()) {
            return Err(fail(op, format!("{} cannot consume a pre-reduce tensor", op.kind)));
        }
        Ok(())
    };
    let dim_of = |s: &[DimState]| -> Result<usize> {
        let d = op.dim.ok_or_else(|| fail(op, "parallelization operator without a dimension"))?;
        if d >= s.len() {
            return Err(fail(op, format!("dimension {d} out of range")));
        }
        Ok(d)
    };
    match op.kind {
        OpKind::Input => Err(fail(op, "inputs carry declared states")),
        OpKind::MatMul | OpKind::MatMulT | OpKind::Embedding => {
            need(2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            no_pre_reduce(a)?;
            no_pre_reduce(b)?;
            if a.len() != 2 || b.len() != 2 {
                return Err(fail(op, "matrix operands must be 2-D"));
            }
            let (bk, bn) = if op.kind == OpKind::MatMulT { (b[1], b[0]) } else { (b[0], b[1]) };
            let k = a[1];
            if k != bk {
                return Err(fail(op, format!("contracted dimension states disagree: {k} vs {bk}")));
            }
            match k {
                DimState::NonParallel => Ok(vec![a[0], bn]),
                DimState::Partitioned(d) => {
                    if bn != DimState::NonParallel {
                        return Err(fail(op, "split contraction needs a non-parallel output column"));
                    }
                    Ok(vec![a[0], DimState::PreReduce(d)])
                }
                other => Err(fail(op, format!("cannot contract over state {other}"))),
            }
        }
        OpKind::Add => {
            need(2)?;
            if inputs[0] != inputs[1] {
                return Err(fail(op, "operand states differ"));
            }
            Ok(inputs[0].clone())
        }
        OpKind::ElemMul => {
            need(2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            no_pre_reduce(a)?;
            no_pre_reduce(b)?;
            let row_vector = a.len() == 2 && b.len() == 2 && b[0] == DimState::NonParallel && b[1] == a[1];
            if a != b && !row_vector {
                return Err(fail(op, "operand states differ"));
            }
            Ok(a.clone())
        }
        OpKind::ReLU => {
            need(1)?;
            no_pre_reduce(&inputs[0])?;
            Ok(inputs[0].clone())
        }
        OpKind::Softmax => {
            need(1)?;
            let s = &inputs[0];
            no_pre_reduce(s)?;
            if s.last().is_some_and(|d| matches!(d, DimState::Partitioned(_))) {
                return Err(fail(op, "softmax needs whole rows"));
            }
            Ok(s.clone())
        }
        OpKind::Identity => {
            need(1)?;
            Ok(inputs[0].clone())
        }
        OpKind::Loss => {
            need(1)?;
            no_pre_reduce(&inputs[0])?;
            if inputs[0].iter().any(|d| matches!(d, DimState::Partitioned(_))) {
                return Err(fail(op, "loss needs a combined input"));
            }
            Ok(vec![DimState::NonParallel, DimState::NonParallel])
        }
        OpKind::Partition | OpKind::Replicate => {
            need(1)?;
            let s = &inputs[0];
            let d = dim_of(s)?;
            let degree = op.degree.ok_or_else(|| fail(op, "missing degree"))?;
            if degree < 2 {
                return Err(fail(op, "degree must be >= 2"));
            }
            if s[d] != DimState::NonParallel {
                return Err(fail(op, format!("{} expects a non-parallel dimension, found {}", op.kind, s[d])));
            }
            let mut out = s.clone();
            out[d] = if op.kind == OpKind::Partition {
                DimState::Partitioned(degree)
            } else {
                DimState::Replicated(degree)
            };
            Ok(out)
        }
        OpKind::Combine => {
            need(1)?;
            let s = &inputs[0];
            let d = dim_of(s)?;
            if !matches!(s[d], DimState::Partitioned(_)) {
                return Err(fail(op, format!("Combine expects a partitioned dimension, found {}", s[d])));
            }
            let mut out = s.clone();
            out[d] = DimState::NonParallel;
            Ok(out)
        }
        OpKind::Reduce => {
            need(1)?;
            let s = &inputs[0];
            let d = dim_of(s)?;
            if !s[d].is_pre_reduce() {
                return Err(fail(op, format!("Reduce expects a pre-reduce dimension, found {}", s[d])));
            }
            let mut out = s.clone();
            out[d] = DimState::NonParallel;
            Ok(out)
        }
    }
}

/// Backbone states at the two attachment points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub attach_in: Vec<DimState>,
    pub attach_out: Vec<DimState>,
}

impl Boundary {
    pub fn from_backbone(g: &Pcg, bypass: &BypassNetwork) -> Result<Self> {
        let get = |t: &TensorId| {
            g.tensor(t)
                .map(ParallelTensor::states)
                .ok_or_else(|| Error::InvalidConfiguration(format!("unknown attachment tensor {t}")))
        };
        Ok(Self {
            attach_in: get(&bypass.attach_in)?,
            attach_out: get(&bypass.attach_out)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InsertedOp {
    /// Edge index: 0 is attach-in → first operator, the last edge feeds the add.
    pub edge: usize,
    pub kind: OpKind,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePcg {
    pub bypass: BypassNetwork,
    pub inserted: Vec<InsertedOp>,
    pub attach_in_states: Vec<DimState>,
    pub attach_out_states: Vec<DimState>,
    pub degree: u32,
    /// Filled in by [`price`].
    pub cost_ms: f64,
}

impl CandidatePcg {
    pub fn comm_ops(&self) -> usize {
        self.inserted.iter().filter(|o| o.kind.is_communication()).count()
    }

    /// Standalone graph: attach-in source, the bypass, and the closing add.
    pub fn as_pcg(&self, attach_in_extents: &[usize], attach_out_extents: &[usize]) -> Pcg {
        let mut g = Pcg::default();
        let src = OpId::new("attach_in.src");
        g.tensors.push(boundary_tensor(&self.bypass.attach_in, attach_in_extents, &self.attach_in_states, &src));
        g.operators.push(OperatorNode::new(src, OpKind::Input, vec![], vec![self.bypass.attach_in.clone()]));
        let base = TensorId(format!("{}.base", self.bypass.attach_out));
        let base_src = OpId::new("attach_out.src");
        g.tensors.push(boundary_tensor(&base, attach_out_extents, &self.attach_out_states, &base_src));
        g.operators.push(OperatorNode::new(base_src, OpKind::Input, vec![], vec![base.clone()]));
        g.operators.extend(self.bypass.operators.iter().cloned());
        g.tensors.extend(self.bypass.tensors.iter().cloned());
        let add = OpId::new("attach_out.add");
        g.tensors.push(boundary_tensor(&self.bypass.attach_out, attach_out_extents, &self.attach_out_states, &add));
        g.operators.push(OperatorNode::new(
            add,
            OpKind::Add,
            vec![base, self.bypass.output.clone()],
            vec![self.bypass.attach_out.clone()],
        ));
        g
    }

    pub fn summary(&self) -> String {
        if self.inserted.is_empty() {
            return "no inserted operators".to_owned();
        }
        let parts: Vec<String> = self
            .inserted
            .iter()
            .map(|o| format!("{}@e{}d{}", o.kind, o.edge, o.dim))
            .collect();
        parts.join(" ")
    }
}

fn boundary_tensor(id: &TensorId, extents: &[usize], states: &[DimState], producer: &OpId) -> ParallelTensor {
    ParallelTensor {
        id: id.clone(),
        dims: extents.iter().zip(states).map(|(&e, &s)| Dim::with_state(e, s)).collect(),
        producer: Some(producer.clone()),
        kind: ElementKind::Activation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationOptions {
    /// Maximum parallelization operators inserted on each bypass edge.
    pub budget_per_edge: usize,
}

impl Default for EnumerationOptions {
    fn default() -> Self {
        Self { budget_per_edge: 1 }
    }
}

/// Chain view of a bypass: activation input of each operator plus weights.
struct Chain<'a> {
    bypass: &'a BypassNetwork,
    /// Index of the chain activation among each operator's inputs.
    act_slot: Vec<usize>,
}

impl<'a> Chain<'a> {
    fn new(bypass: &'a BypassNetwork) -> Result<Self> {
        let mut act_slot = Vec::new();
        let mut cur = bypass.attach_in.clone();
        for op in &bypass.operators {
            let slot = op
                .inputs
                .iter()
                .position(|t| t == &cur)
                .ok_or_else(|| Error::InvalidConfiguration(format!("bypass {} is not a chain", bypass.name)))?;
            if op.outputs.len() != 1 {
                return Err(Error::InvalidConfiguration(format!("{} must have one output", op.id)));
            }
            act_slot.push(slot);
            cur = op.outputs[0].clone();
        }
        if cur != bypass.output {
            return Err(Error::InvalidConfiguration(format!("bypass {} chain does not end at its output", bypass.name)));
        }
        Ok(Self { bypass, act_slot })
    }

    fn edges(&self) -> usize {
        self.bypass.operators.len() + 1
    }
}

/// Weight layout implied by the activation: contracted dims mirror the
/// activation, output dims stay non-parallel.
fn weight_states(kind: OpKind, act: &[DimState], rank: usize) -> Vec<DimState> {
    let np = DimState::NonParallel;
    match kind {
        OpKind::MatMul | OpKind::Embedding if act.len() == 2 => vec![act[1], np],
        OpKind::MatMulT if act.len() == 2 => vec![np, act[1]],
        OpKind::ElemMul if act.len() == 2 => vec![np, act[1]],
        _ => vec![np; rank],
    }
}

fn total_degree(states: &[DimState]) -> u32 {
    states.iter().map(|s| s.degree()).product()
}

fn apply_parallel(kind: OpKind, dim: usize, degree: u32, s: &[DimState]) -> Option<Vec<DimState>> {
    let mut node = OperatorNode::new("probe", kind, vec![], vec![]);
    node.dim = Some(dim);
    node.degree = matches!(kind, OpKind::Partition | OpKind::Replicate).then_some(degree);
    infer_single(&node, &[s.to_vec()]).ok()
}

/// All parallel-op sequences of length ≤ budget applicable to `s`, paired
/// with the resulting states.
fn edge_options(s: &[DimState], extents: &[usize], degree: u32, budget: usize) -> Vec<(Vec<(OpKind, usize)>, Vec<DimState>)> {
    let mut out = vec![(Vec::new(), s.to_vec())];
    if degree < 2 {
        return out;
    }
    let mut frontier = vec![(Vec::<(OpKind, usize)>::new(), s.to_vec())];
    for _ in 0..budget {
        let mut next = Vec::new();
        for (seq, st) in &frontier {
            for kind in [OpKind::Combine, OpKind::Partition, OpKind::Reduce, OpKind::Replicate] {
                for dim in 0..st.len() {
                    if let Some(&(pk, pd)) = seq.last() {
                        let undo = pd == dim
                            && matches!((pk, kind), (OpKind::Partition, OpKind::Combine) | (OpKind::Combine, OpKind::Partition));
                        if undo {
                            continue;
                        }
                    }
                    if kind == OpKind::Partition && !extents[dim].is_multiple_of(degree as usize) {
                        continue;
                    }
                    let Some(ns) = apply_parallel(kind, dim, degree, st) else {
                        continue;
                    };
                    if total_degree(&ns) > degree {
                        continue;
                    }
                    let mut nseq = seq.clone();
                    nseq.push((kind, dim));
                    next.push((nseq, ns));
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Enumerates every bypass parallelization reachable within the insertion
/// budget whose boundary states match the backbone. Sorted by inserted-op
/// sequence.
pub fn enumerate_candidates(
    bypass: &BypassNetwork,
    boundary: &Boundary,
    degree: u32,
    options: &EnumerationOptions,
) -> Result<Vec<CandidatePcg>> {
    if degree == 0 {
        return Err(Error::InvalidConfiguration("degree must be >= 1".into()));
    }
    let chain = Chain::new(bypass)?;
    let in_extents = first_input_extents(bypass, &chain);
    let mut found = Vec::new();
    let mut path = Vec::new();
    search(
        &chain,
        0,
        boundary.attach_in.clone(),
        in_extents,
        boundary,
        degree,
        options.budget_per_edge,
        &mut path,
        &mut found,
    );

    let mut candidates: Vec<CandidatePcg> = found
        .into_iter()
        .map(|p| build_candidate(&chain, boundary, degree, &p))
        .collect();
    candidates.sort_by(|a, b| a.inserted.cmp(&b.inserted));
    candidates.dedup_by(|a, b| a.inserted == b.inserted);
    Ok(candidates)
}

fn first_input_extents(bypass: &BypassNetwork, chain: &Chain<'_>) -> Vec<usize> {
    let op = &bypass.operators[0];
    let out = bypass.tensor(&op.outputs[0]).map(ParallelTensor::extents).unwrap_or_default();
    let weight = op
        .inputs
        .iter()
        .enumerate()
        .find(|(i, _)| *i != chain.act_slot[0])
        .and_then(|(_, t)| bypass.tensor(t))
        .map(ParallelTensor::extents);
    match (op.kind, weight) {
        (OpKind::MatMul | OpKind::Embedding, Some(w)) => vec![out[0], w[0]],
        (OpKind::MatMulT, Some(w)) => vec![out[0], w[1]],
        _ => out,
    }
}

#[allow(clippy::too_many_arguments)]
fn search(
    chain: &Chain<'_>,
    edge: usize,
    states: Vec<DimState>,
    extents: Vec<usize>,
    boundary: &Boundary,
    degree: u32,
    budget: usize,
    path: &mut Vec<Vec<(OpKind, usize)>>,
    found: &mut Vec<Vec<Vec<(OpKind, usize)>>>,
) {
    for (seq, st) in edge_options(&states, &extents, degree, budget) {
        path.push(seq);
        if edge + 1 == chain.edges() {
            if st == boundary.attach_out {
                found.push(path.clone());
            }
        } else {
            let op = &chain.bypass.operators[edge];
            let slot = chain.act_slot[edge];
            let mut ins = Vec::new();
            for (i, t) in op.inputs.iter().enumerate() {
                if i == slot {
                    ins.push(st.clone());
                } else {
                    let rank = chain.bypass.tensor(t).map_or(2, |x| x.dims.len());
                    ins.push(weight_states(op.kind, &st, rank));
                }
            }
            let ok_weights = ins.iter().all(|s| total_degree(s) <= degree);
            if let (true, Ok(out)) = (ok_weights, infer_single(op, &ins)) {
                if total_degree(&out) <= degree {
                    let out_extents = chain
                        .bypass
                        .tensor(&op.outputs[0])
                        .map(ParallelTensor::extents)
                        .unwrap_or_else(|| extents.clone());
                    search(chain, edge + 1, out, out_extents, boundary, degree, budget, path, found);
                }
            }
        }
        path.pop();
    }
}

fn build_candidate(chain: &Chain<'_>, boundary: &Boundary, degree: u32, path: &[Vec<(OpKind, usize)>]) -> CandidatePcg {
    let src = chain.bypass;
    let mut b = src.clone();
    b.operators.clear();
    b.tensors.clear();
    let mut inserted = Vec::new();
    let mut cur_id = src.attach_in.clone();
    let mut cur_states = boundary.attach_in.clone();
    let mut cur_extents = first_input_extents(src, chain);

    for (edge, seq) in path.iter().enumerate() {
        for (j, &(kind, dim)) in seq.iter().enumerate() {
            inserted.push(InsertedOp { edge, kind, dim });
            let op_id = OpId(format!("{}.e{edge}.{j}.{}", src.name, kind.to_string().to_lowercase()));
            let out_id = TensorId(format!("{}.e{edge}.{j}", src.name));
            let mut node = OperatorNode::new(op_id.clone(), kind, vec![cur_id.clone()], vec![out_id.clone()]);
            node.dim = Some(dim);
            node.degree = matches!(kind, OpKind::Partition | OpKind::Replicate).then_some(degree);
            cur_states = infer_single(&node, &[cur_states.clone()]).expect("enumerated transition");
            b.tensors.push(boundary_tensor(&out_id, &cur_extents, &cur_states, &op_id));
            b.operators.push(node);
            cur_id = out_id;
        }
        if edge < src.operators.len() {
            let mut op = src.operators[edge].clone();
            let slot = chain.act_slot[edge];
            let mut ins = Vec::new();
            for (i, t) in op.inputs.clone().iter().enumerate() {
                if i == slot {
                    op.inputs[i] = cur_id.clone();
                    ins.push(cur_states.clone());
                } else {
                    let mut w = src.tensor(t).expect("bypass weight").clone();
                    let ws = weight_states(op.kind, &cur_states, w.dims.len());
                    for (d, s) in w.dims.iter_mut().zip(&ws) {
                        d.state = *s;
                    }
                    ins.push(ws);
                    b.tensors.push(w);
                }
            }
            cur_states = infer_single(&op, &ins).expect("enumerated operator");
            let mut out = src.tensor(&op.outputs[0]).expect("bypass output").clone();
            for (d, s) in out.dims.iter_mut().zip(&cur_states) {
                d.state = *s;
            }
            cur_extents = out.extents();
            cur_id = out.id.clone();
            b.tensors.push(out);
            b.operators.push(op);
        }
    }
    b.output = cur_id;
    CandidatePcg {
        bypass: b,
        inserted,
        attach_in_states: boundary.attach_in.clone(),
        attach_out_states: boundary.attach_out.clone(),
        degree,
        cost_ms: 0.0,
    }
}

/// Analytic device and link model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub degree: u32,
    /// Device throughput in FLOP per millisecond.
    pub flops_per_ms: f64,
    /// Link bandwidth in bytes per millisecond.
    pub bytes_per_ms: f64,
    #[serde(default = "default_elem_bytes")]
    pub bytes_per_element: f64,
}

fn default_elem_bytes() -> f64 {
    2.0
}

impl MachineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.flops_per_ms <= 0.0 || self.bytes_per_ms <= 0.0 || self.bytes_per_element <= 0.0 {
            return Err(Error::InvalidConfiguration("machine spec values must be positive".into()));
        }
        Ok(())
    }

    /// Per-device time: local flops over throughput plus collective bytes over bandwidth.
    pub fn cost_ms(&self, c: &CandidatePcg) -> f64 {
        let d = f64::from(c.degree.max(1));
        let local = |t: &ParallelTensor| -> f64 {
            t.dims
                .iter()
                .map(|x| match x.state {
                    DimState::Partitioned(k) => x.extent as f64 / f64::from(k),
                    _ => x.extent as f64,
                })
                .product()
        };
        let local_dims = |t: &ParallelTensor| -> Vec<f64> {
            t.dims
                .iter()
                .map(|x| match x.state {
                    DimState::Partitioned(k) => x.extent as f64 / f64::from(k),
                    _ => x.extent as f64,
                })
                .collect()
        };
        let mut total = 0.0;
        for op in &c.bypass.operators {
            let ins: Vec<&ParallelTensor> = op.inputs.iter().filter_map(|t| c.bypass.tensor(t)).collect();
            let full_bytes = |t: &ParallelTensor| t.elements() as f64 * self.bytes_per_element;
            match op.kind {
                OpKind::MatMul | OpKind::Embedding | OpKind::MatMulT => {
                    let a = ins.first().map(|t| local_dims(t)).unwrap_or_default();
                    let out = c.bypass.tensor(&op.outputs[0]).map(local_dims).unwrap_or_default();
                    if a.len() == 2 && out.len() == 2 {
                        total += 2.0 * a[0] * a[1] * out[1] / self.flops_per_ms;
                    }
                }
                OpKind::Combine => {
                    if let Some(t) = ins.first() {
                        total += full_bytes(t) * (d - 1.0) / d / self.bytes_per_ms;
                    }
                }
                OpKind::Reduce => {
                    if let Some(t) = ins.first() {
                        total += 2.0 * full_bytes(t) * (d - 1.0) / d / self.bytes_per_ms;
                    }
                }
                OpKind::Replicate => {
                    if let Some(t) = ins.first() {
                        total += full_bytes(t) * (d - 1.0) / d / self.bytes_per_ms;
                    }
                }
                OpKind::Partition | OpKind::Input | OpKind::Identity => {}
                _ => {
                    if let Some(t) = ins.first() {
                        total += local(t) / self.flops_per_ms;
                    }
                }
            }
        }
        total
    }
}

/// Fills `cost_ms` on every candidate.
pub fn price(candidates: &mut [CandidatePcg], machine: &MachineSpec) {
    for c in candidates.iter_mut() {
        c.cost_ms = machine.cost_ms(c);
    }
}

/// Argmin of `cost`; ties go to fewer communication ops, then earlier position.
pub fn select_best(candidates: &[CandidatePcg], cost: impl Fn(&CandidatePcg) -> f64) -> Result<&CandidatePcg> {
    let mut best: Option<(f64, usize, &CandidatePcg)> = None;
    for c in candidates {
        let key = (cost(c), c.comm_ops());
        let better = match &best {
            None => true,
            Some((bc, bn, _)) => key.0 < *bc || (key.0 == *bc && key.1 < *bn),
        };
        if better {
            best = Some((key.0, key.1, c));
        }
    }
    best.map(|(_, _, c)| c).ok_or(Error::NoStrategy)
}

/// A tensor as seen by `degree` devices.
#[derive(Debug, Clone)]
struct Sharded {
    states: Vec<DimState>,
    shards: Vec<Matrix>,
}

fn parallel_dim(states: &[DimState]) -> Option<(usize, DimState)> {
    states
        .iter()
        .enumerate()
        .find(|(_, s)| **s != DimState::NonParallel)
        .map(|(i, s)| (i, *s))
}

fn split(full: &Matrix, dim: usize, degree: usize, p: usize) -> Matrix {
    if dim == 0 {
        let chunk = full.rows() / degree;
        full.slice_rows(p * chunk, (p + 1) * chunk)
    } else {
        let chunk = full.cols() / degree;
        full.slice_cols(p * chunk, (p + 1) * chunk)
    }
}

fn shard(full: &Matrix, states: &[DimState], degree: usize) -> Sharded {
    let shards = (0..degree)
        .map(|p| match parallel_dim(states) {
            Some((d, DimState::Partitioned(_))) => split(full, d, degree, p),
            Some((_, DimState::PreReduce(_))) => {
                if p == 0 {
                    full.clone()
                } else {
                    Matrix::zeros(full.rows(), full.cols())
                }
            }
            _ => full.clone(),
        })
        .collect();
    Sharded {
        states: states.to_vec(),
        shards,
    }
}

/// Runs a candidate on `degree` simulated devices and returns the
/// bypass output in its logical (combined) form.
pub fn evaluate_sharded(c: &CandidatePcg, x: &Matrix, weights: &HashMap<TensorId, Matrix>) -> Result<Matrix> {
    let degree = c.degree as usize;
    let mut env: HashMap<TensorId, Sharded> = HashMap::new();
    env.insert(c.bypass.attach_in.clone(), shard(x, &c.attach_in_states, degree));
    for op in &c.bypass.operators {
        let get = |t: &TensorId, env: &HashMap<TensorId, Sharded>| -> Result<Sharded> {
            if let Some(s) = env.get(t) {
                return Ok(s.clone());
            }
            let w = weights
                .get(t)
                .ok_or_else(|| Error::InvalidConfiguration(format!("missing value for {t}")))?;
            let st = c.bypass.tensor(t).map(ParallelTensor::states).unwrap_or_default();
            Ok(shard(w, &st, degree))
        };
        let ins: Vec<Sharded> = op.inputs.iter().map(|t| get(t, &env)).collect::<Result<_>>()?;
        let states = infer_single(op, &ins.iter().map(|s| s.states.clone()).collect::<Vec<_>>())?;
        let shards: Vec<Matrix> = match op.kind {
            OpKind::Partition => {
                let d = op.dim.expect("dim");
                (0..degree).map(|p| split(&ins[0].shards[p], d, degree, p)).collect()
            }
            OpKind::Combine => {
                let d = op.dim.expect("dim");
                let full = if d == 0 {
                    Matrix::vstack(&ins[0].shards)
                } else {
                    Matrix::hstack(&ins[0].shards)
                };
                vec![full; degree]
            }
            OpKind::Reduce => {
                let mut acc = ins[0].shards[0].clone();
                for s in &ins[0].shards[1..] {
                    acc.add_assign(s);
                }
                vec![acc; degree]
            }
            OpKind::Replicate | OpKind::Identity => ins[0].shards.clone(),
            _ => (0..degree)
                .map(|p| {
                    let local: Vec<&Matrix> = ins.iter().map(|s| &s.shards[p]).collect();
                    local_op(op.kind, &local)
                })
                .collect::<Result<_>>()?,
        };
        env.insert(op.outputs[0].clone(), Sharded { states, shards });
    }
    let out = env
        .remove(&c.bypass.output)
        .ok_or_else(|| Error::Invariant("candidate produced no output".into()))?;
    Ok(gather(&out))
}

fn gather(s: &Sharded) -> Matrix {
    match parallel_dim(&s.states) {
        Some((0, DimState::Partitioned(_))) => Matrix::vstack(&s.shards),
        Some((_, DimState::Partitioned(_))) => Matrix::hstack(&s.shards),
        Some((_, DimState::PreReduce(_))) => {
            let mut acc = s.shards[0].clone();
            for m in &s.shards[1..] {
                acc.add_assign(m);
            }
            acc
        }
        _ => s.shards[0].clone(),
    }
}

fn local_op(kind: OpKind, ins: &[&Matrix]) -> Result<Matrix> {
    Ok(match kind {
        OpKind::MatMul | OpKind::Embedding => ins[0].matmul(ins[1]),
        OpKind::MatMulT => ins[0].matmul_t(ins[1]),
        OpKind::Add => ins[0].add(ins[1]),
        OpKind::ElemMul => {
            if ins[1].rows() == 1 && ins[0].rows() != 1 {
                ins[0].mul_row_vector(ins[1])
            } else {
                ins[0].hadamard(ins[1])
            }
        }
        OpKind::ReLU => ins[0].map(|v| v.max(0.0)),
        other => return Err(Error::InvalidConfiguration(format!("{other} not supported in sharded evaluation"))),
    })
}

/// Single-device evaluation of the unparallelized bypass chain.
pub fn evaluate_reference(bypass: &BypassNetwork, x: &Matrix, weights: &HashMap<TensorId, Matrix>) -> Result<Matrix> {
    let mut env: HashMap<TensorId, Matrix> = HashMap::new();
    env.insert(bypass.attach_in.clone(), x.clone());
    for op in &bypass.operators {
        let ins: Vec<&Matrix> = op
            .inputs
            .iter()
            .map(|t| {
                env.get(t)
                    .or_else(|| weights.get(t))
                    .ok_or_else(|| Error::InvalidConfiguration(format!("missing value for {t}")))
            })
            .collect::<Result<_>>()?;
        let out = local_op(op.kind, &ins)?;
        env.insert(op.outputs[0].clone(), out);
    }
    env.remove(&bypass.output)
        .ok_or_else(|| Error::Invariant("bypass produced no output".into()))
}
