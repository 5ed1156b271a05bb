//! Parallel computation graphs.
//!
//! A [`Pcg`] is a DAG of [`OperatorNode`]s connected through
//! [`ParallelTensor`]s. Every tensor dimension carries a [`DimState`]
//! describing how it is laid out across devices. A [`PeftModel`] pairs a
//! frozen backbone graph with additive [`BypassNetwork`]s.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallelize::infer_states;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        #[derive(Default)]
pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(TensorId);
string_id!(OpId);


/// Layout of one tensor dimension across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimState {
    /// `-`: every device sees the whole dimension once.
    NonParallel,
    /// `|`: split into `degree` disjoint slices.
    Partitioned(u32),
    /// `=`: copied to `degree` devices.
    Replicated(u32),
    /// `+`: `degree` partial sums awaiting a reduction.
    PreReduce(u32),
}

impl DimState {
    pub fn new(symbol: &str, degree: u32) -> Result<Self> {
        let state = match symbol {
            "-" => {
                if degree != 1 {
                    return Err(Error::InvalidConfiguration(format!(
                        "non-parallel dimension must have degree 1, got {degree}"
                    )));
                }
                return Ok(DimState::NonParallel);
            }
            "|" => DimState::Partitioned(degree),
            "=" => DimState::Replicated(degree),
            "+" => DimState::PreReduce(degree),
            other => {
                return Err(Error::Parse(format!("unknown dimension state {other:?}")));
            }
        };
        if degree < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "parallel state {symbol} needs degree >= 2, got {degree}"
            )));
        }
        Ok(state)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            DimState::NonParallel => "-",
            DimState::Partitioned(_) => "|",
            DimState::Replicated(_) => "=",
            DimState::PreReduce(_) => "+",
        }
    }

    pub fn degree(self) -> u32 {
        match self {
            DimState::NonParallel => 1,
            DimState::Partitioned(d) | DimState::Replicated(d) | DimState::PreReduce(d) => d,
        }
    }

    pub fn is_pre_reduce(self) -> bool {
        matches!(self, DimState::PreReduce(_))
    }
}

impl fmt::Display for DimState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimState::NonParallel => f.write_str("-"),
            s => write!(f, "{}{}", s.symbol(), s.degree()),
        }
    }
}

impl Serialize for DimState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DimState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (sym, deg) = s.split_at(1.min(s.len()));
        let degree = if deg.is_empty() {
            1
        } else {
            deg.parse().map_err(serde::de::Error::custom)?
        };
        DimState::new(sym, degree).map_err(serde::de::Error::custom)
    }
}

/// One dimension of a parallel tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dim {
    pub extent: usize,
    pub state: DimState,
}

impl Dim {
    pub fn new(extent: usize) -> Self {
        Self {
            extent,
            state: DimState::NonParallel,
        }
    }

    pub fn with_state(extent: usize, state: DimState) -> Self {
        Self { extent, state }
    }
}

#[derive(Serialize, Deserialize)]
struct DimRepr {
    extent: usize,
    state: String,
    degree: u32,
}

impl Serialize for Dim {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DimRepr {
            extent: self.extent,
            state: self.state.symbol().to_owned(),
            degree: self.state.degree(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dim {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = DimRepr::deserialize(d)?;
        if repr.extent == 0 {
            return Err(serde::de::Error::custom("dimension extent must be positive"));
        }
        let state = DimState::new(&repr.state, repr.degree).map_err(serde::de::Error::custom)?;
        Ok(Dim {
            extent: repr.extent,
            state,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Activation,
    Weight,
    Gradient,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelTensor {
    pub id: TensorId,
    pub dims: Vec<Dim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<OpId>,
    pub kind: ElementKind,
}

impl ParallelTensor {
    pub fn extents(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.extent).collect()
    }

    pub fn states(&self) -> Vec<DimState> {
        self.dims.iter().map(|d| d.state).collect()
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().map(|d| d.extent).product()
    }
}

/// Operator vocabulary. Anything outside this set is rejected when parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    /// Graph source producing a model input.
    Input,
    /// `[m, k] · [k, n]`
    MatMul,
    /// `[m, k] · [n, k]ᵀ`
    MatMulT,
    Add,
    /// Elementwise product; the right operand may be a `[1, n]` row vector.
    ElemMul,
    ReLU,
    /// Row-wise softmax.
    Softmax,
    /// Dense lookup table applied as `[m, v] · [v, n]`.
    Embedding,
    Identity,
    /// `0.5 · Σ x²`
    Loss,
    Partition,
    Combine,
    Replicate,
    Reduce,
}

impl OpKind {
    pub fn is_parallel(self) -> bool {
        matches!(
            self,
            OpKind::Partition | OpKind::Combine | OpKind::Replicate | OpKind::Reduce
        )
    }

    /// Combine, Replicate and Reduce move data between devices; Partition is a local slice.
    pub fn is_communication(self) -> bool {
        matches!(self, OpKind::Combine | OpKind::Replicate | OpKind::Reduce)
    }

    pub fn is_compute(self) -> bool {
        !self.is_parallel() && !matches!(self, OpKind::Input | OpKind::Identity)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: OpId,
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    #[serde(default)]
    pub trainable: bool,
    /// Dimension acted on by a parallelization operator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Degree introduced by Partition / Replicate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<u32>,
}

impl OperatorNode {
    pub fn new(id: impl Into<OpId>, kind: OpKind, inputs: Vec<TensorId>, outputs: Vec<TensorId>) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs,
            outputs,
            trainable: false,
            dim: None,
            degree: None,
        }
    }
}

/// A parallel computation graph.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pcg {
    pub operators: Vec<OperatorNode>,
    pub tensors: Vec<ParallelTensor>,
    /// Tensor whose gradient seeds the backward pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<TensorId>,
}

impl Pcg {
    pub fn tensor(&self, id: &TensorId) -> Option<&ParallelTensor> {
        self.tensors.iter().find(|t| &t.id == id)
    }

    pub fn tensor_mut(&mut self, id: &TensorId) -> Option<&mut ParallelTensor> {
        self.tensors.iter_mut().find(|t| &t.id == id)
    }

    pub fn op(&self, id: &OpId) -> Option<&OperatorNode> {
        self.operators.iter().find(|o| &o.id == id)
    }

    pub fn producer_of(&self, t: &TensorId) -> Option<&OperatorNode> {
        self.operators.iter().find(|o| o.outputs.contains(t))
    }

    pub fn consumers_of<'a>(&'a self, t: &'a TensorId) -> impl Iterator<Item = &'a OperatorNode> + 'a {
        self.operators.iter().filter(move |o| o.inputs.contains(t))
    }

    /// `(n1, n2)` is an edge iff some output of `n1` is an input of `n2`.
    pub fn edges(&self) -> BTreeSet<(OpId, OpId)> {
        let mut producers: HashMap<&TensorId, &OpId> = HashMap::new();
        for op in &self.operators {
            for t in &op.outputs {
                producers.insert(t, &op.id);
            }
        }
        let mut edges = BTreeSet::new();
        for op in &self.operators {
            for t in &op.inputs {
                if let Some(p) = producers.get(t) {
                    edges.insert(((*p).clone(), op.id.clone()));
                }
            }
        }
        edges
    }

    /// Kahn topological order; `None` when the graph has a cycle.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let index: HashMap<&OpId, usize> = self
            .operators
            .iter()
            .enumerate()
            .map(|(i, o)| (&o.id, i))
            .collect();
        let mut indeg = vec![0usize; self.operators.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.operators.len()];
        for (a, b) in self.edges() {
            let (ia, ib) = (index[&a], index[&b]);
            succ[ia].push(ib);
            indeg[ib] += 1;
        }
        let mut queue: VecDeque<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(indeg.len());
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        (order.len() == self.operators.len()).then_some(order)
    }

    /// A weight is trainable when any operator consuming it is flagged trainable.
    pub fn is_trainable_weight(&self, t: &TensorId) -> bool {
        self.tensor(t).is_some_and(|x| x.kind == ElementKind::Weight)
            && self.consumers_of(t).any(|o| o.trainable)
    }

    pub fn trainable_weights(&self) -> Vec<TensorId> {
        self.tensors
            .iter()
            .filter(|t| self.is_trainable_weight(&t.id))
            .map(|t| t.id.clone())
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.trainable_weights()
            .iter()
            .map(|t| self.tensor(t).map_or(0, ParallelTensor::elements))
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("graph serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }

    fn fresh_tensor_id(&self, base: &str) -> TensorId {
        let mut candidate = base.to_owned();
        let mut n = 0;
        while self.tensor(&TensorId::new(candidate.clone())).is_some() {
            n += 1;
            candidate = format!("{base}.{n}");
        }
        TensorId(candidate)
    }
}

/// A structural problem found by [`validate_pcg`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<OpId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.op {
            Some(op) => write!(f, "{op}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Operators that may consume a pre-reduce tensor: the reduction itself and
/// the linear passthroughs used to merge partial sums.
fn accepts_pre_reduce(kind: OpKind) -> bool {
    matches!(kind, OpKind::Reduce | OpKind::Add | OpKind::Identity)
}

/// Lists every violation; an empty list means the graph is well formed.
pub fn validate_pcg(g: &Pcg) -> Vec<Violation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Violation>, op: Option<&OpId>, message: String| {
        out.push(Violation {
            op: op.cloned(),
            message,
        })
    };

    let mut seen = BTreeSet::new();
    for t in &g.tensors {
        if !seen.insert(&t.id) {
            push(&mut out, None, format!("duplicate tensor id {}", t.id));
        }
        if t.dims.iter().filter(|d| d.state.is_pre_reduce()).count() > 1 {
            push(&mut out, None, format!("tensor {} has more than one pre-reduce dimension", t.id));
        }
    }
    for op in &g.operators {
        for t in op.inputs.iter().chain(&op.outputs) {
            if g.tensor(t).is_none() {
                push(&mut out, Some(&op.id), format!("unknown tensor {t}"));
            }
        }
        for t in &op.outputs {
            if let Some(tensor) = g.tensor(t) {
                if tensor.producer.as_ref().is_some_and(|p| p != &op.id) {
                    push(&mut out, Some(&op.id), format!("tensor {t} names a different producer"));
                }
            }
        }
    }
    if !out.is_empty() {
        return out;
    }

    let Some(order) = g.topo_order() else {
        push(&mut out, None, "operator graph contains a cycle".to_owned());
        return out;
    };

    for i in order {
        let op = &g.operators[i];
        let inputs: Vec<&ParallelTensor> = op.inputs.iter().filter_map(|t| g.tensor(t)).collect();
        if !accepts_pre_reduce(op.kind)
            && inputs
                .iter()
                .any(|t| t.dims.iter().any(|d| d.state.is_pre_reduce()))
        {
            push(
                &mut out,
                Some(&op.id),
                format!("{} consumes a pre-reduce tensor before any Reduce", op.kind),
            );
            continue;
        }
        if op.kind == OpKind::Input {
            continue;
        }
        let in_states: Vec<Vec<DimState>> = inputs.iter().map(|t| t.states()).collect();
        match infer_states(op, &in_states) {
            Err(e) => push(&mut out, Some(&op.id), e.to_string()),
            Ok(inferred) => {
                for (t, states) in op.outputs.iter().zip(inferred) {
                    if let Some(tensor) = g.tensor(t) {
                        if tensor.states() != states {
                            push(
                                &mut out,
                                Some(&op.id),
                                format!(
                                    "output {t} declared {} but inferred {}",
                                    fmt_states(&tensor.states()),
                                    fmt_states(&states)
                                ),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn fmt_states(states: &[DimState]) -> String {
    let parts: Vec<String> = states.iter().map(ToString::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Incremental builder with automatic shape propagation for non-parallel graphs.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Pcg,
    counter: usize,
    prefix: String,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prefixes generated operator ids.
    pub fn with_prefix(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            ..Self::default()
        }
    }

    pub fn finish(self) -> Pcg {
        self.graph
    }

    pub fn graph(&self) -> &Pcg {
        &self.graph
    }

    fn next_op_id(&mut self, kind: OpKind) -> OpId {
        self.counter += 1;
        OpId(format!("{}{}{}", self.prefix, kind.to_string().to_lowercase(), self.counter))
    }

    pub fn extents(&self, t: &TensorId) -> Vec<usize> {
        self.graph.tensor(t).expect("unknown tensor").extents()
    }

    pub fn input(&mut self, name: &str, extents: &[usize]) -> TensorId {
        let id = TensorId::new(name);
        let op = self.next_op_id(OpKind::Input);
        self.push_tensor(&id, extents, Some(op.clone()), ElementKind::Activation);
        self.graph
            .operators
            .push(OperatorNode::new(op, OpKind::Input, vec![], vec![id.clone()]));
        id
    }

    pub fn weight(&mut self, name: &str, extents: &[usize]) -> TensorId {
        let id = TensorId::new(name);
        self.push_tensor(&id, extents, None, ElementKind::Weight);
        id
    }

    fn push_tensor(&mut self, id: &TensorId, extents: &[usize], producer: Option<OpId>, kind: ElementKind) {
        assert!(self.graph.tensor(id).is_none(), "duplicate tensor {id}");
        self.graph.tensors.push(ParallelTensor {
            id: id.clone(),
            dims: extents.iter().map(|&e| Dim::new(e)).collect(),
            producer,
            kind,
        });
    }

    /// Appends an operator producing a single output named `out`.
    pub fn op(&mut self, kind: OpKind, inputs: &[&TensorId], out: &str, trainable: bool) -> TensorId {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| self.extents(t)).collect();
        let extents = infer_extents(kind, &shapes).unwrap_or_else(|e| panic!("{e}"));
        let id = TensorId::new(out);
        let op_id = self.next_op_id(kind);
        let elem = if kind == OpKind::Loss {
            ElementKind::Loss
        } else {
            ElementKind::Activation
        };
        self.push_tensor(&id, &extents, Some(op_id.clone()), elem);
        let mut node = OperatorNode::new(
            op_id,
            kind,
            inputs.iter().map(|t| (*t).clone()).collect(),
            vec![id.clone()],
        );
        node.trainable = trainable;
        self.graph.operators.push(node);
        if kind == OpKind::Loss {
            self.graph.loss = Some(id.clone());
        }
        id
    }

    pub fn matmul(&mut self, x: &TensorId, w: &TensorId, out: &str, trainable: bool) -> TensorId {
        self.op(OpKind::MatMul, &[x, w], out, trainable)
    }

    pub fn set_loss(&mut self, t: &TensorId) {
        self.graph.loss = Some(t.clone());
    }
}

/// Output extents for a single-output operator.
pub fn infer_extents(kind: OpKind, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let bad = |why: &str| Err(Error::InvalidConfiguration(format!("{kind}: {why}")));
    let arity = match kind {
        OpKind::Input => 0,
        OpKind::MatMul | OpKind::MatMulT | OpKind::Add | OpKind::ElemMul | OpKind::Embedding => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return bad(&format!("expected {arity} inputs, got {}", inputs.len()));
    }
    match kind {
        OpKind::Input => bad("inputs have declared extents"),
        OpKind::MatMul | OpKind::Embedding => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return bad(&format!("incompatible shapes {a:?} x {b:?}"));
            }
            Ok(vec![a[0], b[1]])
        }
        OpKind::MatMulT => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
                return bad(&format!("incompatible shapes {a:?} x {b:?}ᵀ"));
            }
            Ok(vec![a[0], b[0]])
        }
        OpKind::Add => {
            if inputs[0] != inputs[1] {
                return bad("operand shapes differ");
            }
            Ok(inputs[0].clone())
        }
        OpKind::ElemMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let broadcast = b.len() == 2 && a.len() == 2 && b[0] == 1 && b[1] == a[1];
            if a != b && !broadcast {
                return bad("operand shapes differ");
            }
            Ok(a.clone())
        }
        OpKind::Loss => Ok(vec![1, 1]),
        _ => Ok(inputs[0].clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BypassKind {
    Lora { rank: usize },
    Adapter { bottleneck: usize },
    PrefixEmbedding,
    Ia3,
}

/// Where a bypass reads from and adds into the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachPoint {
    pub reads: TensorId,
    pub adds_to: TensorId,
}

/// Additive side network: `Y = f_B(X) + f_A(X)`.
///
/// `operators` form a chain whose first operator consumes `attach_in` and whose
/// last operator produces `output`; `output` is added onto `attach_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BypassNetwork {
    pub name: String,
    pub kind: BypassKind,
    pub operators: Vec<OperatorNode>,
    pub tensors: Vec<ParallelTensor>,
    pub attach_in: TensorId,
    pub attach_out: TensorId,
    pub output: TensorId,
}

impl BypassNetwork {
    pub fn tensor(&self, id: &TensorId) -> Option<&ParallelTensor> {
        self.tensors.iter().find(|t| &t.id == id)
    }

    pub fn weights(&self) -> impl Iterator<Item = &ParallelTensor> {
        self.tensors.iter().filter(|t| t.kind == ElementKind::Weight)
    }

    pub fn trainable_params(&self) -> usize {
        self.weights().map(ParallelTensor::elements).sum()
    }

    /// Flags combinations other than LoRA-style in/out attachment for review.
    pub fn attachment_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.attach_in == self.attach_out {
            w.push(format!(
                "bypass {} reads and writes the same tensor {}",
                self.name, self.attach_in
            ));
        }
        w
    }

    fn check_invariants(&self) -> Result<()> {
        let first = self
            .operators
            .first()
            .ok_or_else(|| Error::InvalidConfiguration(format!("bypass {} has no operators", self.name)))?;
        if !first.inputs.contains(&self.attach_in) {
            return Err(Error::InvalidConfiguration(format!(
                "bypass {} does not read its attach-in tensor",
                self.name
            )));
        }
        let last = self.operators.last().expect("non-empty");
        if last.outputs != [self.output.clone()] {
            return Err(Error::InvalidConfiguration(format!(
                "bypass {} must end in its single output tensor",
                self.name
            )));
        }
        for op in &self.operators {
            for t in &op.inputs {
                if t != &self.attach_in && self.tensor(t).is_none() {
                    return Err(Error::InvalidConfiguration(format!(
                        "bypass {} reads backbone tensor {t} besides its attach-in",
                        self.name
                    )));
                }
                let is_weight = self.tensor(t).is_some_and(|x| x.kind == ElementKind::Weight);
                if is_weight && !op.trainable {
                    return Err(Error::InvalidConfiguration(format!(
                        "bypass {} has a frozen weight {t}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn lora_chain(name: &str, tokens: usize, in_features: usize, out_features: usize, rank: usize, at: &AttachPoint) -> BypassNetwork {
    let a = TensorId(format!("{name}.A"));
    let b = TensorId(format!("{name}.B"));
    let xa = TensorId(format!("{name}.xa"));
    let out = TensorId(format!("{name}.out"));
    let op_a = OpId(format!("{name}.matmul_a"));
    let op_b = OpId(format!("{name}.matmul_b"));
    let act = |id: &TensorId, cols: usize, op: &OpId| ParallelTensor {
        id: id.clone(),
        dims: vec![Dim::new(tokens), Dim::new(cols)],
        producer: Some(op.clone()),
        kind: ElementKind::Activation,
    };
    let weight = |id: &TensorId, r: usize, c: usize| ParallelTensor {
        id: id.clone(),
        dims: vec![Dim::new(r), Dim::new(c)],
        producer: None,
        kind: ElementKind::Weight,
    };
    let mut ma = OperatorNode::new(op_a.clone(), OpKind::MatMul, vec![at.reads.clone(), a.clone()], vec![xa.clone()]);
    ma.trainable = true;
    let mut mb = OperatorNode::new(op_b.clone(), OpKind::MatMul, vec![xa.clone(), b.clone()], vec![out.clone()]);
    mb.trainable = true;
    BypassNetwork {
        name: name.to_owned(),
        kind: BypassKind::Lora { rank },
        operators: vec![ma, mb],
        tensors: vec![
            weight(&a, in_features, rank),
            weight(&b, rank, out_features),
            act(&xa, rank, &op_a),
            act(&out, out_features, &op_b),
        ],
        attach_in: at.reads.clone(),
        attach_out: at.adds_to.clone(),
        output: out,
    }
}

/// LoRA bypass `X · A · B` over a square `hidden → hidden` projection.
pub fn build_lora_block(hidden: usize, rank: usize, tokens: usize, target: &AttachPoint) -> Result<BypassNetwork> {
    build_lora(hidden, hidden, rank, tokens, target)
}

/// LoRA bypass for a rectangular projection `in_features → out_features`.
pub fn build_lora(in_features: usize, out_features: usize, rank: usize, tokens: usize, target: &AttachPoint) -> Result<BypassNetwork> {
    if rank == 0 {
        return Err(Error::InvalidConfiguration("LoRA rank must be >= 1".into()));
    }
    if rank > in_features.min(out_features) {
        return Err(Error::InvalidConfiguration(format!(
            "LoRA rank {rank} exceeds hidden size {}",
            in_features.min(out_features)
        )));
    }
    let name = format!("lora@{}", target.adds_to);
    Ok(lora_chain(&name, tokens, in_features, out_features, rank, target))
}

/// Bottleneck adapter `ReLU(X · D) · U`.
pub fn build_adapter(hidden: usize, bottleneck: usize, tokens: usize, target: &AttachPoint) -> Result<BypassNetwork> {
    if bottleneck == 0 || bottleneck > hidden {
        return Err(Error::InvalidConfiguration(format!(
            "adapter bottleneck {bottleneck} outside [1, {hidden}]"
        )));
    }
    let name = format!("adapter@{}", target.adds_to);
    let mut g = GraphBuilder::with_prefix(format!("{name}."));
    let x = g.input(target.reads.as_str(), &[tokens, hidden]);
    let d = g.weight(&format!("{name}.down"), &[hidden, bottleneck]);
    let u = g.weight(&format!("{name}.up"), &[bottleneck, hidden]);
    let h = g.matmul(&x, &d, &format!("{name}.h"), true);
    let r = g.op(OpKind::ReLU, &[&h], &format!("{name}.r"), false);
    let out = g.matmul(&r, &u, &format!("{name}.out"), true);
    from_builder(name, BypassKind::Adapter { bottleneck }, g.finish(), target, out)
}

/// Prefix embedding modeled as an additive lookup on the embedding output.
pub fn build_prefix_embedding(hidden: usize, tokens: usize, target: &AttachPoint) -> Result<BypassNetwork> {
    let name = format!("prefix@{}", target.adds_to);
    let mut g = GraphBuilder::with_prefix(format!("{name}."));
    let x = g.input(target.reads.as_str(), &[tokens, hidden]);
    let table = g.weight(&format!("{name}.table"), &[hidden, hidden]);
    let out = g.op(OpKind::Embedding, &[&x, &table], &format!("{name}.out"), true);
    from_builder(name, BypassKind::PrefixEmbedding, g.finish(), target, out)
}

fn from_builder(name: String, kind: BypassKind, g: Pcg, target: &AttachPoint, out: TensorId) -> Result<BypassNetwork> {
    let operators: Vec<OperatorNode> = g.operators.into_iter().filter(|o| o.kind != OpKind::Input).collect();
    let tensors = g.tensors.into_iter().filter(|t| t.id != target.reads).collect();
    let b = BypassNetwork {
        name,
        kind,
        operators,
        tensors,
        attach_in: target.reads.clone(),
        attach_out: target.adds_to.clone(),
        output: out,
    };
    b.check_invariants()?;
    Ok(b)
}

/// Result of rewriting an elementwise scaling into bypass form.
#[derive(Debug, Clone)]
pub struct Ia3Rewrite {
    /// Backbone with the scaling replaced by an identity.
    pub backbone: Pcg,
    pub bypass: BypassNetwork,
    /// Original trainable vector `W`.
    pub source_weight: TensorId,
    /// Bypass weight holding `W − O`.
    pub delta_weight: TensorId,
}

/// Rewrites `Y = X ⊙ W` into `Y = X + X ⊙ (W − O)`.
pub fn rewrite_ia3(g: &Pcg, node: &OpId) -> Result<Ia3Rewrite> {
    let op = g
        .op(node)
        .ok_or_else(|| Error::NotRewritable(format!("{node} (unknown operator)")))?;
    if op.kind != OpKind::ElemMul || op.inputs.len() != 2 || op.outputs.len() != 1 {
        return Err(Error::NotRewritable(format!("{node} is {}, not ElemMul", op.kind)));
    }
    let (x, w) = (&op.inputs[0], &op.inputs[1]);
    let w_tensor = g.tensor(w).ok_or_else(|| Error::NotRewritable(format!("{node}: unknown weight {w}")))?;
    if w_tensor.kind != ElementKind::Weight {
        return Err(Error::NotRewritable(format!("{node}: right operand {w} is not a weight")));
    }
    let y = op.outputs[0].clone();
    let x_tensor = g.tensor(x).ok_or_else(|| Error::NotRewritable(format!("{node}: unknown input {x}")))?;

    let mut backbone = g.clone();
    let y_base = backbone.fresh_tensor_id(&format!("{y}.base"));
    let mut bypass_input = x_tensor.clone();
    bypass_input.producer = None;
    {
        let idx = backbone.operators.iter().position(|o| &o.id == node).expect("present");
        let n = &mut backbone.operators[idx];
        n.kind = OpKind::Identity;
        n.inputs = vec![x.clone()];
        n.trainable = false;
    }
    // The identity keeps producing `y`; the bypass adds onto it.
    let _ = y_base;
    backbone.tensors.retain(|t| &t.id != w);

    let name = format!("ia3@{y}");
    let delta = TensorId(format!("{name}.delta"));
    let out = TensorId(format!("{name}.out"));
    let op_id = OpId(format!("{name}.elem_mul"));
    let mut mul = OperatorNode::new(op_id.clone(), OpKind::ElemMul, vec![x.clone(), delta.clone()], vec![out.clone()]);
    mul.trainable = true;
    let mut delta_t = w_tensor.clone();
    delta_t.id = delta.clone();
    let mut out_t = x_tensor.clone();
    out_t.id = out.clone();
    out_t.producer = Some(op_id);
    out_t.kind = ElementKind::Activation;
    let bypass = BypassNetwork {
        name,
        kind: BypassKind::Ia3,
        operators: vec![mul],
        tensors: vec![delta_t, out_t],
        attach_in: x.clone(),
        attach_out: y,
        output: out,
    };
    bypass.check_invariants()?;
    Ok(Ia3Rewrite {
        backbone,
        bypass,
        source_weight: w.clone(),
        delta_weight: delta,
    })
}

/// A frozen backbone plus trainable bypass networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftModel {
    pub backbone: Pcg,
    pub bypasses: Vec<BypassNetwork>,
}

/// On-disk graph description: backbone operators and tensors plus bypasses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub operators: Vec<OperatorNode>,
    pub tensors: Vec<ParallelTensor>,
    #[serde(default)]
    pub bypasses: Vec<BypassNetwork>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<TensorId>,
}

impl PeftModel {
    /// Freezes every backbone operator.
    pub fn new(mut backbone: Pcg) -> Self {
        for op in &mut backbone.operators {
            op.trainable = false;
        }
        Self {
            backbone,
            bypasses: Vec::new(),
        }
    }

    pub fn attach(&mut self, bypass: BypassNetwork) -> Result<()> {
        bypass.check_invariants()?;
        for id in [&bypass.attach_in, &bypass.attach_out] {
            if self.backbone.tensor(id).is_none() {
                return Err(Error::InvalidConfiguration(format!(
                    "bypass {} attaches to unknown tensor {id}",
                    bypass.name
                )));
            }
        }
        self.bypasses.push(bypass);
        Ok(())
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        let mut m = PeftModel::new(Pcg {
            operators: file.operators,
            tensors: file.tensors,
            loss: file.loss,
        });
        for b in file.bypasses {
            m.attach(b)?;
        }
        Ok(m)
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            operators: self.backbone.operators.clone(),
            tensors: self.backbone.tensors.clone(),
            bypasses: self.bypasses.clone(),
            loss: self.backbone.loss.clone(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("serializable");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn trainable_params(&self) -> usize {
        self.bypasses.iter().map(BypassNetwork::trainable_params).sum()
    }

    /// Single graph with every bypass fused in.
    ///
    /// The backbone producer of each attach-out tensor is redirected to a
    /// fresh `*.base` tensor and an `Add` re-creates the original id, so
    /// downstream backbone operators are untouched.
    pub fn merged(&self) -> Pcg {
        let mut g = self.backbone.clone();
        for b in &self.bypasses {
            let target = b.attach_out.clone();
            let base = g.fresh_tensor_id(&format!("{target}.base"));
            let target_tensor = g.tensor(&target).expect("validated on attach").clone();
            let producer = target_tensor.producer.clone();
            if let Some(pid) = &producer {
                if let Some(p) = g.operators.iter_mut().find(|o| &o.id == pid) {
                    for o in &mut p.outputs {
                        if o == &target {
                            *o = base.clone();
                        }
                    }
                }
            }
            let mut base_tensor = target_tensor.clone();
            base_tensor.id = base.clone();
            g.tensors.push(base_tensor);

            g.operators.extend(b.operators.iter().cloned());
            g.tensors.extend(b.tensors.iter().cloned());
            let add_id = OpId(format!("{}.add", b.name));
            let add = OperatorNode::new(add_id.clone(), OpKind::Add, vec![base, b.output.clone()], vec![target.clone()]);
            g.operators.push(add);
            if let Some(t) = g.tensor_mut(&target) {
                t.producer = Some(add_id);
            }
        }
        g
    }
}

/// Checks that every backbone edge survives in `merged`, either directly or
/// routed through bypass-only nodes, and that no new direct edge joins two
/// backbone nodes.
pub fn backbone_edges_preserved(backbone: &Pcg, merged: &Pcg) -> bool {
    let backbone_ops: BTreeSet<&OpId> = backbone.operators.iter().map(|o| &o.id).collect();
    if !backbone_ops.iter().all(|id| merged.op(id).is_some()) {
        return false;
    }
    let expected = backbone.edges();
    let merged_edges = merged.edges();
    let mut succ: BTreeMap<&OpId, Vec<&OpId>> = BTreeMap::new();
    for (a, b) in &merged_edges {
        succ.entry(a).or_default().push(b);
        if backbone_ops.contains(a) && backbone_ops.contains(b) && !expected.contains(&(a.clone(), b.clone())) {
            return false;
        }
    }
    expected.iter().all(|(a, b)| {
        let mut stack = vec![a];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            for &next in succ.get(n).map(Vec::as_slice).unwrap_or_default() {
                if next == b {
                    return true;
                }
                if !backbone_ops.contains(next) && seen.insert(next) {
                    stack.push(next);
                }
            }
        }
        false
    })
}
