//! A tiny LoRA-equipped transformer in `f64`.
//!
//! [`forward_full`] and [`backward_full`] process the whole sequence with
//! dense `[L, L]` attention and serve as the reference. [`forward_window`]
//! and [`backward_window`] process token windows against a [`QkvCache`]
//! and a [`KvGradAccumulator`], the way finetuning tokens are interleaved
//! with inference iterations.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_exec::softmax_rows;
use crate::tensor::{rel_err, rel_err_scalar, Matrix};

thread_local! {
    static AUDIT: RefCell<Vec<String>> = const { RefCell::new(Vec::new()) };
}

/// Records a gradient buffer allocation.
fn audit(name: impl Into<String>) {
    AUDIT.with(|a| a.borrow_mut().push(name.into()));
}

/// Drains the names of gradient buffers allocated on this thread.
pub fn take_allocation_audit() -> Vec<String> {
    AUDIT.with(|a| std::mem::take(&mut *a.borrow_mut()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub depth: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub rank: usize,
    pub heads: usize,
}

impl TinyConfig {
    pub fn new(depth: usize, hidden: usize, vocab: usize, rank: usize) -> Self {
        Self {
            depth,
            hidden,
            ffn: 2 * hidden,
            vocab,
            rank,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_owned()));
        if self.depth == 0 || self.hidden == 0 || self.ffn == 0 || self.vocab < 2 {
            return bad("depth, hidden and ffn must be positive and vocab >= 2");
        }
        if self.rank == 0 || self.rank > self.hidden {
            return bad("LoRA rank must be in [1, hidden]");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("heads must divide hidden");
        }
        Ok(())
    }
}

/// LoRA targets inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
    Down,
}

pub const TARGETS: [Target; 4] = [Target::Q, Target::K, Target::V, Target::Down];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lora {
    pub a: Matrix,
    pub b: Matrix,
}

impl Lora {
    /// `x · A · B`
    fn apply(&self, x: &Matrix) -> Matrix {
        x.matmul(&self.a).matmul(&self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub lora: [Lora; 4],
}

impl Layer {
    fn lora(&self, t: Target) -> &Lora {
        &self.lora[t as usize]
    }

    fn project(&self, x: &Matrix, t: Target) -> Matrix {
        let w = match t {
            Target::Q => &self.wq,
            Target::K => &self.wk,
            Target::V => &self.wv,
            Target::Down => &self.w_down,
        };
        x.matmul(w).add(&self.lora(t).apply(x))
    }

    fn frozen(&self, t: Target) -> &Matrix {
        match t {
            Target::Q => &self.wq,
            Target::K => &self.wk,
            Target::V => &self.wv,
            Target::Down => &self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub config: TinyConfig,
    pub embed: Matrix,
    pub head: Matrix,
    pub layers: Vec<Layer>,
}

impl TinyModel {
    /// Seeded random model; LoRA `B` is nonzero so every LoRA gradient is exercised.
    pub fn random(config: TinyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f, v, r) = (config.hidden, config.ffn, config.vocab, config.rank);
        let s_h = 1.0 / (h as f64).sqrt();
        let s_f = 1.0 / (f as f64).sqrt();
        let mut m = |rows, cols, scale| Matrix::random(rows, cols, scale, &mut rng);
        let embed = m(v, h, 1.0);
        let head = m(h, v, s_h);
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let lora_h = |m: &mut dyn FnMut(usize, usize, f64) -> Matrix| Lora {
                a: m(h, r, s_h),
                b: m(r, h, 0.5),
            };
            let lq = lora_h(&mut m);
            let lk = lora_h(&mut m);
            let lv = lora_h(&mut m);
            let ld = Lora {
                a: m(f, r, s_f),
                b: m(r, h, 0.5),
            };
            layers.push(Layer {
                wq: m(h, h, s_h),
                wk: m(h, h, s_h),
                wv: m(h, h, s_h),
                wo: m(h, h, s_h),
                w_up: m(h, f, s_h),
                w_down: m(f, h, s_f),
                lora: [lq, lk, lv, ld],
            });
        }
        Ok(Self {
            config,
            embed,
            head,
            layers,
        })
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        let h = self.config.hidden;
        let mut x = Matrix::zeros(tokens.len(), h);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab {
                return Err(Error::InvalidConfiguration(format!("token {t} outside vocabulary")));
            }
            x.row_mut(i).copy_from_slice(self.embed.row(t));
        }
        Ok(x)
    }

    fn head_dim(&self) -> usize {
        self.config.hidden / self.config.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// LoRA gradients, `[layer][target] = (dA, dB)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraGrads {
    pub layers: Vec<[(Matrix, Matrix); 4]>,
}

impl LoraGrads {
    pub fn zeros(m: &TinyModel) -> Self {
        let layers = m
            .layers
            .iter()
            .enumerate()
            .map(|(n, l)| {
                TARGETS.map(|t| {
                    let lo = l.lora(t);
                    audit(format!("layer{n}.lora.{t:?}.A"));
                    audit(format!("layer{n}.lora.{t:?}.B"));
                    (
                        Matrix::zeros(lo.a.rows(), lo.a.cols()),
                        Matrix::zeros(lo.b.rows(), lo.b.cols()),
                    )
                })
            })
            .collect();
        Self { layers }
    }

    pub fn max_rel_err(&self, reference: &LoraGrads) -> f64 {
        self.layers
            .iter()
            .zip(&reference.layers)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|((da, db), (ra, rb))| rel_err(da, ra).max(rel_err(db, rb)))
            .fold(0.0, f64::max)
    }

    /// Flattened view used for parameter indexing in finite-difference checks.
    pub fn get(&self, layer: usize, target: Target, b: bool) -> &Matrix {
        let (da, db) = &self.layers[layer][target as usize];
        if b {
            db
        } else {
            da
        }
    }

    fn add_projection(&mut self, layer: usize, t: Target, x: &Matrix, a: &Matrix, dy: &Matrix, b: &Matrix) {
        let (da, db) = &mut self.layers[layer][t as usize];
        db.add_assign(&x.matmul(a).t_matmul(dy));
        da.add_assign(&x.t_matmul(&dy.matmul_t(b)));
    }
}

/// Sum of next-token cross-entropy over the rows that have a target.
pub fn generative_loss(logits: &Matrix, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
    }
    total
}

/// `∂(Σ CE) / ∂logits`, scaled by `scale`.
fn loss_grad(logits: &Matrix, targets: &[Option<usize>], scale: f64) -> Matrix {
    let p = softmax_rows(logits);
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            for c in 0..logits.cols() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                d.set(i, c, (p.get(i, c) - onehot) * scale);
            }
        }
    }
    d
}

fn targets_for(tokens: &[usize], start: usize, len: usize) -> Vec<Option<usize>> {
    (start..start + len).map(|p| tokens.get(p + 1).copied()).collect()
}

fn mean_scale(total_len: usize) -> f64 {
    if total_len > 1 {
        1.0 / (total_len - 1) as f64
    } else {
        0.0
    }
}

/// Retained activations of one layer over the full sequence.
#[derive(Debug, Clone)]
pub struct LayerActs {
    pub x: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, `[L, L]` with zeros above the diagonal.
    pub probs: Vec<Matrix>,
    pub attn: Matrix,
    pub h1: Matrix,
    pub u: Matrix,
}

#[derive(Debug, Clone)]
pub struct Activations {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerActs>,
    pub x_final: Matrix,
    pub logits: Matrix,
}

fn head_cols(m: &Matrix, head: usize, dh: usize) -> Matrix {
    m.slice_cols(head * dh, (head + 1) * dh)
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

fn relu_mask(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Full-sequence forward; returns the mean generative loss and all activations.
pub fn forward_full(m: &TinyModel, tokens: &[usize]) -> Result<(f64, Activations)> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let l = tokens.len();
    let dh = m.head_dim();
    let c = m.scale();
    let mut x = m.embed_tokens(tokens)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for layer in &m.layers {
        let q = layer.project(&x, Target::Q);
        let k = layer.project(&x, Target::K);
        let v = layer.project(&x, Target::V);
        let mut probs = Vec::new();
        let mut heads_out = Vec::new();
        for hd in 0..m.config.heads {
            let (qh, kh, vh) = (head_cols(&q, hd, dh), head_cols(&k, hd, dh), head_cols(&v, hd, dh));
            let s = qh.matmul_t(&kh).scale(c);
            let mut p = Matrix::zeros(l, l);
            for i in 0..l {
                let row = &s.row(i)[..=i];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (row[j] - max).exp();
                    p.set(i, j, e);
                    sum += e;
                }
                for j in 0..=i {
                    p.set(i, j, p.get(i, j) / sum);
                }
            }
            heads_out.push(p.matmul(&vh));
            probs.push(p);
        }
        let attn = Matrix::hstack(&heads_out);
        let h1 = x.add(&attn.matmul(&layer.wo));
        let u = h1.matmul(&layer.w_up);
        let out = h1.add(&layer.project(&relu(&u), Target::Down));
        layers.push(LayerActs {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            attn,
            h1,
            u,
        });
        x = out;
    }
    let logits = x.matmul(&m.head);
    let loss = generative_loss(&logits, &targets_for(tokens, 0, l)) * mean_scale(l);
    Ok((
        loss,
        Activations {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            logits,
        },
    ))
}

/// Reference gradients of every layer.
#[derive(Debug, Clone)]
pub struct FullGrads {
    pub lora: LoraGrads,
    /// `∂L/∂X` entering each layer.
    pub dx: Vec<Matrix>,
    /// `(∂L/∂K, ∂L/∂V)` per layer.
    pub dkv: Vec<(Matrix, Matrix)>,
}

/// Full-sequence reverse pass over dense matrices.
pub fn backward_full(m: &TinyModel, acts: &Activations) -> FullGrads {
    let l = acts.tokens.len();
    let dh = m.head_dim();
    let c = m.scale();
    let mut grads = LoraGrads::zeros(m);
    let dlogits = loss_grad(&acts.logits, &targets_for(&acts.tokens, 0, l), mean_scale(l));
    let mut dout = dlogits.matmul_t(&m.head);
    let mut dx_all = vec![Matrix::zeros(0, 0); m.layers.len()];
    let mut dkv_all = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); m.layers.len()];
    for n in (0..m.layers.len()).rev() {
        let layer = &m.layers[n];
        let a = &acts.layers[n];
        let r = relu(&a.u);
        let down = layer.lora(Target::Down);
        let dr = dout
            .matmul_t(&layer.w_down)
            .add(&dout.matmul_t(&down.b).matmul_t(&down.a));
        grads.add_projection(n, Target::Down, &r, &down.a, &dout, &down.b);
        let du = dr.hadamard(&relu_mask(&a.u));
        let dh1 = dout.add(&du.matmul_t(&layer.w_up));
        let dattn = dh1.matmul_t(&layer.wo);
        let mut dq_h = Vec::new();
        let mut dk_h = Vec::new();
        let mut dv_h = Vec::new();
        for hd in 0..m.config.heads {
            let (qh, kh, vh) = (head_cols(&a.q, hd, dh), head_cols(&a.k, hd, dh), head_cols(&a.v, hd, dh));
            let p = &a.probs[hd];
            let da = head_cols(&dattn, hd, dh);
            let dp = da.matmul_t(&vh);
            let mut ds = Matrix::zeros(l, l);
            for i in 0..l {
                let dot: f64 = (0..=i).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                for j in 0..=i {
                    ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot));
                }
            }
            dq_h.push(ds.matmul(&kh).scale(c));
            dk_h.push(ds.t_matmul(&qh).scale(c));
            dv_h.push(p.t_matmul(&da));
        }
        let (dq, dk, dv) = (Matrix::hstack(&dq_h), Matrix::hstack(&dk_h), Matrix::hstack(&dv_h));
        let mut dx = dh1.clone();
        for (t, d) in [(Target::Q, &dq), (Target::K, &dk), (Target::V, &dv)] {
            let lo = layer.lora(t);
            grads.add_projection(n, t, &a.x, &lo.a, d, &lo.b);
            dx.add_assign(&d.matmul_t(layer.frozen(t)));
            dx.add_assign(&d.matmul_t(&lo.b).matmul_t(&lo.a));
        }
        dkv_all[n] = (dk, dv);
        dx_all[n] = dx.clone();
        dout = dx;
    }
    FullGrads {
        lora: grads,
        dx: dx_all,
        dkv: dkv_all,
    }
}

/// Cached per-layer state for processed positions.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Layer inputs, post-attention residual and MLP pre-activations.
    pub x: Matrix,
    pub h1: Matrix,
    pub u: Matrix,
    /// Per head, per position: attention probabilities over `[0, pos]`.
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// Query/key/value cache plus the activations the backward pass reads.
#[derive(Debug, Clone)]
pub struct QkvCache {
    pub layers: Vec<LayerCache>,
}

impl QkvCache {
    pub fn new(m: &TinyModel) -> Self {
        let layers = (0..m.config.depth)
            .map(|_| LayerCache {
                probs: vec![Vec::new(); m.config.heads],
                ..LayerCache::default()
            })
            .collect();
        Self { layers }
    }

    /// Cached positions, equal across layers.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |c| c.k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs positions `[l_i, l_i + s_i)` through every layer, appending to the
/// cache, and returns the window's logits.
pub fn forward_window(m: &TinyModel, window_tokens: &[usize], l_i: usize, cache: &mut QkvCache) -> Result<Matrix> {
    if window_tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    for (n, lc) in cache.layers.iter().enumerate() {
        if lc.k.rows() != l_i {
            return Err(Error::CacheDesync {
                layer: n,
                cached: lc.k.rows(),
                start: l_i,
            });
        }
    }
    let s = window_tokens.len();
    let dh = m.head_dim();
    let c = m.scale();
    let mut x = m.embed_tokens(window_tokens)?;
    for (layer, lc) in m.layers.iter().zip(cache.layers.iter_mut()) {
        let q = layer.project(&x, Target::Q);
        let k = layer.project(&x, Target::K);
        let v = layer.project(&x, Target::V);
        lc.q.append_rows(&q);
        lc.k.append_rows(&k);
        lc.v.append_rows(&v);
        let mut heads_out = Vec::new();
        for hd in 0..m.config.heads {
            let mut out = Matrix::zeros(s, dh);
            for i in 0..s {
                let pos = l_i + i;
                let qrow = &q.row(i)[hd * dh..(hd + 1) * dh];
                let scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let krow = &lc.k.row(j)[hd * dh..(hd + 1) * dh];
                        qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * c
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for (j, pj) in p.iter().enumerate() {
                        acc += pj * lc.v.get(j, hd * dh + d);
                    }
                    out.set(i, d, acc);
                }
                lc.probs[hd].push(p);
            }
            heads_out.push(out);
        }
        let attn = Matrix::hstack(&heads_out);
        let h1 = x.add(&attn.matmul(&layer.wo));
        let u = h1.matmul(&layer.w_up);
        let out = h1.add(&layer.project(&relu(&u), Target::Down));
        lc.x.append_rows(&x);
        lc.h1.append_rows(&h1);
        lc.u.append_rows(&u);
        x = out;
    }
    Ok(x.matmul(&m.head))
}

/// Accumulated `∂L/∂K` and `∂L/∂V` of one layer plus the backward frontier.
#[derive(Debug, Clone)]
pub struct KvGradAccumulator {
    pub dk: Matrix,
    pub dv: Matrix,
    /// End position the next backward window must have.
    frontier: usize,
}

impl KvGradAccumulator {
    pub fn new(len: usize, hidden: usize) -> Self {
        audit("dKVAccum.K");
        audit("dKVAccum.V");
        Self {
            dk: Matrix::zeros(len, hidden),
            dv: Matrix::zeros(len, hidden),
            frontier: len,
        }
    }

    pub fn frontier(&self) -> usize {
        self.frontier
    }
}

/// Output of one backward window.
#[derive(Debug, Clone)]
pub struct WindowGrads {
    /// `∂L/∂X` for the window rows, `[s_j, h]`.
    pub dx: Matrix,
    /// `[s_j, h]`
    pub dq: Matrix,
    /// This window's key contribution over positions `[0, l_j)`, `[l_j, h]`.
    pub dk: Matrix,
    /// `[l_j, h]`
    pub dv: Matrix,
}

/// Backward of layer `n` for positions `[l_j − s_j, l_j)`.
///
/// `dy` is `∂L/∂(layer output)` for those rows. Windows must arrive in
/// strictly descending order so the accumulated key/value gradients of the
/// window rows are complete when LoRA gradients are taken.
#[allow(clippy::too_many_arguments)]
pub fn backward_window(
    m: &TinyModel,
    n: usize,
    dy: &Matrix,
    l_j: usize,
    s_j: usize,
    cache: &QkvCache,
    accum: &mut KvGradAccumulator,
    grads: &mut LoraGrads,
) -> Result<WindowGrads> {
    if s_j == 0 || s_j > l_j {
        return Err(Error::InvalidConfiguration(format!("window of {s_j} tokens ending at {l_j}")));
    }
    if l_j != accum.frontier {
        return Err(Error::OrderingViolation {
            expected: accum.frontier,
            got: l_j,
        });
    }
    let lc = &cache.layers[n];
    if lc.k.rows() < l_j {
        return Err(Error::CacheDesync {
            layer: n,
            cached: lc.k.rows(),
            start: l_j,
        });
    }
    let layer = &m.layers[n];
    let start = l_j - s_j;
    let dh = m.head_dim();
    let c = m.scale();
    let h = m.config.hidden;

    let x = lc.x.slice_rows(start, l_j);
    let u = lc.u.slice_rows(start, l_j);
    let r = relu(&u);
    let down = layer.lora(Target::Down);
    let dr = dy.matmul_t(&layer.w_down).add(&dy.matmul_t(&down.b).matmul_t(&down.a));
    grads.add_projection(n, Target::Down, &r, &down.a, dy, &down.b);
    let du = dr.hadamard(&relu_mask(&u));
    let dh1 = dy.add(&du.matmul_t(&layer.w_up));
    let dattn = dh1.matmul_t(&layer.wo);

    audit(format!("layer{n}.window.dQ"));
    audit(format!("layer{n}.window.dK"));
    audit(format!("layer{n}.window.dV"));
    let mut dq = Matrix::zeros(s_j, h);
    let mut dk = Matrix::zeros(l_j, h);
    let mut dv = Matrix::zeros(l_j, h);
    for hd in 0..m.config.heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..s_j {
            let pos = start + i;
            let p = &lc.probs[hd][pos];
            let da = &dattn.row(i)[cols.clone()];
            let dp: Vec<f64> = (0..=pos)
                .map(|j| da.iter().zip(&lc.v.row(j)[cols.clone()]).map(|(a, b)| a * b).sum())
                .collect();
            let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
            let qrow = &lc.q.row(pos)[cols.clone()];
            for j in 0..=pos {
                let ds = p[j] * (dp[j] - dot);
                for (d, col) in cols.clone().enumerate() {
                    dq.add_at(i, col, c * ds * lc.k.get(j, col));
                    dk.add_at(j, col, c * ds * qrow[d]);
                    dv.add_at(j, col, p[j] * da[d]);
                }
            }
        }
    }
    accum.dk.add_rows_at(0, &dk);
    accum.dv.add_rows_at(0, &dv);
    accum.frontier = start;

    let g_k = accum.dk.slice_rows(start, l_j);
    let g_v = accum.dv.slice_rows(start, l_j);
    let mut dx = dh1;
    for (t, d) in [(Target::Q, &dq), (Target::K, &g_k), (Target::V, &g_v)] {
        let lo = layer.lora(t);
        grads.add_projection(n, t, &x, &lo.a, d, &lo.b);
        dx.add_assign(&d.matmul_t(layer.frozen(t)));
        dx.add_assign(&d.matmul_t(&lo.b).matmul_t(&lo.a));
    }
    Ok(WindowGrads { dx, dq, dk, dv })
}

/// Ordered window sizes partitioning `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    sizes: Vec<usize>,
}

impl WindowSchedule {
    pub fn new(len: usize, sizes: Vec<usize>) -> Result<Self> {
        if sizes.contains(&0) || sizes.iter().sum::<usize>() != len {
            return Err(Error::InvalidConfiguration(format!("window sizes {sizes:?} do not partition {len}")));
        }
        Ok(Self { sizes })
    }

    /// Windows of `size` tokens; the last one may be shorter.
    pub fn uniform(len: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidConfiguration("window size must be positive".into()));
        }
        let mut sizes = vec![size; len / size];
        if !len.is_multiple_of(size) {
            sizes.push(len % size);
        }
        Self::new(len, sizes)
    }

    /// Uniformly random composition of `len`.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut sizes = Vec::new();
        let mut run = 1;
        for _ in 1..len {
            if rng.random_bool(0.5) {
                sizes.push(run);
                run = 1;
            } else {
                run += 1;
            }
        }
        if len > 0 {
            sizes.push(run);
        }
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// `(l_i, s_i)` with `l_i` ascending from 0.
    pub fn forward_slices(&self) -> Vec<(usize, usize)> {
        let mut l = 0;
        self.sizes
            .iter()
            .map(|&s| {
                let out = (l, s);
                l += s;
                out
            })
            .collect()
    }

    /// `(l_j, s_j)` with `l_j` the window end, descending from L.
    pub fn backward_slices(&self) -> Vec<(usize, usize)> {
        let mut l: usize = self.sizes.iter().sum();
        self.sizes
            .iter()
            .rev()
            .map(|&s| {
                let out = (l, s);
                l -= s;
                out
            })
            .collect()
    }
}

/// Result of a token-level finetuning pass.
#[derive(Debug, Clone)]
pub struct TokenLevelResult {
    pub loss: f64,
    pub grads: LoraGrads,
    pub accum: Vec<KvGradAccumulator>,
    /// Every window's `(s_j, l_j, dq shape, dk shape, dv shape)`.
    pub shapes: Vec<WindowShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub s_j: usize,
    pub l_j: usize,
    pub dq: (usize, usize),
    pub dk: (usize, usize),
    pub dv: (usize, usize),
}

/// Forward over `fwd` windows, then layer-by-layer backward over `bwd[n]` windows.
pub fn finetune_token_level(
    m: &TinyModel,
    tokens: &[usize],
    fwd: &WindowSchedule,
    bwd: &[WindowSchedule],
) -> Result<TokenLevelResult> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let l = tokens.len();
    if bwd.len() != m.layers.len() {
        return Err(Error::InvalidConfiguration("one backward schedule per layer required".into()));
    }
    let mut cache = QkvCache::new(m);
    let mut loss_sum = 0.0;
    let mut dy = Matrix::zeros(0, m.config.hidden);
    for (l_i, s_i) in fwd.forward_slices() {
        let logits = forward_window(m, &tokens[l_i..l_i + s_i], l_i, &mut cache)?;
        let targets = targets_for(tokens, l_i, s_i);
        loss_sum += generative_loss(&logits, &targets);
        dy.append_rows(&loss_grad(&logits, &targets, mean_scale(l)).matmul_t(&m.head));
    }
    let mut grads = LoraGrads::zeros(m);
    let mut accums: Vec<KvGradAccumulator> = Vec::with_capacity(m.layers.len());
    let mut shapes = Vec::new();
    for n in (0..m.layers.len()).rev() {
        let mut accum = KvGradAccumulator::new(l, m.config.hidden);
        let mut dx = Matrix::zeros(l, m.config.hidden);
        for (l_j, s_j) in bwd[n].backward_slices() {
            let slice = dy.slice_rows(l_j - s_j, l_j);
            let w = backward_window(m, n, &slice, l_j, s_j, &cache, &mut accum, &mut grads)?;
            shapes.push(WindowShape {
                s_j,
                l_j,
                dq: w.dq.shape(),
                dk: w.dk.shape(),
                dv: w.dv.shape(),
            });
            dx.add_rows_at(l_j - s_j, &w.dx);
        }
        accums.push(accum);
        dy = dx;
    }
    accums.reverse();
    Ok(TokenLevelResult {
        loss: loss_sum * mean_scale(l),
        grads,
        accum: accums,
        shapes,
    })
}

/// Worst-case deviation of a token-level pass from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub loss: f64,
    pub grads: f64,
    pub kv: f64,
}

impl Deviation {
    pub fn max(&self) -> f64 {
        self.loss.max(self.grads).max(self.kv)
    }
}

pub fn compare(result: &TokenLevelResult, loss: f64, oracle: &FullGrads) -> Deviation {
    let kv = result
        .accum
        .iter()
        .zip(&oracle.dkv)
        .map(|(a, (dk, dv))| rel_err(&a.dk, dk).max(rel_err(&a.dv, dv)))
        .fold(0.0, f64::max);
    Deviation {
        loss: rel_err_scalar(result.loss, loss),
        grads: result.grads.max_rel_err(&oracle.lora),
        kv,
    }
}

/// Per partition class, the worst deviation over its trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub trials: usize,
    pub worst: Deviation,
    pub shapes_ok: bool,
}

/// Uniform windows of every power of two up to `L`, plus `trials` random
/// partitions with independent forward and per-layer backward schedules.
pub fn verify_token_level(config: TinyConfig, seqlen: usize, trials: usize, seed: u64) -> Result<Vec<ClassReport>> {
    let m = TinyModel::random(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let tokens: Vec<usize> = (0..seqlen).map(|_| rng.random_range(0..config.vocab)).collect();
    let (loss, acts) = forward_full(&m, &tokens)?;
    let oracle = backward_full(&m, &acts);
    let check_shapes = |r: &TokenLevelResult| {
        r.shapes
            .iter()
            .all(|s| s.dq == (s.s_j, config.hidden) && s.dk == (s.l_j, config.hidden) && s.dv == (s.l_j, config.hidden))
    };
    let mut reports = Vec::new();
    let mut size = 1;
    while size <= seqlen {
        let sched = WindowSchedule::uniform(seqlen, size)?;
        let r = finetune_token_level(&m, &tokens, &sched, &vec![sched.clone(); config.depth])?;
        reports.push(ClassReport {
            class: format!("uniform-{size}"),
            trials: 1,
            worst: compare(&r, loss, &oracle),
            shapes_ok: check_shapes(&r),
        });
        size *= 2;
    }
    if trials > 0 {
        let mut worst = Deviation {
            loss: 0.0,
            grads: 0.0,
            kv: 0.0,
        };
        let schedules: Vec<(WindowSchedule, Vec<WindowSchedule>)> = (0..trials)
            .map(|_| {
                let fwd = WindowSchedule::random(seqlen, &mut rng);
                let bwd = (0..config.depth).map(|_| WindowSchedule::random(seqlen, &mut rng)).collect();
                (fwd, bwd)
            })
            .collect();
        let results = crate::sweep::map(&schedules, |(fwd, bwd)| {
            finetune_token_level(&m, &tokens, fwd, bwd).map(|r| (compare(&r, loss, &oracle), check_shapes(&r)))
        });
        let mut shapes_ok = true;
        for res in results {
            let (d, ok) = res?;
            worst.loss = worst.loss.max(d.loss);
            worst.grads = worst.grads.max(d.grads);
            worst.kv = worst.kv.max(d.kv);
            shapes_ok &= ok;
        }
        reports.push(ClassReport {
            class: "random".into(),
            trials,
            worst,
            shapes_ok,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinyModel {
        TinyModel::random(TinyConfig::new(2, 8, 16, 2), 11).unwrap()
    }

    #[test]
    fn single_window_logits_match_full() {
        let m = model();
        let tokens = [1, 5, 3, 9, 2];
        let (_, acts) = forward_full(&m, &tokens).unwrap();
        let mut cache = QkvCache::new(&m);
        let logits = forward_window(&m, &tokens, 0, &mut cache).unwrap();
        assert!(rel_err(&logits, &acts.logits) <= 1e-12);
        assert_eq!(cache.len(), tokens.len());
    }

    #[test]
    fn split_windows_concatenate_to_full_logits() {
        let m = model();
        let tokens = [4, 1, 7, 7];
        let (_, acts) = forward_full(&m, &tokens).unwrap();
        let mut cache = QkvCache::new(&m);
        let a = forward_window(&m, &tokens[..2], 0, &mut cache).unwrap();
        let b = forward_window(&m, &tokens[2..], 2, &mut cache).unwrap();
        assert!(rel_err(&Matrix::vstack(&[a, b]), &acts.logits) <= 1e-12);
    }

    #[test]
    fn desynced_cache_is_rejected() {
        let m = model();
        let mut cache = QkvCache::new(&m);
        let r = forward_window(&m, &[1, 2], 2, &mut cache);
        assert!(matches!(r, Err(Error::CacheDesync { .. })));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(forward_full(&model(), &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn single_token_has_no_loss_terms() {
        let (loss, _) = forward_full(&model(), &[3]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let logits = Matrix::zeros(3, 10);
        let l = generative_loss(&logits, &[Some(1), Some(2), Some(9)]);
        assert!((l / 3.0 - (10f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn window_losses_sum_to_full() {
        let m = model();
        let tokens = [2, 6, 1, 0];
        let (loss, _) = forward_full(&m, &tokens).unwrap();
        let mut cache = QkvCache::new(&m);
        let mut sum = 0.0;
        for (l, s) in [(0, 2), (2, 2)] {
            let logits = forward_window(&m, &tokens[l..l + s], l, &mut cache).unwrap();
            sum += generative_loss(&logits, &targets_for(&tokens, l, s));
        }
        assert!(rel_err_scalar(sum / 3.0, loss) <= 1e-14);
    }

    #[test]
    fn out_of_order_backward_window_is_rejected() {
        let m = model();
        let tokens = [1, 2, 3, 4];
        let mut cache = QkvCache::new(&m);
        forward_window(&m, &tokens, 0, &mut cache).unwrap();
        let mut accum = KvGradAccumulator::new(4, 8);
        let mut grads = LoraGrads::zeros(&m);
        let dy = Matrix::zeros(2, 8);
        let r = backward_window(&m, 1, &dy, 2, 2, &cache, &mut accum, &mut grads);
        assert!(matches!(r, Err(Error::OrderingViolation { expected: 4, got: 2 })));
    }

    #[test]
    fn window_gradient_shapes() {
        let m = TinyModel::random(TinyConfig::new(1, 16, 16, 2), 1).unwrap();
        let tokens: Vec<usize> = (0..8).collect();
        let mut cache = QkvCache::new(&m);
        forward_window(&m, &tokens, 0, &mut cache).unwrap();
        let mut accum = KvGradAccumulator::new(8, 16);
        let mut grads = LoraGrads::zeros(&m);
        let w = backward_window(&m, 0, &Matrix::zeros(2, 16), 8, 2, &cache, &mut accum, &mut grads).unwrap();
        assert_eq!(w.dq.shape(), (2, 16));
        let w = backward_window(&m, 0, &Matrix::zeros(2, 16), 6, 2, &cache, &mut accum, &mut grads).unwrap();
        assert_eq!(w.dq.shape(), (2, 16));
        assert_eq!(w.dk.shape(), (6, 16));
        assert_eq!(w.dv.shape(), (6, 16));
    }

    #[test]
    fn schedules_partition_the_sequence() {
        let s = WindowSchedule::uniform(10, 4).unwrap();
        assert_eq!(s.sizes(), &[4, 4, 2]);
        assert_eq!(s.forward_slices(), vec![(0, 4), (4, 4), (8, 2)]);
        assert_eq!(s.backward_slices(), vec![(10, 2), (8, 4), (4, 4)]);
        assert!(WindowSchedule::new(5, vec![2, 2]).is_err());
    }
}
