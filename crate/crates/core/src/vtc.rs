//! Virtual token counters for fair multi-tenant co-serving.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VtcWeights {
    pub wp: f64,
    pub wq: f64,
    pub wr: f64,
}

impl Default for VtcWeights {
    fn default() -> Self {
        Self { wp: 1.0, wq: 2.0, wr: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Charge {
    Admit { prompt_len: u64 },
    Decode { tokens: u64 },
    Finetune { tokens: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkKind {
    Inference,
    Finetune,
}

/// Per-tenant counters, queue membership and cumulative weighted service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantLedger {
    pub weights: VtcWeights,
    pub l_input: f64,
    pub max_tokens: f64,
    counters: BTreeMap<u32, f64>,
    /// Queued requests per tenant and kind; a tenant is in Q while any count is positive.
    queued: BTreeMap<u32, [usize; 2]>,
    last_left: Option<u32>,
    service: BTreeMap<u32, f64>,
}

impl TenantLedger {
    pub fn new(weights: VtcWeights, l_input: f64, max_tokens: f64) -> Self {
        Self {
            weights,
            l_input,
            max_tokens,
            counters: BTreeMap::new(),
            queued: BTreeMap::new(),
            last_left: None,
            service: BTreeMap::new(),
        }
    }

    /// `U = max(w_p·L_input, max(w_q, w_r)·M)`
    pub fn spread_bound(&self) -> f64 {
        (self.weights.wp * self.l_input).max(self.weights.wq.max(self.weights.wr) * self.max_tokens)
    }

    pub fn counter(&self, tenant: u32) -> f64 {
        self.counters.get(&tenant).copied().unwrap_or(0.0)
    }

    pub fn service(&self, tenant: u32) -> f64 {
        self.service.get(&tenant).copied().unwrap_or(0.0)
    }

    pub fn in_queue(&self, tenant: u32) -> bool {
        self.queued.get(&tenant).is_some_and(|q| q[0] + q[1] > 0)
    }

    pub fn has_pending(&self, tenant: u32, kind: WorkKind) -> bool {
        self.queued.get(&tenant).is_some_and(|q| q[kind as usize] > 0)
    }

    /// Tenants currently in Q.
    pub fn queued_tenants(&self) -> impl Iterator<Item = u32> + '_ {
        self.queued.iter().filter(|(_, q)| q[0] + q[1] > 0).map(|(t, _)| *t)
    }

    /// Monitoring stream: lift a rejoining tenant's counter, then enqueue.
    pub fn on_arrival(&mut self, tenant: u32, kind: WorkKind) {
        if !self.in_queue(tenant) {
            let lifted = match self.queued_tenants().map(|t| self.counter(t)).reduce(f64::min) {
                Some(min_active) => min_active,
                None => self.last_left.map_or(0.0, |l| self.counter(l)),
            };
            let c = self.counters.entry(tenant).or_insert(0.0);
            *c = c.max(lifted);
        }
        self.queued.entry(tenant).or_insert([0, 0])[kind as usize] += 1;
    }

    /// A queued request of `tenant` left Q (admitted or finished).
    pub fn on_dequeue(&mut self, tenant: u32, kind: WorkKind) -> Result<()> {
        let q = self.queued.get_mut(&tenant).filter(|q| q[kind as usize] > 0).ok_or_else(|| {
            Error::Invariant(format!("tenant {tenant} has no queued {kind:?} request"))
        })?;
        q[kind as usize] -= 1;
        if q[0] + q[1] == 0 {
            self.last_left = Some(tenant);
        }
        Ok(())
    }

    /// Tenant with the smallest counter among those with pending work of `kind`; ties go to the lowest id.
    pub fn select_next(&self, kind: WorkKind) -> Option<u32> {
        self.queued
            .iter()
            .filter(|(_, q)| q[kind as usize] > 0)
            .map(|(t, _)| (*t, self.counter(*t)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(t, _)| t)
    }

    /// Tenant with the smallest counter among those with pending work of
    /// `kind`, provided no tenant in Q has a smaller counter. Inference and
    /// finetuning requests share one queue, so a tenant ahead of someone still
    /// waiting is not served from the other resource either.
    pub fn select_fair(&self, kind: WorkKind) -> Option<u32> {
        let k = self.select_next(kind)?;
        let floor = self.queued_tenants().map(|t| self.counter(t)).reduce(f64::min)?;
        (self.counter(k) <= floor).then_some(k)
    }

    pub fn charge(&mut self, tenant: u32, event: Charge) -> f64 {
        let w = match event {
            Charge::Admit { prompt_len } => self.weights.wp * prompt_len as f64,
            Charge::Decode { tokens } => self.weights.wq * tokens as f64,
            Charge::Finetune { tokens } => self.weights.wr * tokens as f64,
        };
        *self.counters.entry(tenant).or_insert(0.0) += w;
        *self.service.entry(tenant).or_insert(0.0) += w;
        w
    }

    /// `max c_i − min c_i` over tenants in Q (0 when Q is empty).
    pub fn spread(&self) -> f64 {
        let cs: Vec<f64> = self.queued_tenants().map(|t| self.counter(t)).collect();
        match (cs.iter().copied().reduce(f64::max), cs.iter().copied().reduce(f64::min)) {
            (Some(hi), Some(lo)) => hi - lo,
            _ => 0.0,
        }
    }
}

/// Service snapshot after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u64,
    pub service: BTreeMap<u32, f64>,
    pub backlogged: BTreeSet<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub diff: f64,
    pub bound: f64,
    pub ok: bool,
}

/// `|W_f − W_g|` over checkpoints `[t1, t2]` against `2U`; f and g must be
/// backlogged at every checkpoint in the interval.
pub fn check_fairness_bound(history: &[Checkpoint], t1: usize, t2: usize, f: u32, g: u32, spread_bound: f64) -> Result<BoundCheck> {
    if t1 >= t2 || t2 >= history.len() {
        return Err(Error::InvalidConfiguration(format!("interval [{t1}, {t2}) outside history")));
    }
    if !history[t1..=t2].iter().all(|c| c.backlogged.contains(&f) && c.backlogged.contains(&g)) {
        return Err(Error::InvalidConfiguration(format!(
            "tenants {f} and {g} are not backlogged throughout the interval"
        )));
    }
    let w = |t: u32| {
        let get = |c: &Checkpoint| c.service.get(&t).copied().unwrap_or(0.0);
        get(&history[t2]) - get(&history[t1])
    };
    let diff = (w(f) - w(g)).abs();
    let bound = 2.0 * spread_bound;
    Ok(BoundCheck {
        diff,
        bound,
        ok: diff <= bound + 1e-9 * bound.max(1.0),
    })
}

/// One unit of demand in a fairness experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Demand {
    Inference { prompt: u64, gen: u64 },
    Finetune { tokens: u64 },
}

impl Demand {
    fn kind(&self) -> WorkKind {
        match self {
            Demand::Inference { .. } => WorkKind::Inference,
            Demand::Finetune { .. } => WorkKind::Finetune,
        }
    }
}

/// How a tenant submits work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arrivals {
    /// Always keeps at least `depth` requests queued, cycling through `pattern`.
    Backlogged { pattern: Vec<Demand>, depth: usize },
    /// Submits `demand` at the listed iterations.
    At { demand: Demand, iterations: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessConfig {
    pub weights: VtcWeights,
    pub l_input: u64,
    /// Token capacity of the batch (prompt plus generation of every running request).
    pub capacity: u64,
    /// Finetuning tokens per iteration.
    pub window: u64,
    pub iterations: u64,
    pub tenants: BTreeMap<u32, Arrivals>,
}

#[derive(Debug, Clone, Copy)]
struct RunningReq {
    tenant: u32,
    size: u64,
    left: u64,
}

/// Outcome of a fairness experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRun {
    pub history: Vec<Checkpoint>,
    pub spread_bound: f64,
    pub max_spread: f64,
    /// Iteration at which each `At` request was submitted and dispatched.
    pub dispatch: BTreeMap<u32, Vec<(u64, Option<u64>)>>,
    pub idle_with_pending: u64,
}

/// Runs the two streams of the fair co-serving loop over a synthetic workload.
pub fn simulate_fairness(cfg: &FairnessConfig) -> Result<FairnessRun> {
    let mut ledger = TenantLedger::new(cfg.weights, cfg.l_input as f64, cfg.capacity as f64);
    let mut queues: BTreeMap<u32, VecDeque<(u64, Demand, u64)>> = BTreeMap::new();
    let mut cursor: BTreeMap<u32, usize> = BTreeMap::new();
    let mut running: Vec<RunningReq> = Vec::new();
    let mut used = 0u64;
    let mut history = Vec::with_capacity(cfg.iterations as usize + 1);
    let mut dispatch: BTreeMap<u32, Vec<(u64, Option<u64>)>> = BTreeMap::new();
    let mut max_spread: f64 = 0.0;
    let mut idle_with_pending = 0;
    let mut seq = 0u64;

    // Backlogged tenants get their next request before the current one leaves Q.
    let refill = |t: u32,
                      it: u64,
                      ledger: &mut TenantLedger,
                      queues: &mut BTreeMap<u32, VecDeque<(u64, Demand, u64)>>,
                      cursor: &mut BTreeMap<u32, usize>,
                      seq: &mut u64| {
        if let Some(Arrivals::Backlogged { pattern, depth }) = cfg.tenants.get(&t) {
            let q = queues.entry(t).or_default();
            while q.len() < (*depth).max(1) + 1 {
                let c = cursor.entry(t).or_insert(0);
                let d = pattern[*c % pattern.len()];
                *c += 1;
                ledger.on_arrival(t, d.kind());
                q.push_back((*seq, d, it));
                *seq += 1;
            }
        }
    };

    for it in 0..cfg.iterations {
        // monitoring stream
        for (&t, arr) in &cfg.tenants {
            let q = queues.entry(t).or_default();
            match arr {
                Arrivals::Backlogged { pattern, depth } => {
                    while q.len() < (*depth).max(1) {
                        let c = cursor.entry(t).or_insert(0);
                        let d = pattern[*c % pattern.len()];
                        *c += 1;
                        ledger.on_arrival(t, d.kind());
                        q.push_back((seq, d, it));
                        seq += 1;
                    }
                }
                Arrivals::At { demand, iterations } => {
                    for _ in iterations.iter().filter(|&&i| i == it) {
                        ledger.on_arrival(t, demand.kind());
                        dispatch.entry(t).or_default().push((it, None));
                        q.push_back((seq, *demand, it));
                        seq += 1;
                    }
                }
            }
        }

        // fair inference selection
        let mut admitted_any = false;
        while let Some(k) = ledger.select_fair(WorkKind::Inference) {
            let q = &queues[&k];
            let Some(pos) = q.iter().position(|(_, d, _)| matches!(d, Demand::Inference { .. })) else {
                return Err(Error::Invariant(format!("ledger says tenant {k} has inference queued")));
            };
            let (_, d, arrived) = q[pos];
            let Demand::Inference { prompt, gen } = d else { unreachable!() };
            if used + prompt + gen > cfg.capacity {
                break;
            }
            used += prompt + gen;
            refill(k, it, &mut ledger, &mut queues, &mut cursor, &mut seq);
            queues.get_mut(&k).unwrap().remove(pos);
            ledger.on_dequeue(k, WorkKind::Inference)?;
            ledger.charge(k, Charge::Admit { prompt_len: prompt });
            running.push(RunningReq {
                tenant: k,
                size: prompt + gen,
                left: gen,
            });
            if let Some(v) = dispatch.get_mut(&k) {
                if let Some(slot) = v.iter_mut().find(|(a, d)| *a == arrived && d.is_none()) {
                    slot.1 = Some(it);
                }
            }
            admitted_any = true;
        }

        // fair finetuning token selection
        let mut s = cfg.window;
        let mut ft_any = false;
        while s > 0 {
            let Some(k) = ledger.select_fair(WorkKind::Finetune) else { break };
            let q = queues.get_mut(&k).unwrap();
            let pos = q
                .iter()
                .position(|(_, d, _)| matches!(d, Demand::Finetune { .. }))
                .ok_or_else(|| Error::Invariant(format!("ledger says tenant {k} has finetuning queued")))?;
            let Demand::Finetune { tokens } = q[pos].1 else { unreachable!() };
            let t = s.min(tokens);
            ledger.charge(k, Charge::Finetune { tokens: t });
            s -= t;
            ft_any = true;
            if t == tokens {
                refill(k, it, &mut ledger, &mut queues, &mut cursor, &mut seq);
                let q = queues.get_mut(&k).unwrap();
                let (_, _, arrived) = q.remove(pos).unwrap();
                ledger.on_dequeue(k, WorkKind::Finetune)?;
                if let Some(v) = dispatch.get_mut(&k) {
                    if let Some(slot) = v.iter_mut().find(|(a, d)| *a == arrived && d.is_none()) {
                        slot.1 = Some(it);
                    }
                }
            } else {
                q[pos].1 = Demand::Finetune { tokens: tokens - t };
            }
        }

        // decode step
        let decoded_any = !running.is_empty();
        let mut per_tenant: BTreeMap<u32, u64> = BTreeMap::new();
        for r in &mut running {
            r.left -= 1;
            *per_tenant.entry(r.tenant).or_insert(0) += 1;
        }
        for (t, n) in per_tenant {
            ledger.charge(t, Charge::Decode { tokens: n });
        }
        running.retain(|r| {
            if r.left == 0 {
                used -= r.size;
                false
            } else {
                true
            }
        });
        if !decoded_any && !admitted_any && !ft_any && ledger.queued_tenants().next().is_some() {
            idle_with_pending += 1;
        }

        max_spread = max_spread.max(ledger.spread());
        history.push(Checkpoint {
            iteration: it,
            service: ledger.service.clone(),
            backlogged: ledger.queued_tenants().collect(),
        });
    }
    Ok(FairnessRun {
        history,
        spread_bound: ledger.spread_bound(),
        max_spread,
        dispatch,
        idle_with_pending,
    })
}
