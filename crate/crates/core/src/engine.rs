//! Deterministic discrete-event co-serving simulator.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{DtsConfig, DtsState, Policy, SpatialSplit, TemporalState, DEFAULT_GAMMA};
use crate::cost::{LatencyProfile, MemoryModel};
use crate::error::{Error, Result};
use crate::scheduler::{
    advance_finetune, attach_finetune, plan_inference, FinetuneState, IterationPlan, Latency, Queued, RequestId,
    Running, SchedulerConfig,
};
use crate::vtc::{Charge, TenantLedger, VtcWeights, WorkKind};
use crate::workload::{Kind, Trace};

pub const FIDELITY_NOTE: &str =
    "backward finetuning tokens are charged through the same latency model as forward tokens (no second-stream overlap)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub policy: Policy,
    pub scheduler: SchedulerConfig,
    pub profile: LatencyProfile,
    /// Layers the finetuning backward pass walks through.
    pub ft_layers: usize,
    pub total_pages: usize,
    pub page_size: usize,
    /// Generation tokens reserved at admission on top of the prompt.
    pub growth_reservation_tokens: u64,
    /// Interference coefficient for spatial sharing.
    pub gamma: f64,
    pub dts: DtsConfig,
    pub vtc: VtcWeights,
    /// Longest prompt, used for the fairness bound.
    pub l_input: u64,
    /// Keep running after the trace until finetuning work is exhausted.
    pub drain_finetune: bool,
    pub timeline_cap: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Coserve,
            scheduler: SchedulerConfig::default(),
            profile: LatencyProfile::default(),
            ft_layers: 32,
            total_pages: 5632,
            page_size: 16,
            growth_reservation_tokens: 115,
            gamma: DEFAULT_GAMMA,
            dts: DtsConfig::default(),
            vtc: VtcWeights::default(),
            l_input: 4096,
            drain_finetune: false,
            timeline_cap: 10_000_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.ft_layers == 0 || self.page_size == 0 || self.total_pages == 0 || self.timeline_cap < 2 {
            return Err(Error::InvalidConfiguration(
                "ft_layers, page_size, total_pages must be positive and timeline_cap >= 2".into(),
            ));
        }
        match self.policy {
            Policy::Coserve | Policy::Vtc | Policy::Temporal { .. } | Policy::Dts => self.scheduler.validate(&self.profile),
            Policy::Spatial { rho } => SpatialSplit::new(rho, self.gamma).map(|_| ()),
            Policy::Isolate { rho } => SpatialSplit::new(rho, 1.0).map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub tenant: u32,
    pub arrival_ms: f64,
    pub prompt_len: u32,
    pub gen_len: u32,
    pub first_token_ms: f64,
    pub completion_ms: f64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub slo_ok: bool,
    pub evictions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub iteration: u64,
    pub time_ms: f64,
    pub latency_ms: f64,
    pub c: u64,
    pub s: u64,
    pub queue_depth: usize,
    pub running: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub requests: usize,
    pub slo_attainment: f64,
    pub inference_tokens: u64,
    pub inference_throughput_tps: f64,
    pub finetune_tokens: u64,
    pub finetune_tokens_in_horizon: f64,
    pub finetune_throughput_tps: f64,
    pub minibatches_completed: u64,
    pub eviction_pct: f64,
    pub iterations: u64,
    pub makespan_ms: f64,
    pub horizon_ms: f64,
    pub max_predicted_ms_with_inference: f64,
    pub mean_ttft_ms: f64,
    pub mean_tpot_ms: f64,
    pub tenants: BTreeMap<u32, TenantSummary>,
    pub fidelity_note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TenantSummary {
    pub requests: usize,
    pub slo_attainment: f64,
    pub inference_tokens: u64,
    pub finetune_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub requests: Vec<RequestMetrics>,
    pub timeline: Vec<TimelineRow>,
    /// Every `timeline_stride`-th iteration is kept.
    pub timeline_stride: u64,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
struct InfReq {
    tenant: u32,
    arrival_ms: f64,
    prompt_len: u32,
    gen_len: u32,
    emitted: u32,
    prefilled: u64,
    prefill_target: u64,
    first_token_ms: Option<f64>,
    completion_ms: Option<f64>,
    evictions: u32,
}

struct Applied {
    /// Tokens emitted per tenant.
    emitted: BTreeMap<u32, u64>,
    /// Tenants of evicted requests, in requeue order.
    requeued: Vec<u32>,
}

enum Mode {
    /// Finetuning shares every iteration (co-serving, VTC).
    Coserve { fair: Option<TenantLedger> },
    /// Finetuning runs as whole blocks between inference iterations.
    Temporal { counter: TemporalState },
    Dts { state: DtsState, due: bool, arrivals: u64 },
    /// Finetuning runs on its own partition with its own clock.
    Split { inference_factor: f64, finetune_factor: f64, ft_clock: f64 },
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    now: f64,
    reqs: BTreeMap<RequestId, InfReq>,
    queue: VecDeque<RequestId>,
    running: Vec<RequestId>,
    ft: VecDeque<FinetuneState>,
    mem: MemoryModel,
    mode: Mode,
    temporal_due: bool,
    iteration: u64,
    timeline: Vec<TimelineRow>,
    stride: u64,
    ft_tokens: u64,
    ft_by_tenant: BTreeMap<u32, u64>,
    ft_in_horizon: f64,
    horizon_ms: f64,
    minibatches: u64,
    max_predicted: f64,
}

/// Replays `trace` under `cfg.policy` until the trace is exhausted and all inference work has drained.
pub fn run(trace: &Trace, cfg: &SimConfig) -> Result<SimMetrics> {
    cfg.validate()?;
    trace.validate()?;
    let mut pages = cfg.total_pages;
    let mode = match cfg.policy {
        Policy::Coserve => Mode::Coserve { fair: None },
        Policy::Vtc => Mode::Coserve {
            fair: Some(TenantLedger::new(
                cfg.vtc,
                cfg.l_input as f64,
                (cfg.total_pages * cfg.page_size) as f64,
            )),
        },
        Policy::Temporal { n } => Mode::Temporal {
            counter: TemporalState::new(n),
        },
        Policy::Dts => Mode::Dts {
            state: DtsState::new(cfg.dts),
            due: false,
            arrivals: 0,
        },
        Policy::Spatial { rho } => {
            let s = SpatialSplit::new(rho, cfg.gamma)?;
            Mode::Split {
                inference_factor: s.inference_factor(),
                finetune_factor: s.finetune_factor(),
                ft_clock: 0.0,
            }
        }
        Policy::Isolate { rho } => {
            pages = ((cfg.total_pages as f64) * rho).floor() as usize;
            Mode::Split {
                inference_factor: 1.0 / rho,
                finetune_factor: 1.0 / (1.0 - rho),
                ft_clock: 0.0,
            }
        }
    };
    let horizon_ms = (trace.meta.duration_s * 1000.0).max(trace.arrivals.last().map_or(0.0, |a| a.time_ms));
    let mut e = Engine {
        cfg,
        now: 0.0,
        reqs: BTreeMap::new(),
        queue: VecDeque::new(),
        running: Vec::new(),
        ft: VecDeque::new(),
        mem: MemoryModel::new(pages, cfg.page_size)?,
        mode,
        temporal_due: false,
        iteration: 0,
        timeline: Vec::new(),
        stride: 1,
        ft_tokens: 0,
        ft_by_tenant: BTreeMap::new(),
        ft_in_horizon: 0.0,
        horizon_ms,
        minibatches: 0,
        max_predicted: 0.0,
    };
    e.simulate(trace)?;
    e.finish()
}

impl Engine<'_> {
    fn simulate(&mut self, trace: &Trace) -> Result<()> {
        let mut next = 0;
        loop {
            while next < trace.arrivals.len() && trace.arrivals[next].time_ms <= self.now {
                self.inject(next as RequestId, &trace.arrivals[next]);
                next += 1;
            }
            let next_arrival = trace.arrivals.get(next).map(|a| a.time_ms);
            let inference_active = !self.queue.is_empty() || !self.running.is_empty();
            if !inference_active && next_arrival.is_none() && !(self.cfg.drain_finetune && self.has_ft_work()) {
                break;
            }
            if !self.step()? {
                match next_arrival {
                    Some(t) => {
                        self.catch_up_split(t);
                        self.now = self.now.max(t);
                    }
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn inject(&mut self, id: RequestId, a: &crate::workload::Arrival) {
        match a.kind {
            Kind::Inference { prompt_len, gen_len } => {
                self.reqs.insert(
                    id,
                    InfReq {
                        tenant: a.tenant,
                        arrival_ms: a.time_ms,
                        prompt_len,
                        gen_len,
                        emitted: 0,
                        prefilled: 0,
                        prefill_target: prompt_len as u64,
                        first_token_ms: None,
                        completion_ms: None,
                        evictions: 0,
                    },
                );
                self.queue.push_back(id);
                if let Mode::Coserve { fair: Some(l) } = &mut self.mode {
                    l.on_arrival(a.tenant, WorkKind::Inference);
                }
                if let Mode::Dts { arrivals, .. } = &mut self.mode {
                    *arrivals += 1;
                }
            }
            Kind::Finetune { seq_len } => {
                self.ft.push_back(FinetuneState::new(id, a.tenant, seq_len as usize, self.cfg.ft_layers));
                if let Mode::Coserve { fair: Some(l) } = &mut self.mode {
                    l.on_arrival(a.tenant, WorkKind::Finetune);
                }
            }
        }
    }

    fn has_ft_work(&self) -> bool {
        !self.ft.is_empty()
    }

    fn running_views(&self) -> Vec<Running> {
        self.running
            .iter()
            .map(|id| {
                let r = &self.reqs[id];
                Running {
                    id: *id,
                    prefill_remaining: r.prefill_target - r.prefilled,
                }
            })
            .collect()
    }

    fn queue_views(&self) -> Vec<Queued> {
        self.queue
            .iter()
            .map(|id| Queued {
                id: *id,
                prefill_tokens: self.reqs[id].prefill_target,
            })
            .collect()
    }

    fn check_fits(&self) -> Result<()> {
        if self.running.is_empty() {
            if let Some(id) = self.queue.front() {
                let need = self.reqs[id].prefill_target as usize + self.cfg.growth_reservation_tokens as usize;
                if self.mem.pages_for(need) > self.mem.total_pages {
                    return Err(Error::InvalidConfiguration(format!(
                        "request {id} needs {} pages, pool has {}",
                        self.mem.pages_for(need),
                        self.mem.total_pages
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plans inference with FIFO admission.
    fn plan_fifo(&mut self, profile: &dyn Latency) -> IterationPlan {
        let running = self.running_views();
        let queue = self.queue_views();
        let growth = self.cfg.growth_reservation_tokens as usize;
        let mem = &mut self.mem;
        let reqs = &self.reqs;
        let plan = plan_inference(&running, &queue, profile, &self.cfg.scheduler, &mut |id| {
            mem.try_admit(id, reqs[&id].prefill_target as usize, growth)
        });
        for _ in &plan.admitted {
            let id = self.queue.pop_front().expect("admitted from queue");
            self.running.push(id);
        }
        plan
    }

    /// Admits by minimum tenant counter, then plans inference over the batch.
    fn plan_fair(&mut self, ledger: &mut TenantLedger) -> Result<IterationPlan> {
        let growth = self.cfg.growth_reservation_tokens as usize;
        let mut admitted = Vec::new();
        while self.running.len() < self.cfg.scheduler.max_batch {
            let Some(k) = ledger.select_fair(WorkKind::Inference) else { break };
            let pos = self
                .queue
                .iter()
                .position(|id| self.reqs[id].tenant == k)
                .ok_or_else(|| Error::Invariant(format!("tenant {k} has no queued request")))?;
            let id = self.queue[pos];
            let target = self.reqs[&id].prefill_target;
            if !self.mem.try_admit(id, target as usize, growth) {
                break;
            }
            self.queue.remove(pos);
            self.running.push(id);
            ledger.on_dequeue(k, WorkKind::Inference)?;
            ledger.charge(k, Charge::Admit { prompt_len: target });
            admitted.push(id);
        }
        let running = self.running_views();
        let mut plan = plan_inference(&running, &[], &self.cfg.profile, &self.cfg.scheduler, &mut |_| false);
        plan.admitted = admitted;
        Ok(plan)
    }

    /// Runs one iteration; false if there was nothing to do.
    fn step(&mut self) -> Result<bool> {
        self.check_fits()?;
        let cfg = self.cfg;
        let budget = cfg.scheduler.step_budget_ms();
        let mut mode = std::mem::replace(&mut self.mode, Mode::Coserve { fair: None });
        let result = (|| -> Result<bool> {
            match &mut mode {
                Mode::Coserve { fair } => {
                    let (mut plan, ft_idx) = match fair {
                        None => {
                            let plan = self.plan_fifo(&cfg.profile);
                            (plan, if self.ft.is_empty() { None } else { Some(0) })
                        }
                        Some(ledger) => {
                            let plan = self.plan_fair(ledger)?;
                            let idx = ledger
                                .select_fair(WorkKind::Finetune)
                                .and_then(|k| self.ft.iter().position(|f| f.tenant == k));
                            (plan, idx)
                        }
                    };
                    attach_finetune(&mut plan, ft_idx.map(|i| &self.ft[i]), &cfg.profile, &cfg.scheduler);
                    if plan.is_empty() {
                        return Ok(false);
                    }
                    if plan.has_inference() && plan.predicted_ms > budget + 1e-9 {
                        return Err(Error::Invariant(format!(
                            "iteration {} predicted {:.3} ms over the {budget} ms budget",
                            self.iteration, plan.predicted_ms
                        )));
                    }
                    if plan.has_inference() {
                        self.max_predicted = self.max_predicted.max(plan.predicted_ms);
                    }
                    if let (Some(i), Some(w)) = (ft_idx, plan.finetune.first()) {
                        crate::scheduler::enforce_dependencies(&plan, Some(&self.ft[i]))?;
                        let tenant = self.ft[i].tenant;
                        if let Some(ledger) = fair {
                            ledger.charge(tenant, Charge::Finetune { tokens: w.tokens });
                        }
                    }
                    let latency = plan.predicted_ms;
                    let applied = self.apply_inference(&plan, latency)?;
                    if let Some(ledger) = fair {
                        for (t, n) in applied.emitted {
                            ledger.charge(t, Charge::Decode { tokens: n });
                        }
                        for t in applied.requeued {
                            ledger.on_arrival(t, WorkKind::Inference);
                        }
                    }
                    if let Some(i) = ft_idx {
                        let s = plan.s();
                        if s > 0 {
                            self.advance_ft(i, s, latency, fair.as_mut())?;
                        }
                    }
                    self.log(latency, plan.c(), plan.s());
                    Ok(true)
                }
                Mode::Temporal { counter } => {
                    let inference_active = !self.queue.is_empty() || !self.running.is_empty();
                    let idle_ft = !inference_active && counter.n.is_some();
                    if (self.temporal_due || idle_ft) && self.has_ft_work() {
                        self.temporal_due = false;
                        self.ft_block()?;
                        return Ok(true);
                    }
                    if !inference_active {
                        return Ok(false);
                    }
                    let plan = self.plan_fifo(&cfg.profile);
                    if plan.is_empty() {
                        return Ok(false);
                    }
                    self.apply_inference(&plan, plan.predicted_ms)?;
                    self.log(plan.predicted_ms, plan.c(), 0);
                    if counter.step() {
                        self.temporal_due = true;
                    }
                    Ok(true)
                }
                Mode::Dts { state, due, arrivals } => {
                    let inference_active = !self.queue.is_empty() || !self.running.is_empty();
                    if (*due || !inference_active) && self.has_ft_work() {
                        *due = false;
                        self.ft_block()?;
                        return Ok(true);
                    }
                    if !inference_active {
                        return Ok(false);
                    }
                    let plan = self.plan_fifo(&cfg.profile);
                    if plan.is_empty() {
                        return Ok(false);
                    }
                    let before = self.completed();
                    self.apply_inference(&plan, plan.predicted_ms)?;
                    self.log(plan.predicted_ms, plan.c(), 0);
                    let completions = self.completed() - before;
                    let q = self.queue.len() as f64;
                    let b = self.running.len() as f64;
                    if state.step(q, b, *arrivals as f64, completions as f64) {
                        *due = true;
                    }
                    *arrivals = 0;
                    Ok(true)
                }
                Mode::Split {
                    inference_factor,
                    finetune_factor,
                    ft_clock,
                } => {
                    let profile = cfg.profile.scaled(*inference_factor);
                    let inference_active = !self.queue.is_empty() || !self.running.is_empty();
                    if !inference_active {
                        return Ok(false);
                    }
                    let plan = self.plan_fifo(&profile);
                    if plan.is_empty() {
                        return Ok(false);
                    }
                    let latency = profile.latency(plan.c(), 0);
                    self.apply_inference(&plan, latency)?;
                    self.log(latency, plan.c(), 0);
                    let target = self.now;
                    self.run_partition(ft_clock, *finetune_factor, target)?;
                    Ok(true)
                }
            }
        })();
        self.mode = mode;
        result
    }

    fn completed(&self) -> usize {
        self.reqs.values().filter(|r| r.completion_ms.is_some()).count()
    }

    /// Advances the separate finetuning partition up to `until`.
    fn run_partition(&mut self, ft_clock: &mut f64, factor: f64, until: f64) -> Result<()> {
        let budget = self.cfg.scheduler.step_budget_ms();
        while *ft_clock < until {
            let Some(ft) = self.ft.front() else {
                *ft_clock = until;
                break;
            };
            let s = self
                .cfg
                .profile
                .max_finetune_tokens(0, budget)
                .max(1)
                .min(ft.remaining_in_phase());
            let latency = self.cfg.profile.latency(0, s) * factor;
            let tenant = ft.tenant;
            *ft_clock += latency;
            let end = *ft_clock;
            self.credit_ft(tenant, s, end - latency, end);
            self.advance_front(0, s)?;
        }
        Ok(())
    }

    fn catch_up_split(&mut self, until: f64) {
        let mut mode = std::mem::replace(&mut self.mode, Mode::Coserve { fair: None });
        if let Mode::Split {
            finetune_factor,
            ft_clock,
            ..
        } = &mut mode
        {
            if *ft_clock < self.now {
                *ft_clock = self.now;
            }
            let _ = self.run_partition(ft_clock, *finetune_factor, until);
        }
        self.mode = mode;
    }

    /// Runs the whole remaining mini-batch at the queue head as one iteration.
    fn ft_block(&mut self) -> Result<()> {
        let ft = self.ft.front().copied().expect("finetuning work present");
        let remaining = ft.total_tokens() - ft.forward_tokens - ft.backward_tokens;
        let latency = self.cfg.profile.latency(0, remaining);
        let start = self.now;
        self.now += latency;
        self.credit_ft(ft.tenant, remaining, start, self.now);
        let mut st = ft;
        while !st.is_done() {
            st = advance_finetune(&st, st.remaining_in_phase());
        }
        if st.forward_tokens + st.backward_tokens != st.total_tokens() {
            return Err(Error::Invariant("finetuning token accounting".into()));
        }
        self.ft.pop_front();
        self.minibatches += 1;
        self.log(latency, 0, remaining);
        Ok(())
    }

    fn credit_ft(&mut self, tenant: u32, tokens: u64, start: f64, end: f64) {
        self.ft_tokens += tokens;
        *self.ft_by_tenant.entry(tenant).or_insert(0) += tokens;
        let inside = if end <= self.horizon_ms {
            1.0
        } else if start >= self.horizon_ms {
            0.0
        } else {
            (self.horizon_ms - start) / (end - start)
        };
        self.ft_in_horizon += tokens as f64 * inside;
    }

    fn advance_ft(&mut self, idx: usize, s: u64, latency: f64, fair: Option<&mut TenantLedger>) -> Result<()> {
        let end = self.now;
        self.credit_ft(self.ft[idx].tenant, s, end - latency, end);
        let done = self.advance_front(idx, s)?;
        if let (Some((tenant, _)), Some(ledger)) = (done, fair) {
            ledger.on_dequeue(tenant, WorkKind::Finetune)?;
        }
        Ok(())
    }

    /// Advances `self.ft[idx]`; returns the tenant if the mini-batch completed.
    fn advance_front(&mut self, idx: usize, s: u64) -> Result<Option<(u32, RequestId)>> {
        let next = advance_finetune(&self.ft[idx], s);
        self.ft[idx] = next;
        if next.is_done() {
            if next.forward_tokens + next.backward_tokens != next.total_tokens() {
                return Err(Error::Invariant(format!("mini-batch {} token accounting", next.id)));
            }
            self.ft.remove(idx);
            self.minibatches += 1;
            return Ok(Some((next.tenant, next.id)));
        }
        Ok(None)
    }

    /// Advances the clock by `latency` and applies decodes and prefill chunks.
    fn apply_inference(&mut self, plan: &IterationPlan, latency: f64) -> Result<Applied> {
        if !(latency > 0.0) {
            return Err(Error::Invariant("non-positive iteration latency".into()));
        }
        self.now += latency;
        let now = self.now;
        let mut emitted: BTreeMap<u32, u64> = BTreeMap::new();
        let mut finished = Vec::new();
        let mut evicted = Vec::new();
        let mut requeued = Vec::new();
        for &(id, chunk) in &plan.prefills {
            let r = self.reqs.get_mut(&id).expect("known request");
            r.prefilled += chunk;
            if r.prefilled == r.prefill_target {
                r.emitted += 1;
                r.first_token_ms.get_or_insert(now);
                *emitted.entry(r.tenant).or_insert(0) += 1;
                if r.emitted >= r.gen_len {
                    finished.push(id);
                }
            }
        }
        for &id in &plan.decodes {
            let r = self.reqs.get_mut(&id).expect("known request");
            r.emitted += 1;
            *emitted.entry(r.tenant).or_insert(0) += 1;
            if r.emitted >= r.gen_len {
                finished.push(id);
                continue;
            }
            let tokens = (r.prompt_len + r.emitted) as usize;
            if !self.mem.grow_to(id, tokens) {
                evicted.push(id);
            }
        }
        for id in finished {
            let r = self.reqs.get_mut(&id).unwrap();
            r.completion_ms = Some(now);
            self.mem.release(id);
            self.running.retain(|x| *x != id);
        }
        for id in evicted.into_iter().rev() {
            let r = self.reqs.get_mut(&id).unwrap();
            r.evictions += 1;
            r.prefilled = 0;
            r.prefill_target = (r.prompt_len + r.emitted) as u64;
            self.mem.release(id);
            self.running.retain(|x| *x != id);
            self.queue.push_front(id);
            requeued.push(r.tenant);
        }
        self.mem.check()?;
        Ok(Applied { emitted, requeued })
    }

    fn log(&mut self, latency: f64, c: u64, s: u64) {
        let row = TimelineRow {
            iteration: self.iteration,
            time_ms: self.now,
            latency_ms: latency,
            c,
            s,
            queue_depth: self.queue.len(),
            running: self.running.len(),
        };
        if self.iteration.is_multiple_of(self.stride) {
            self.timeline.push(row);
            if self.timeline.len() >= self.cfg.timeline_cap {
                let mut keep = 0;
                self.timeline.retain(|_| {
                    keep += 1;
                    keep % 2 == 1
                });
                self.stride *= 2;
            }
        }
        self.iteration += 1;
    }

    fn finish(self) -> Result<SimMetrics> {
        let cfg = self.cfg;
        let mut requests = Vec::with_capacity(self.reqs.len());
        for (&id, r) in &self.reqs {
            let (Some(first), Some(done)) = (r.first_token_ms, r.completion_ms) else {
                return Err(Error::Invariant(format!("request {id} did not complete")));
            };
            if r.emitted != r.gen_len {
                return Err(Error::Invariant(format!("request {id} emitted {} of {}", r.emitted, r.gen_len)));
            }
            let ttft = first - r.arrival_ms;
            let tpot = if r.gen_len > 1 {
                (done - first) / (r.gen_len - 1) as f64
            } else {
                0.0
            };
            let slo_ok = tpot <= cfg.scheduler.tpot_slo_ms + 1e-9 && ttft <= cfg.scheduler.ttft_slo_ms;
            requests.push(RequestMetrics {
                id,
                tenant: r.tenant,
                arrival_ms: r.arrival_ms,
                prompt_len: r.prompt_len,
                gen_len: r.gen_len,
                first_token_ms: first,
                completion_ms: done,
                ttft_ms: ttft,
                tpot_ms: tpot,
                slo_ok,
                evictions: r.evictions,
            });
        }
        let n = requests.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let mean = |f: &dyn Fn(&RequestMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                requests.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let inference_tokens: u64 = requests.iter().map(|r| r.gen_len as u64).sum();
        let makespan = self.now;
        let per_s = |x: f64, ms: f64| if ms > 0.0 { x / (ms / 1000.0) } else { 0.0 };
        let mut tenants: BTreeMap<u32, TenantSummary> = BTreeMap::new();
        for r in &requests {
            let t = tenants.entry(r.tenant).or_default();
            t.requests += 1;
            t.slo_attainment += r.slo_ok as u8 as f64;
            t.inference_tokens += r.gen_len as u64;
        }
        for t in tenants.values_mut() {
            t.slo_attainment /= t.requests as f64;
        }
        for (&tenant, &tokens) in &self.ft_by_tenant {
            tenants.entry(tenant).or_default().finetune_tokens = tokens;
        }
        let summary = Summary {
            policy: cfg.policy.to_string(),
            requests: n,
            slo_attainment: frac(requests.iter().filter(|r| r.slo_ok).count()),
            inference_tokens,
            inference_throughput_tps: per_s(inference_tokens as f64, makespan),
            finetune_tokens: self.ft_tokens,
            finetune_tokens_in_horizon: self.ft_in_horizon,
            finetune_throughput_tps: per_s(self.ft_in_horizon, self.horizon_ms),
            minibatches_completed: self.minibatches,
            eviction_pct: 100.0 * frac(requests.iter().filter(|r| r.evictions > 0).count()),
            iterations: self.iteration,
            makespan_ms: makespan,
            horizon_ms: self.horizon_ms,
            max_predicted_ms_with_inference: self.max_predicted,
            mean_ttft_ms: mean(&|r| r.ttft_ms),
            mean_tpot_ms: mean(&|r| r.tpot_ms),
            tenants,
            fidelity_note: FIDELITY_NOTE.into(),
        };
        Ok(SimMetrics {
            requests,
            timeline: self.timeline,
            timeline_stride: self.stride,
            summary,
        })
    }
}

impl SimMetrics {
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.requests {
            wr.serialize(r)?;
        }
        if self.requests.is_empty() {
            wr.write_record([
                "id",
                "tenant",
                "arrival_ms",
                "prompt_len",
                "gen_len",
                "first_token_ms",
                "completion_ms",
                "ttft_ms",
                "tpot_ms",
                "slo_ok",
                "evictions",
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_timeline_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.timeline {
            wr.serialize(r)?;
        }
        if self.timeline.is_empty() {
            wr.write_record(["iteration", "time_ms", "latency_ms", "c", "s", "queue_depth", "running"])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `metrics.csv`, `timeline.csv` and `summary.json` (with `config` echoed).
    pub fn write_outputs<C: Serialize>(&self, dir: &Path, config: &C) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_metrics_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        self.write_timeline_csv(std::fs::File::create(dir.join("timeline.csv"))?)?;
        let doc = serde_json::json!({
            "config": config,
            "summary": self.summary,
            "timeline_stride": self.timeline_stride,
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}
