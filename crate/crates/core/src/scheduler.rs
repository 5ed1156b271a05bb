//! Hybrid token scheduler: iteration-level inference batching with chunked
//! prefill, topped up with finetuning tokens sized by the latency model.

use serde::{Deserialize, Serialize};

use crate::cost::{LatencyProfile, ScaledProfile};
use crate::error::{Error, Result};

pub type RequestId = u64;

/// Anything that predicts iteration latency.
pub trait Latency {
    fn latency(&self, c: u64, s: u64) -> f64;
    fn max_total_tokens(&self, budget_ms: f64) -> Option<u64>;

    fn max_finetune_tokens(&self, c: u64, budget_ms: f64) -> u64 {
        self.max_total_tokens(budget_ms).map_or(0, |n| n.saturating_sub(c))
    }
}

impl Latency for LatencyProfile {
    fn latency(&self, c: u64, s: u64) -> f64 {
        LatencyProfile::latency(self, c, s)
    }
    fn max_total_tokens(&self, budget_ms: f64) -> Option<u64> {
        LatencyProfile::max_total_tokens(self, budget_ms)
    }
}

impl Latency for ScaledProfile {
    fn latency(&self, c: u64, s: u64) -> f64 {
        ScaledProfile::latency(self, c, s)
    }
    fn max_total_tokens(&self, budget_ms: f64) -> Option<u64> {
        ScaledProfile::max_total_tokens(self, budget_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub max_batch: usize,
    pub chunk_size: u64,
    pub tpot_slo_ms: f64,
    pub ttft_slo_ms: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            max_batch: 256,
            chunk_size: 512,
            tpot_slo_ms: 50.0,
            ttft_slo_ms: 5000.0,
        }
    }
}

impl SchedulerConfig {
    /// The per-iteration latency budget.
    pub fn step_budget_ms(&self) -> f64 {
        self.tpot_slo_ms
    }

    /// A full batch of decodes must fit the step budget, or SLO safety is unattainable.
    pub fn validate(&self, profile: &dyn Latency) -> Result<()> {
        if self.max_batch == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidConfiguration("max_batch and chunk_size must be positive".into()));
        }
        if !(self.tpot_slo_ms > 0.0 && self.ttft_slo_ms > 0.0) {
            return Err(Error::InvalidConfiguration("SLOs must be positive".into()));
        }
        if profile.latency(self.max_batch as u64, 0) > self.step_budget_ms() {
            return Err(Error::InvalidConfiguration(format!(
                "a batch of {} decodes takes {:.2} ms, over the {} ms budget",
                self.max_batch,
                profile.latency(self.max_batch as u64, 0),
                self.step_budget_ms()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FtPhase {
    Forward,
    Backward { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FtProgress {
    /// Next forward window starts at `l`.
    Forward { l: usize },
    /// Next backward window of `layer` ends at `l`.
    Backward { layer: usize, l: usize },
    Done,
}

/// Progress of one finetuning mini-batch through the token-level state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub id: RequestId,
    pub tenant: u32,
    pub seq_len: usize,
    pub layers: usize,
    pub progress: FtProgress,
    pub forward_tokens: u64,
    pub backward_tokens: u64,
    pub optimizer_steps: u32,
}

impl FinetuneState {
    pub fn new(id: RequestId, tenant: u32, seq_len: usize, layers: usize) -> Self {
        Self {
            id,
            tenant,
            seq_len,
            layers,
            progress: if seq_len == 0 || layers == 0 {
                FtProgress::Done
            } else {
                FtProgress::Forward { l: 0 }
            },
            forward_tokens: 0,
            backward_tokens: 0,
            optimizer_steps: 0,
        }
    }

    pub fn phase(&self) -> Option<FtPhase> {
        match self.progress {
            FtProgress::Forward { .. } => Some(FtPhase::Forward),
            FtProgress::Backward { layer, .. } => Some(FtPhase::Backward { layer }),
            FtProgress::Done => None,
        }
    }

    /// Window start: `l_i` in forward, the window end `l_j` in backward.
    pub fn position(&self) -> usize {
        match self.progress {
            FtProgress::Forward { l } => l,
            FtProgress::Backward { l, .. } => l,
            FtProgress::Done => 0,
        }
    }

    pub fn remaining_in_phase(&self) -> u64 {
        match self.progress {
            FtProgress::Forward { l } => (self.seq_len - l) as u64,
            FtProgress::Backward { l, .. } => l as u64,
            FtProgress::Done => 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.progress == FtProgress::Done
    }

    /// Tokens a full mini-batch processes: one forward pass plus one backward pass per layer.
    pub fn total_tokens(&self) -> u64 {
        (self.seq_len * (1 + self.layers)) as u64
    }
}

/// Moves the state machine forward by `s` tokens, clipped to the current phase.
pub fn advance_finetune(state: &FinetuneState, s: u64) -> FinetuneState {
    let mut next = *state;
    let s = s.min(state.remaining_in_phase()) as usize;
    if s == 0 {
        return next;
    }
    match state.progress {
        FtProgress::Forward { l } => {
            next.forward_tokens += s as u64;
            next.progress = if l + s == state.seq_len {
                FtProgress::Backward {
                    layer: state.layers - 1,
                    l: state.seq_len,
                }
            } else {
                FtProgress::Forward { l: l + s }
            };
        }
        FtProgress::Backward { layer, l } => {
            next.backward_tokens += s as u64;
            next.progress = match (l - s, layer) {
                (0, 0) => {
                    next.optimizer_steps += 1;
                    FtProgress::Done
                }
                (0, layer) => FtProgress::Backward {
                    layer: layer - 1,
                    l: state.seq_len,
                },
                (l, layer) => FtProgress::Backward { layer, l },
            };
        }
        FtProgress::Done => {}
    }
    next
}

/// A request in the running batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Running {
    pub id: RequestId,
    /// Prompt tokens still to prefill; 0 means decoding.
    pub prefill_remaining: u64,
}

/// A request waiting for admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Queued {
    pub id: RequestId,
    pub prefill_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtWindow {
    pub request: RequestId,
    pub phase: FtPhase,
    /// `l_i` for forward windows, the end `l_j` for backward windows.
    pub start: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub admitted: Vec<RequestId>,
    pub decodes: Vec<RequestId>,
    pub prefills: Vec<(RequestId, u64)>,
    pub finetune: Vec<FtWindow>,
    pub predicted_ms: f64,
}

impl IterationPlan {
    /// Scheduled inference tokens.
    pub fn c(&self) -> u64 {
        self.decodes.len() as u64 + self.prefills.iter().map(|p| p.1).sum::<u64>()
    }

    /// Scheduled finetuning tokens.
    pub fn s(&self) -> u64 {
        self.finetune.iter().map(|w| w.tokens).sum()
    }

    pub fn has_inference(&self) -> bool {
        self.c() > 0
    }

    pub fn is_empty(&self) -> bool {
        self.c() == 0 && self.s() == 0
    }
}

/// Plans inference for one iteration: decodes for every decoding request,
/// FIFO admission up to `max_batch` (subject to `admit`), and prefill chunks
/// within the token budget of the step SLO.
pub fn plan_inference(
    running: &[Running],
    queue: &[Queued],
    profile: &dyn Latency,
    config: &SchedulerConfig,
    admit: &mut dyn FnMut(RequestId) -> bool,
) -> IterationPlan {
    let mut plan = IterationPlan::default();
    let budget_tokens = profile.max_total_tokens(config.step_budget_ms()).unwrap_or(0);
    plan.decodes = running
        .iter()
        .filter(|r| r.prefill_remaining == 0)
        .map(|r| r.id)
        .collect();
    let mut prefilling: Vec<(RequestId, u64)> = running
        .iter()
        .filter(|r| r.prefill_remaining > 0)
        .map(|r| (r.id, r.prefill_remaining))
        .collect();
    let mut batch = running.len();
    for q in queue {
        if batch >= config.max_batch || !admit(q.id) {
            break;
        }
        plan.admitted.push(q.id);
        prefilling.push((q.id, q.prefill_tokens));
        batch += 1;
    }
    let mut room = budget_tokens.saturating_sub(plan.decodes.len() as u64);
    for (id, remaining) in prefilling {
        let chunk = remaining.min(config.chunk_size).min(room);
        if chunk == 0 {
            break;
        }
        plan.prefills.push((id, chunk));
        room -= chunk;
    }
    plan.predicted_ms = profile.latency(plan.c(), 0);
    plan
}

/// Appends as many finetuning tokens of the active mini-batch's current phase
/// as the step budget allows.
pub fn attach_finetune(plan: &mut IterationPlan, ft: Option<&FinetuneState>, profile: &dyn Latency, config: &SchedulerConfig) {
    if let Some(ft) = ft {
        if let Some(phase) = ft.phase() {
            let s = profile
                .max_finetune_tokens(plan.c(), config.step_budget_ms())
                .min(ft.remaining_in_phase());
            if s > 0 {
                plan.finetune.push(FtWindow {
                    request: ft.id,
                    phase,
                    start: ft.position(),
                    tokens: s,
                });
            }
        }
    }
    plan.predicted_ms = profile.latency(plan.c(), plan.s());
}

/// The co-serving planner: [`plan_inference`] followed by [`attach_finetune`].
pub fn plan_iteration(
    running: &[Running],
    queue: &[Queued],
    ft: Option<&FinetuneState>,
    profile: &dyn Latency,
    config: &SchedulerConfig,
    admit: &mut dyn FnMut(RequestId) -> bool,
) -> IterationPlan {
    let mut plan = plan_inference(running, queue, profile, config, admit);
    attach_finetune(&mut plan, ft, profile, config);
    plan
}

/// Rejects plans whose finetuning windows break forward/backward ordering.
pub fn enforce_dependencies(plan: &IterationPlan, ft: Option<&FinetuneState>) -> Result<()> {
    let Some(first) = plan.finetune.first() else {
        return Ok(());
    };
    if plan.finetune.iter().any(|w| w.request != first.request) {
        return Err(Error::DependencyViolation("two mini-batches in one iteration".into()));
    }
    if plan.finetune.len() > 1 {
        return Err(Error::DependencyViolation("more than one window of a mini-batch in one iteration".into()));
    }
    let ft = ft.ok_or_else(|| Error::DependencyViolation(format!("window for mini-batch {} with none active", first.request)))?;
    if ft.id != first.request {
        return Err(Error::DependencyViolation(format!(
            "window for mini-batch {} while {} is active",
            first.request, ft.id
        )));
    }
    match (first.phase, ft.phase()) {
        (FtPhase::Backward { .. }, Some(FtPhase::Forward)) => Err(Error::DependencyViolation(format!(
            "backward window before the forward pass of {} completed (at {} of {})",
            ft.id,
            ft.position(),
            ft.seq_len
        ))),
        (p, Some(q)) if p == q && first.start == ft.position() && first.tokens <= ft.remaining_in_phase() => Ok(()),
        (p, q) => Err(Error::DependencyViolation(format!(
            "window {p:?}@{} does not continue state {q:?}@{}",
            first.start,
            ft.position()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> LatencyProfile {
        LatencyProfile::new(2.0, 0.05, None).unwrap()
    }

    fn cfg() -> SchedulerConfig {
        SchedulerConfig {
            tpot_slo_ms: 32.0,
            ..SchedulerConfig::default()
        }
    }

    #[test]
    fn forward_trace_three_windows() {
        let mut s = FinetuneState::new(1, 0, 8, 2);
        let mut trace = vec![s.position()];
        for w in [3, 3, 2] {
            s = advance_finetune(&s, w);
            trace.push(match s.progress {
                FtProgress::Forward { l } => l,
                FtProgress::Backward { .. } => 8,
                FtProgress::Done => unreachable!(),
            });
        }
        assert_eq!(trace, vec![0, 3, 6, 8]);
        assert_eq!(s.progress, FtProgress::Backward { layer: 1, l: 8 });
    }

    #[test]
    fn backward_one_iteration_per_layer() {
        let mut s = FinetuneState::new(1, 0, 4, 2);
        s = advance_finetune(&s, 4);
        let mut iterations = 0;
        while !s.is_done() {
            s = advance_finetune(&s, 4);
            iterations += 1;
        }
        assert_eq!(iterations, 2);
        assert_eq!(s.optimizer_steps, 1);
        assert_eq!(s.forward_tokens + s.backward_tokens, s.total_tokens());
    }

    #[test]
    fn zero_tokens_leave_state_unchanged() {
        let s = FinetuneState::new(1, 0, 4, 2);
        assert_eq!(advance_finetune(&s, 0), s);
    }

    #[test]
    fn oversized_window_is_clipped() {
        let s = advance_finetune(&FinetuneState::new(1, 0, 4, 2), 100);
        assert_eq!(s.forward_tokens, 4);
        assert_eq!(s.progress, FtProgress::Backward { layer: 1, l: 4 });
    }

    #[test]
    fn idle_inference_gives_full_budget_to_finetuning() {
        let ft = FinetuneState::new(1, 0, 4096, 2);
        let plan = plan_iteration(&[], &[], Some(&ft), &profile(), &cfg(), &mut |_| true);
        assert_eq!(plan.c(), 0);
        assert_eq!(plan.s(), profile().max_finetune_tokens(0, 32.0));
        assert!(plan.s() > 0);
    }

    #[test]
    fn saturated_budget_throttles_finetuning() {
        let ft = FinetuneState::new(1, 0, 4096, 2);
        let q = [Queued {
            id: 9,
            prefill_tokens: 5000,
        }];
        let c = SchedulerConfig {
            chunk_size: 5000,
            ..cfg()
        };
        let plan = plan_iteration(&[], &q, Some(&ft), &profile(), &c, &mut |_| true);
        assert_eq!(plan.c(), 600);
        assert_eq!(plan.s(), 0);
    }

    #[test]
    fn decodes_plus_chunked_prefill_hand_trace() {
        // budget fits 600 tokens: 2 + 0.05·600 = 32 ms
        let running: Vec<Running> = (0..3)
            .map(|id| Running {
                id,
                prefill_remaining: 0,
            })
            .collect();
        let q = [Queued {
            id: 3,
            prefill_tokens: 1024,
        }];
        let ft = FinetuneState::new(10, 0, 4096, 2);
        let plan = plan_iteration(&running, &q, Some(&ft), &profile(), &cfg(), &mut |_| true);
        assert_eq!(plan.decodes, vec![0, 1, 2]);
        assert_eq!(plan.prefills, vec![(3, 512)]);
        assert_eq!(plan.s(), 600 - 515);
        assert!(plan.predicted_ms <= 32.0);
    }

    #[test]
    fn admission_stops_at_first_rejection() {
        let q: Vec<Queued> = (0..3)
            .map(|id| Queued {
                id,
                prefill_tokens: 10,
            })
            .collect();
        let plan = plan_iteration(&[], &q, None, &profile(), &cfg(), &mut |id| id != 1);
        assert_eq!(plan.admitted, vec![0]);
    }

    #[test]
    fn dependency_checks() {
        let mut ft = FinetuneState::new(1, 0, 8, 2);
        ft = advance_finetune(&ft, 5);
        let mut plan = IterationPlan::default();
        plan.finetune.push(FtWindow {
            request: 1,
            phase: FtPhase::Backward { layer: 1 },
            start: 8,
            tokens: 2,
        });
        assert!(enforce_dependencies(&plan, Some(&ft)).is_err());

        ft = advance_finetune(&ft, 3);
        enforce_dependencies(&plan, Some(&ft)).unwrap();

        plan.finetune.push(FtWindow {
            request: 2,
            phase: FtPhase::Forward,
            start: 0,
            tokens: 2,
        });
        assert!(enforce_dependencies(&plan, Some(&ft)).is_err());
    }

    #[test]
    fn config_rejects_unsafe_batch() {
        let c = SchedulerConfig {
            max_batch: 10_000,
            ..cfg()
        };
        assert!(c.validate(&profile()).is_err());
        cfg().validate(&profile()).unwrap();
    }
}
