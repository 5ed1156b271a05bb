use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use coserve_core::cost::LatencyProfile;
use coserve_core::engine::SimConfig;
use coserve_core::workload::{Trace, TraceConfig};

/// Everything a `run` needs; echoed into `summary.json` with defaults resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Trace CSV; when absent the trace is generated from `trace`.
    pub trace_path: Option<PathBuf>,
    /// Latency profile JSON; overrides `sim.profile`.
    pub profile_path: Option<PathBuf>,
    pub trace: TraceConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Resolves file references and checks every parameter.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(p) = &self.profile_path {
            self.sim.profile = LatencyProfile::from_file(p).with_context(|| format!("profile {}", p.display()))?;
        }
        if let Some(p) = &self.trace_path {
            if !p.is_file() {
                bail!("trace file {} does not exist", p.display());
            }
        }
        self.sim.validate()?;
        Ok(())
    }

    pub fn load_trace(&self) -> Result<Trace> {
        match &self.trace_path {
            Some(p) => Trace::from_file(p).with_context(|| format!("trace {}", p.display())),
            None => Ok(coserve_core::workload::generate(&self.trace)?),
        }
    }
}

/// Generation tokens reserved at admission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Growth {
    Tokens(u64),
    /// The generation-length cap.
    Full,
    /// Mean of the generation-length distribution.
    Expected,
    /// Half the mean.
    Half,
}

impl FromStr for Growth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Growth::Full),
            "expected" => Ok(Growth::Expected),
            "half" => Ok(Growth::Half),
            _ => s
                .parse()
                .map(Growth::Tokens)
                .map_err(|_| format!("expected a token count, full, expected or half; got {s:?}")),
        }
    }
}

impl Growth {
    pub fn tokens(self, trace: &TraceConfig) -> u64 {
        let mean = trace.generation.mean();
        match self {
            Growth::Tokens(n) => n,
            Growth::Full => trace.generation.max as u64,
            Growth::Expected => mean.round() as u64,
            Growth::Half => (0.5 * mean).round() as u64,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    /// Trace length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Mean inference arrival rate (requests/s).
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub burst_period: Option<f64>,
    /// Relative rate swing in [0, 1].
    #[arg(long)]
    pub burst_amplitude: Option<f64>,
    #[arg(long)]
    pub tenants: Option<u32>,
    /// Finetuning sequences available at time 0.
    #[arg(long)]
    pub ft_sequences: Option<u32>,
}

impl TraceArgs {
    pub fn apply(&self, t: &mut TraceConfig) {
        if let Some(v) = self.duration {
            t.duration_s = v;
        }
        if let Some(v) = self.rate {
            t.rate_rps = v;
        }
        if let Some(v) = self.burst_period {
            t.burst.period_s = v;
        }
        if let Some(v) = self.burst_amplitude {
            t.burst.amplitude = v;
        }
        if let Some(v) = self.tenants {
            t.tenants = v;
        }
        if let Some(v) = self.ft_sequences {
            t.finetune.sequences = v;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// coserve, isolate:<rho>, temporal:<n|inf>, dts, spatial:<rho> or vtc.
    #[arg(long)]
    pub policy: Option<coserve_core::baselines::Policy>,
    /// Latency profile JSON {t0_ms, slope_ms_per_token, knee_tokens}.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub tpot_slo: Option<f64>,
    #[arg(long)]
    pub ttft_slo: Option<f64>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    /// Prefill chunk size in tokens.
    #[arg(long)]
    pub chunk: Option<u64>,
    /// KV cache pages.
    #[arg(long)]
    pub pages: Option<usize>,
    #[arg(long)]
    pub page_size: Option<usize>,
    /// Tokens, or one of full, expected, half.
    #[arg(long)]
    pub growth: Option<Growth>,
    /// Model depth walked by the finetuning backward pass.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Spatial-sharing interference coefficient.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub wp: Option<f64>,
    #[arg(long)]
    pub wq: Option<f64>,
    #[arg(long)]
    pub wr: Option<f64>,
    /// Keep simulating after the trace until finetuning work is exhausted.
    #[arg(long)]
    pub drain_finetune: bool,
}

impl SimArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sim;
        if let Some(v) = self.policy {
            s.policy = v;
        }
        if let Some(v) = &self.profile {
            cfg.profile_path = Some(v.clone());
        }
        if let Some(v) = self.tpot_slo {
            s.scheduler.tpot_slo_ms = v;
        }
        if let Some(v) = self.ttft_slo {
            s.scheduler.ttft_slo_ms = v;
        }
        if let Some(v) = self.max_batch {
            s.scheduler.max_batch = v;
        }
        if let Some(v) = self.chunk {
            s.scheduler.chunk_size = v;
        }
        if let Some(v) = self.pages {
            s.total_pages = v;
        }
        if let Some(v) = self.page_size {
            s.page_size = v;
        }
        if let Some(v) = self.growth {
            s.growth_reservation_tokens = v.tokens(&cfg.trace);
        }
        if let Some(v) = self.layers {
            s.ft_layers = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = self.wp {
            s.vtc.wp = v;
        }
        if let Some(v) = self.wq {
            s.vtc.wq = v;
        }
        if let Some(v) = self.wr {
            s.vtc.wr = v;
        }
        if self.drain_finetune {
            s.drain_finetune = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_presets_follow_the_generation_distribution() {
        let t = TraceConfig::default();
        assert_eq!(Growth::Full.tokens(&t), 1024);
        assert_eq!(Growth::Expected.tokens(&t), 115);
        assert_eq!(Growth::Half.tokens(&t), 58);
        assert_eq!("17".parse::<Growth>().unwrap(), Growth::Tokens(17));
        assert!("most".parse::<Growth>().is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"sim": {"policy": "temporal:64"}, "trace": {"rate_rps": 9}}"#).unwrap();
        assert_eq!(c.sim.policy.to_string(), "temporal:64");
        assert_eq!(c.sim.total_pages, SimConfig::default().total_pages);
        assert_eq!(c.trace.rate_rps, 9.0);
        assert_eq!(c.trace.duration_s, TraceConfig::default().duration_s);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sim": {}, "bogus": 1}"#).is_err());
    }
}
