//! Comparison policies: resource isolation, fixed and dynamic temporal
//! sharing, and spatial sharing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    Coserve,
    /// Static split: inference on `rho` of the hardware, finetuning on the rest.
    Isolate { rho: f64 },
    /// `n` inference iterations per finetuning iteration; `None` disables finetuning.
    Temporal { n: Option<u64> },
    Dts,
    Spatial { rho: f64 },
    Vtc,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfiguration(format!("unknown policy {s:?}"));
        let frac = |v: &str| -> Result<f64> {
            let rho: f64 = v.parse().map_err(|_| bad())?;
            if rho > 0.0 && rho < 1.0 {
                Ok(rho)
            } else {
                Err(Error::InvalidConfiguration(format!("split {rho} not in (0, 1)")))
            }
        };
        match s.split_once(':') {
            None => match s {
                "coserve" => Ok(Policy::Coserve),
                "dts" => Ok(Policy::Dts),
                "vtc" => Ok(Policy::Vtc),
                _ => Err(bad()),
            },
            Some(("isolate", v)) => Ok(Policy::Isolate { rho: frac(v)? }),
            Some(("spatial", v)) => Ok(Policy::Spatial { rho: frac(v)? }),
            Some(("temporal", "inf")) => Ok(Policy::Temporal { n: None }),
            Some(("temporal", v)) => match v.parse::<u64>() {
                Ok(n) if n >= 1 => Ok(Policy::Temporal { n: Some(n) }),
                _ => Err(Error::InvalidConfiguration(format!("temporal frequency {v:?} must be >= 1"))),
            },
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> String {
        p.to_string()
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Coserve => write!(f, "coserve"),
            Policy::Isolate { rho } => write!(f, "isolate:{rho}"),
            Policy::Temporal { n: Some(n) } => write!(f, "temporal:{n}"),
            Policy::Temporal { n: None } => write!(f, "temporal:inf"),
            Policy::Dts => write!(f, "dts"),
            Policy::Spatial { rho } => write!(f, "spatial:{rho}"),
            Policy::Vtc => write!(f, "vtc"),
        }
    }
}

/// Fractional hardware split with symmetric interference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialSplit {
    pub rho: f64,
    pub gamma: f64,
}

pub const DEFAULT_GAMMA: f64 = 1.15;

impl SpatialSplit {
    pub fn new(rho: f64, gamma: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidConfiguration(format!("split {rho} not in (0, 1)")));
        }
        if !(gamma >= 1.0) {
            return Err(Error::InvalidConfiguration(format!("interference {gamma} below 1")));
        }
        Ok(Self { rho, gamma })
    }

    /// Multiplier on inference latency.
    pub fn inference_factor(&self) -> f64 {
        self.gamma / self.rho
    }

    /// Multiplier on finetuning latency (inverse of its throughput share).
    pub fn finetune_factor(&self) -> f64 {
        self.gamma / (1.0 - self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtsConfig {
    pub initial_interval: f64,
    /// Previous-frequency seed for the first smoothing step.
    pub initial_prev_frequency: f64,
}

impl Default for DtsConfig {
    fn default() -> Self {
        Self {
            initial_interval: 64.0,
            initial_prev_frequency: 64.0,
        }
    }
}

/// Dynamic temporal sharing: adapts the number of inference steps between
/// finetuning phases to queue pressure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtsState {
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub r_a: f64,
    pub r_c: f64,
    /// Steps until the next switch.
    pub s: f64,
    pub f_p: f64,
    pub d: u32,
}

/// The three pressure terms.
pub fn dts_pressure(avg_queue: f64, max_queue: f64, arrival_rate: f64, completion_rate: f64) -> f64 {
    let p_q = (avg_queue / 20.0).min(1.0);
    let p_s = (max_queue / 25.0).min(0.5);
    let p_b = ((arrival_rate - completion_rate) / 8.0).max(0.0);
    p_q + p_s + p_b
}

/// Interval before stabilization and smoothing.
pub fn dts_raw_interval(p: f64) -> f64 {
    if p <= 0.8 {
        64.0
    } else if p >= 2.0 {
        512.0
    } else {
        let p_n = (p - 0.8) / 1.2;
        64.0 + p_n * 0.6 * (512.0 - 64.0)
    }
}

impl DtsState {
    pub fn new(cfg: DtsConfig) -> Self {
        Self {
            q: Vec::new(),
            b: Vec::new(),
            r_a: 0.0,
            r_c: 0.0,
            s: cfg.initial_interval,
            f_p: cfg.initial_prev_frequency,
            d: 0,
        }
    }

    /// Records one inference step; true means switch to finetuning now.
    pub fn step(&mut self, q: f64, b: f64, a: f64, c: f64) -> bool {
        self.r_a += a;
        self.r_c += c;
        self.q.push(q);
        self.b.push(b);
        self.s -= 1.0;
        if self.s <= 0.0 {
            self.d += 1;
            if self.d >= 3 {
                self.s = self.compute_next_interval();
                self.d = 0;
            } else {
                self.s = (self.f_p * 1.1).min(512.0);
            }
            self.reset_stats();
            return true;
        }
        false
    }

    pub fn compute_next_interval(&mut self) -> f64 {
        if self.q.is_empty() {
            return 64.0;
        }
        let n = self.q.len() as f64;
        let avg_queue = self.q.iter().sum::<f64>() / n;
        let max_queue = self.q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lambda = self.r_a / n;
        let mu = self.r_c / n;
        let f = dts_raw_interval(dts_pressure(avg_queue, max_queue, lambda, mu)) * 1.35;
        let f_s = (f + 2.0 * self.f_p) / 3.0;
        self.f_p = f_s;
        f_s.max(64.0 + 16.0).clamp(64.0, 512.0)
    }

    fn reset_stats(&mut self) {
        self.q.clear();
        self.b.clear();
        self.r_a = 0.0;
        self.r_c = 0.0;
    }
}

/// Fixed-frequency temporal sharing counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalState {
    pub n: Option<u64>,
    pub since_finetune: u64,
}

impl TemporalState {
    pub fn new(n: Option<u64>) -> Self {
        Self { n, since_finetune: 0 }
    }

    /// Records one inference iteration; true when a finetuning iteration is due.
    pub fn step(&mut self) -> bool {
        self.since_finetune += 1;
        match self.n {
            Some(n) if self.since_finetune >= n => {
                self.since_finetune = 0;
                true
            }
            _ => false,
        }
    }
}
