//! Iteration latency model and paged KV-cache memory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear iteration latency:
/// `f(c, s) = t0 + b·min(n, k) + 2b·max(0, n − k)` with `n = c + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub t0_ms: f64,
    pub slope_ms_per_token: f64,
    /// `None` means the slope never doubles.
    pub knee_tokens: Option<u64>,
    #[serde(default = "one")]
    pub degree: u32,
}

fn one() -> u32 {
    1
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            t0_ms: 8.0,
            slope_ms_per_token: 0.05,
            knee_tokens: Some(512),
            degree: 1,
        }
    }
}

impl LatencyProfile {
    pub fn new(t0_ms: f64, slope_ms_per_token: f64, knee_tokens: Option<u64>) -> Result<Self> {
        let p = Self {
            t0_ms,
            slope_ms_per_token,
            knee_tokens,
            degree: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0_ms > 0.0 && self.t0_ms.is_finite()) {
            return Err(Error::InvalidConfiguration("t0_ms must be positive".into()));
        }
        if !(self.slope_ms_per_token > 0.0 && self.slope_ms_per_token.is_finite()) {
            return Err(Error::InvalidConfiguration("slope_ms_per_token must be positive".into()));
        }
        if self.degree == 0 {
            return Err(Error::InvalidConfiguration("degree must be positive".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    /// Predicted iteration latency in ms for `c` inference and `s` finetuning tokens.
    pub fn latency(&self, c: u64, s: u64) -> f64 {
        let n = c + s;
        let b = self.slope_ms_per_token;
        match self.knee_tokens {
            Some(k) if n > k => self.t0_ms + b * k as f64 + 2.0 * b * (n - k) as f64,
            _ => self.t0_ms + b * n as f64,
        }
    }

    /// Largest `s` with `latency(c, s) ≤ budget_ms`; 0 when even `s = 0` violates.
    pub fn max_finetune_tokens(&self, c: u64, budget_ms: f64) -> u64 {
        self.max_total_tokens(budget_ms).map_or(0, |n| n.saturating_sub(c))
    }

    /// Largest total `n` with `latency(n, 0) ≤ budget_ms`.
    pub fn max_total_tokens(&self, budget_ms: f64) -> Option<u64> {
        if self.latency(0, 0) > budget_ms {
            return None;
        }
        let b = self.slope_ms_per_token;
        let spare = budget_ms - self.t0_ms;
        let guess = match self.knee_tokens {
            Some(k) if spare > b * k as f64 => k as f64 + (spare - b * k as f64) / (2.0 * b),
            _ => spare / b,
        };
        let mut n = guess.floor().max(0.0) as u64;
        // The closed form can be off by one ulp-sized step either way.
        while n > 0 && self.latency(n, 0) > budget_ms {
            n -= 1;
        }
        while self.latency(n + 1, 0) <= budget_ms {
            n += 1;
        }
        Some(n)
    }

    /// The same profile on a fraction of the hardware with an interference factor.
    pub fn scaled(&self, factor: f64) -> ScaledProfile {
        ScaledProfile {
            base: *self,
            factor,
        }
    }
}

/// A profile whose latencies are multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledProfile {
    pub base: LatencyProfile,
    pub factor: f64,
}

impl ScaledProfile {
    pub fn latency(&self, c: u64, s: u64) -> f64 {
        self.base.latency(c, s) * self.factor
    }

    pub fn max_total_tokens(&self, budget_ms: f64) -> Option<u64> {
        self.base.max_total_tokens(budget_ms / self.factor)
    }
}

/// Paged KV-cache pool with per-request page ownership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub total_pages: usize,
    pub page_size: usize,
    free_pages: usize,
    /// Request id -> pages held.
    held: BTreeMap<u64, usize>,
    pub finetune_activation_bytes: u64,
    pub static_weight_bytes: u64,
}

impl MemoryModel {
    pub fn new(total_pages: usize, page_size: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(Error::InvalidConfiguration("page size must be positive".into()));
        }
        Ok(Self {
            total_pages,
            page_size,
            free_pages: total_pages,
            held: BTreeMap::new(),
            finetune_activation_bytes: 0,
            static_weight_bytes: 0,
        })
    }

    pub fn pages_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.page_size)
    }

    pub fn free_pages(&self) -> usize {
        self.free_pages
    }

    pub fn used_pages(&self) -> usize {
        self.total_pages - self.free_pages
    }

    pub fn held_by(&self, id: u64) -> usize {
        self.held.get(&id).copied().unwrap_or(0)
    }

    /// Token capacity of the pages currently held by `id`.
    pub fn capacity_of(&self, id: u64) -> usize {
        self.held_by(id) * self.page_size
    }

    /// Reserves pages for the whole prompt plus `growth_tokens`; all or nothing.
    pub fn try_admit(&mut self, id: u64, prompt_tokens: usize, growth_tokens: usize) -> bool {
        let need = self.pages_for(prompt_tokens + growth_tokens);
        if need > self.free_pages {
            return false;
        }
        self.free_pages -= need;
        *self.held.entry(id).or_insert(0) += need;
        true
    }

    /// Makes room for `tokens` total tokens of `id`, taking pages from the pool.
    /// Returns false if the pool ran out (the caller evicts).
    pub fn grow_to(&mut self, id: u64, tokens: usize) -> bool {
        let need = self.pages_for(tokens);
        let have = self.held_by(id);
        if need <= have {
            return true;
        }
        let extra = need - have;
        if extra > self.free_pages {
            return false;
        }
        self.free_pages -= extra;
        *self.held.entry(id).or_insert(0) += extra;
        true
    }

    pub fn release(&mut self, id: u64) {
        if let Some(p) = self.held.remove(&id) {
            self.free_pages += p;
        }
    }

    pub fn check(&self) -> Result<()> {
        let held: usize = self.held.values().sum();
        if held + self.free_pages != self.total_pages {
            return Err(Error::Invariant(format!(
                "page accounting: {held} held + {} free != {}",
                self.free_pages, self.total_pages
            )));
        }
        Ok(())
    }
}
