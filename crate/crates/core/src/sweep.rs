//! Independent simulation runs across rate points and policies.

use serde::{Deserialize, Serialize};

use crate::baselines::Policy;
use crate::engine::{run, SimConfig, Summary};
use crate::error::{Error, Result};
use crate::workload::{generate, TraceConfig};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

pub fn map_seq<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rate_rps: f64,
    pub seed: u64,
    pub policy: String,
    pub slo_attainment: f64,
    pub inference_throughput_tps: f64,
    pub finetune_throughput_tps: f64,
    pub eviction_pct: f64,
    pub minibatches_completed: u64,
}

impl ComparisonRow {
    fn new(rate_rps: f64, seed: u64, s: &Summary) -> Self {
        Self {
            rate_rps,
            seed,
            policy: s.policy.clone(),
            slo_attainment: s.slo_attainment,
            inference_throughput_tps: s.inference_throughput_tps,
            finetune_throughput_tps: s.finetune_throughput_tps,
            eviction_pct: s.eviction_pct,
            minibatches_completed: s.minibatches_completed,
        }
    }
}

/// Runs every policy on the trace generated for every (rate, seed) pair.
/// Rows are ordered by rate, then seed, then policy as given.
pub fn compare(
    trace: &TraceConfig,
    rates: &[f64],
    seeds: &[u64],
    policies: &[Policy],
    base: &SimConfig,
) -> Result<Vec<ComparisonRow>> {
    if policies.is_empty() || rates.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfiguration("compare needs policies, rates and seeds".into()));
    }
    let mut points = Vec::new();
    for &rate in rates {
        for &seed in seeds {
            for &policy in policies {
                points.push((rate, seed, policy));
            }
        }
    }
    let rows = map(&points, |&(rate, seed, policy)| -> Result<ComparisonRow> {
        let t = generate(&TraceConfig {
            seed,
            rate_rps: rate,
            ..*trace
        })?;
        let m = run(
            &t,
            &SimConfig {
                policy,
                seed,
                ..*base
            },
        )?;
        Ok(ComparisonRow::new(rate, seed, &m.summary))
    });
    rows.into_iter().collect()
}

pub fn write_comparison_csv<W: std::io::Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        assert_eq!(map(&xs, |x| x * x), map_seq(&xs, |x| x * x));
    }

    #[test]
    fn single_policy_gives_one_row_per_rate() {
        let tc = TraceConfig {
            duration_s: 5.0,
            ..TraceConfig::default()
        };
        let rows = compare(&tc, &[2.0, 4.0], &[1], &[Policy::Coserve], &SimConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rate_rps, 2.0);
        assert_eq!(rows[1].policy, "coserve");
    }

    #[test]
    fn empty_policy_list_is_rejected() {
        assert!(compare(&TraceConfig::default(), &[1.0], &[0], &[], &SimConfig::default()).is_err());
    }
}
