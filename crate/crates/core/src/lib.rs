//! Co-serving of LLM inference and parameter-efficient finetuning.
//!
//! The crate covers the graph side (parallel computation graphs, bypass
//! parallelization, gradient-graph pruning, token-level attention backward)
//! and the serving side (latency model, hybrid token scheduler, baselines,
//! fairness, workload generation and a discrete-time simulator).

pub mod attention;
pub mod baselines;
pub mod cost;
pub mod engine;
pub mod error;
pub mod graph_exec;
pub mod parallelize;
pub mod pcg;
pub mod pruning;
pub mod scheduler;
pub mod sweep;
pub mod tensor;
pub mod vtc;
pub mod workload;

pub use error::{Error, Result};
