mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{RunConfig, SimArgs, TraceArgs};
use coserve_core::attention::{verify_token_level, TinyConfig};
use coserve_core::baselines::Policy;
use coserve_core::parallelize::{enumerate_candidates, price, select_best, Boundary, EnumerationOptions, MachineSpec};
use coserve_core::pcg::PeftModel;
use coserve_core::pruning::{
    account_memory_windowed, build_mlp_lora, build_transformer_block, prune, reverse_autodiff, PruneOptions,
};
use coserve_core::sweep::{compare, write_comparison_csv};
use coserve_core::workload::generate;

const GRAD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "coserve", version, about = "Co-serving LLM inference and PEFT finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic bursty trace CSV.
    GenTrace {
        #[arg(long)]
        out: PathBuf,
        /// JSON run config; only its `trace` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Enumerate and price parallel layouts for every bypass network.
    Parallelize {
        /// Graph JSON with operators, tensors and bypasses.
        #[arg(long)]
        graph: PathBuf,
        /// Machine JSON {degree, flops_per_ms, bytes_per_ms}.
        #[arg(long)]
        machine: PathBuf,
        /// Parallelization operators allowed per edge (1 or 2).
        #[arg(long, default_value_t = 1)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune the backward graph and report the activation memory breakdown.
    Prune {
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        graph: Option<PathBuf>,
        #[arg(long, value_enum)]
        builtin: Option<Builtin>,
        #[arg(long, default_value_t = 1024)]
        seqlen: usize,
        #[arg(long, default_value_t = 1024)]
        hidden: usize,
        #[arg(long, default_value_t = 4096)]
        ffn: usize,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Token window for the windowed backward stage.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        dtype_bytes: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check token-level finetuning gradients against the full-sequence pass.
    VerifyGrad {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        seqlen: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate one policy on one trace.
    Run {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trace CSV; generated from the trace flags when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        trace_args: TraceArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep policies across arrival rates.
    Compare {
        /// Base seed; used alone unless --seeds is given.
        #[arg(long)]
        seed: u64,
        /// Additional seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<Policy>,
        #[arg(long, value_delimiter = ',', default_values_t = [4.0, 8.0, 12.0, 16.0, 20.0])]
        rates: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        trace_args: TraceArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Builtin {
    /// One LoRA-equipped transformer block.
    Block,
    /// Two-layer MLP with LoRA on the first linear.
    MlpLora,
}

/// A check the run was asked to make did not hold.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct AcceptanceFailure(String);

fn exit_code(e: &anyhow::Error) -> u8 {
    use coserve_core::Error as E;
    if e.downcast_ref::<AcceptanceFailure>().is_some() {
        return 2;
    }
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Invariant(_) | E::DependencyViolation(_) | E::OrderingViolation { .. } | E::CacheDesync { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTrace {
            out,
            config,
            seed,
            trace,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?.trace;
            trace.apply(&mut cfg);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let t = generate(&cfg)?;
            t.to_file(&out)?;
            println!("{} arrivals ({} inference) -> {}", t.arrivals.len(), t.inference_count(), out.display());
            Ok(())
        }
        Command::Parallelize {
            graph,
            machine,
            budget,
            out,
        } => parallelize(&graph, &machine, budget, out.as_deref()),
        Command::Prune {
            graph,
            builtin,
            seqlen,
            hidden,
            ffn,
            rank,
            window,
            batch,
            dtype_bytes,
            out_dir,
        } => {
            let g = match (graph, builtin) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    PeftModel::from_json(&text)?.merged()
                }
                (None, Some(Builtin::Block)) => build_transformer_block(seqlen, hidden, ffn, rank),
                (None, Some(Builtin::MlpLora)) => build_mlp_lora(seqlen, hidden, rank),
                (None, None) => bail!("one of --graph or --builtin is required"),
            };
            let full = reverse_autodiff(&g)?;
            let (_, plan) = prune(&g, &full, &PruneOptions::default())?;
            let report = account_memory_windowed(&plan, seqlen, batch, dtype_bytes, window);
            std::fs::create_dir_all(&out_dir)?;
            write_json(&out_dir.join("plan.json"), &plan)?;
            std::fs::write(out_dir.join("memory.csv"), report.to_csv()?)?;
            println!(
                "kept {} of {} activations; pruning-only reduction {:.1}%, total {:.1}%",
                plan.a.len(),
                plan.all_activations.len(),
                100.0 * report.pruning_reduction,
                100.0 * report.total_reduction
            );
            Ok(())
        }
        Command::VerifyGrad {
            depth,
            hidden,
            seqlen,
            trials,
            rank,
            vocab,
            seed,
        } => {
            let reports = verify_token_level(TinyConfig::new(depth, hidden, vocab, rank), seqlen, trials, seed)?;
            let mut worst: f64 = 0.0;
            let mut shapes_ok = true;
            for r in &reports {
                println!(
                    "{:<12} trials {:>3}  loss {:.2e}  lora {:.2e}  kv {:.2e}  shapes {}",
                    r.class,
                    r.trials,
                    r.worst.loss,
                    r.worst.grads,
                    r.worst.kv,
                    if r.shapes_ok { "ok" } else { "MISMATCH" }
                );
                worst = worst.max(r.worst.max());
                shapes_ok &= r.shapes_ok;
            }
            println!("max relative error {worst:.3e}");
            if worst > GRAD_TOLERANCE || !shapes_ok {
                return Err(AcceptanceFailure(format!("max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}")).into());
            }
            Ok(())
        }
        Command::Run {
            seed,
            config,
            trace,
            trace_args,
            sim,
            out_dir,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            trace_args.apply(&mut cfg.trace);
            sim.apply(&mut cfg);
            if trace.is_some() {
                cfg.trace_path = trace;
            }
            cfg.trace.seed = seed;
            cfg.sim.seed = seed;
            cfg.resolve()?;
            let t = cfg.load_trace()?;
            let m = coserve_core::engine::run(&t, &cfg.sim)?;
            m.write_outputs(&out_dir, &cfg)?;
            let s = &m.summary;
            println!(
                "{}: {} requests, SLO attainment {:.3}, inference {:.0} tok/s, finetuning {:.0} tok/s, evictions {:.2}%",
                s.policy,
                s.requests,
                s.slo_attainment,
                s.inference_throughput_tps,
                s.finetune_throughput_tps,
                s.eviction_pct
            );
            Ok(())
        }
        Command::Compare {
            seed,
            seeds,
            policies,
            rates,
            config,
            trace_args,
            sim,
            out,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if cfg.trace_path.is_some() {
                bail!("compare generates one trace per rate; trace_path is not supported");
            }
            trace_args.apply(&mut cfg.trace);
            sim.apply(&mut cfg);
            cfg.resolve()?;
            for p in &policies {
                coserve_core::engine::SimConfig { policy: *p, ..cfg.sim }.validate()?;
            }
            let mut all_seeds = vec![seed];
            all_seeds.extend(seeds.iter().filter(|s| **s != seed));
            let rows = compare(&cfg.trace, &rates, &all_seeds, &policies, &cfg.sim)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_comparison_csv(&rows, BufWriter::new(File::create(&out)?))?;
            for r in &rows {
                println!(
                    "{:>6.1} rps  seed {:<4} {:<14} SLO {:.3}  inference {:>7.0}  finetuning {:>7.0}",
                    r.rate_rps, r.seed, r.policy, r.slo_attainment, r.inference_throughput_tps, r.finetune_throughput_tps
                );
            }
            Ok(())
        }
    }
}

fn parallelize(graph: &Path, machine: &Path, budget: usize, out: Option<&Path>) -> Result<()> {
    if !(1..=2).contains(&budget) {
        bail!("--budget must be 1 or 2");
    }
    let model = PeftModel::from_json(&std::fs::read_to_string(graph).with_context(|| format!("reading {}", graph.display()))?)?;
    let spec: MachineSpec = serde_json::from_str(
        &std::fs::read_to_string(machine).with_context(|| format!("reading {}", machine.display()))?,
    )
    .context("parsing machine spec")?;
    spec.validate()?;
    if model.bypasses.is_empty() {
        bail!("graph has no bypass networks");
    }

    #[derive(Serialize)]
    struct Choice {
        bypass: String,
        chosen: coserve_core::parallelize::CandidatePcg,
        candidates: Vec<coserve_core::parallelize::CandidatePcg>,
    }
    let mut choices = Vec::new();
    for b in &model.bypasses {
        let boundary = Boundary::from_backbone(&model.backbone, b)?;
        let mut cands = enumerate_candidates(b, &boundary, spec.degree, &EnumerationOptions { budget_per_edge: budget })?;
        price(&mut cands, &spec);
        let best = select_best(&cands, |c| c.cost_ms)?.clone();
        println!("{}: {} candidates, chose [{}] at {:.4} ms", b.name, cands.len(), best.summary(), best.cost_ms);
        choices.push(Choice {
            bypass: b.name.clone(),
            chosen: best,
            candidates: cands,
        });
    }
    let text = serde_json::to_string_pretty(&choices)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
