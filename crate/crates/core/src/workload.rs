//! Synthetic bursty traces and trace file I/O.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_FINETUNE_SEQ: u32 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Inference { prompt_len: u32, gen_len: u32 },
    Finetune { seq_len: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time_ms: f64,
    pub tenant: u32,
    pub kind: Kind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub duration_s: f64,
    pub rate_rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub arrivals: Vec<Arrival>,
    pub meta: TraceMeta,
}

/// Lognormal length distribution clipped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenDist {
    pub mu: f64,
    pub sigma: f64,
    pub min: u32,
    pub max: u32,
}

impl LenDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u32> {
        let d = LogNormal::new(self.mu, self.sigma).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        let v: f64 = d.sample(rng);
        Ok((v.round() as u32).clamp(self.min, self.max))
    }

    /// Mean of the unclipped distribution.
    pub fn mean(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }

    fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max || !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfiguration(format!("bad length distribution {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub period_s: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    /// Sequences in the finetuning dataset, all available at time 0.
    pub sequences: u32,
    pub seq_len: LenDist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub rate_rps: f64,
    pub burst: Burst,
    pub prompt: LenDist,
    pub generation: LenDist,
    pub tenants: u32,
    pub finetune: FinetuneSpec,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 120.0,
            rate_rps: 4.0,
            burst: Burst {
                period_s: 60.0,
                amplitude: 0.5,
            },
            prompt: LenDist {
                mu: 5.5,
                sigma: 0.8,
                min: 16,
                max: 4096,
            },
            generation: LenDist {
                mu: 4.5,
                sigma: 0.7,
                min: 8,
                max: 1024,
            },
            tenants: 1,
            finetune: FinetuneSpec {
                sequences: 0,
                seq_len: LenDist {
                    mu: 6.5,
                    sigma: 0.5,
                    min: 64,
                    max: MAX_FINETUNE_SEQ,
                },
            },
        }
    }
}

/// Inhomogeneous Poisson arrivals with rate `λ(t) = rate·(1 + a·sin(2πt/period))`,
/// sampled by thinning, plus the finetuning dataset at time 0.
pub fn generate(cfg: &TraceConfig) -> Result<Trace> {
    if !(cfg.rate_rps >= 0.0) || !cfg.rate_rps.is_finite() {
        return Err(Error::InvalidConfiguration("rate must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&cfg.burst.amplitude) {
        return Err(Error::InvalidConfiguration("burst amplitude must be in [0, 1]".into()));
    }
    if cfg.burst.amplitude > 0.0 && !(cfg.burst.period_s > 0.0) {
        return Err(Error::InvalidConfiguration("burst period must be positive".into()));
    }
    if cfg.tenants == 0 {
        return Err(Error::InvalidConfiguration("at least one tenant".into()));
    }
    cfg.prompt.validate()?;
    cfg.generation.validate()?;
    cfg.finetune.seq_len.validate()?;
    if cfg.finetune.seq_len.max > MAX_FINETUNE_SEQ {
        return Err(Error::InvalidConfiguration(format!("finetune sequences are capped at {MAX_FINETUNE_SEQ}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut arrivals = Vec::new();
    for _ in 0..cfg.finetune.sequences {
        arrivals.push(Arrival {
            time_ms: 0.0,
            tenant: rng.random_range(0..cfg.tenants),
            kind: Kind::Finetune {
                seq_len: cfg.finetune.seq_len.sample(&mut rng)?,
            },
        });
    }
    if cfg.rate_rps > 0.0 {
        let peak = cfg.rate_rps * (1.0 + cfg.burst.amplitude);
        let gap = Exp::new(peak).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= cfg.duration_s {
                break;
            }
            let rate = if cfg.burst.amplitude > 0.0 {
                cfg.rate_rps * (1.0 + cfg.burst.amplitude * (std::f64::consts::TAU * t / cfg.burst.period_s).sin())
            } else {
                cfg.rate_rps
            };
            if rng.random::<f64>() * peak >= rate {
                continue;
            }
            arrivals.push(Arrival {
                time_ms: t * 1000.0,
                tenant: rng.random_range(0..cfg.tenants),
                kind: Kind::Inference {
                    prompt_len: cfg.prompt.sample(&mut rng)?,
                    gen_len: cfg.generation.sample(&mut rng)?,
                },
            });
        }
    }
    Ok(Trace {
        arrivals,
        meta: TraceMeta {
            seed: cfg.seed,
            duration_s: cfg.duration_s,
            rate_rps: cfg.rate_rps,
        },
    })
}

impl Trace {
    /// Divides arrival times by `factor`.
    pub fn rescale(&self, factor: f64) -> Result<Trace> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidConfiguration("rescale factor must be positive".into()));
        }
        let mut out = self.clone();
        for a in &mut out.arrivals {
            a.time_ms /= factor;
        }
        out.meta.duration_s /= factor;
        out.meta.rate_rps *= factor;
        Ok(out)
    }

    pub fn inference_count(&self) -> usize {
        self.arrivals
            .iter()
            .filter(|a| matches!(a.kind, Kind::Inference { .. }))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = 0.0;
        for (i, a) in self.arrivals.iter().enumerate() {
            if !(a.time_ms >= last) || !a.time_ms.is_finite() {
                return Err(Error::InvalidTrace(format!("row {i}: time {} goes backwards", a.time_ms)));
            }
            last = a.time_ms;
            let ok = match a.kind {
                Kind::Inference { prompt_len, gen_len } => prompt_len >= 1 && gen_len >= 1,
                Kind::Finetune { seq_len } => (1..=MAX_FINETUNE_SEQ).contains(&seq_len),
            };
            if !ok {
                return Err(Error::InvalidTrace(format!("row {i}: bad lengths")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_ms", "tenant", "kind", "prompt_len", "gen_len", "seq_len"])?;
        for a in &self.arrivals {
            let (kind, p, g, s) = match a.kind {
                Kind::Inference { prompt_len, gen_len } => ("inf", prompt_len.to_string(), gen_len.to_string(), String::new()),
                Kind::Finetune { seq_len } => ("ft", String::new(), String::new(), seq_len.to_string()),
            };
            wr.write_record([a.time_ms.to_string(), a.tenant.to_string(), kind.into(), p, g, s])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trace> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        if header != ["time_ms", "tenant", "kind", "prompt_len", "gen_len", "seq_len"] {
            return Err(Error::InvalidTrace(format!("unexpected header {header:?}")));
        }
        let parse = |s: &str, row: usize, col: &str| -> Result<u32> {
            s.parse()
                .map_err(|_| Error::InvalidTrace(format!("row {row}: bad {col} {s:?}")))
        };
        let mut arrivals = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let time_ms: f64 = rec[0]
                .parse()
                .map_err(|_| Error::InvalidTrace(format!("row {i}: bad time {:?}", &rec[0])))?;
            let tenant = parse(&rec[1], i, "tenant")?;
            let kind = match &rec[2] {
                "inf" => Kind::Inference {
                    prompt_len: parse(&rec[3], i, "prompt_len")?,
                    gen_len: parse(&rec[4], i, "gen_len")?,
                },
                "ft" => Kind::Finetune {
                    seq_len: parse(&rec[5], i, "seq_len")?,
                },
                other => return Err(Error::InvalidTrace(format!("row {i}: unknown kind {other:?}"))),
            };
            arrivals.push(Arrival { time_ms, tenant, kind });
        }
        let duration_s = arrivals.last().map_or(0.0, |a| a.time_ms / 1000.0);
        let n = arrivals.iter().filter(|a| matches!(a.kind, Kind::Inference { .. })).count();
        let trace = Trace {
            arrivals,
            meta: TraceMeta {
                seed: 0,
                duration_s,
                rate_rps: if duration_s > 0.0 { n as f64 / duration_s } else { 0.0 },
            },
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn from_file(path: &Path) -> Result<Trace> {
        Trace::read_csv(std::fs::File::open(path)?)
    }
}
