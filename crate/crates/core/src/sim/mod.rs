//! Analytical step-time model for data, model and hybrid parallel training of
//! multi-residual networks on pairs of accelerators.
//!
//! Times are in seconds. Compute is charged per residual function per
//! *effective* sample, where the batch a worker sees is rounded up to a
//! multiple of the hardware thread quantum (`warp`).

mod calibrate;
mod config;

pub use calibrate::{calibrate, Calibration, Observation};
pub use config::{parse_kv, parse_reference_csv, reference_csv, reference_step_times, ReferencePair};

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every worker runs the whole network on its share of the batch.
    Data,
    /// Each worker runs `k / workers` functions of every block on the full batch.
    Model,
    /// Data parallel across worker pairs, model parallel within each pair.
    Hybrid,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Data => "data",
            Strategy::Model => "model",
            Strategy::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "data" => Ok(Strategy::Data),
            "model" => Ok(Strategy::Model),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    /// Forward + backward time of one residual function for one effective sample.
    pub t_fn: f64,
    /// Per-step overhead: optimiser update, stem and head.
    pub t_fixed: f64,
    /// Bytes of one block input (or output) per sample.
    pub activation_bytes: f64,
    /// Bytes of parameters (= gradients) per residual function.
    pub param_bytes_per_fn: f64,
    /// Link bandwidth in bytes per second.
    pub bandwidth: f64,
    /// Fixed cost per transfer.
    pub latency: f64,
    pub warp: usize,
}

impl Default for CostModel {
    /// CIFAR-shaped basic blocks in 32-bit floats over a 16 GB/s link.
    fn default() -> Self {
        let acts = (16 * 32 * 32 + 32 * 16 * 16 + 64 * 8 * 8) as f64 / 3.0;
        let params = (2 * 9 * (16 * 16 + 32 * 32 + 64 * 64)) as f64 / 3.0;
        Self {
            t_fn: 1e-5,
            t_fixed: 0.01,
            activation_bytes: 4.0 * acts,
            param_bytes_per_fn: 4.0 * params,
            bandwidth: 16e9,
            latency: 1e-5,
            warp: 32,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_fn", self.t_fn),
            ("t_fixed", self.t_fixed),
            ("activation_bytes", self.activation_bytes),
            ("param_bytes_per_fn", self.param_bytes_per_fn),
            ("latency", self.latency),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::config("bandwidth must be positive (may be infinite)"));
        }
        if self.warp == 0 {
            return Err(Error::config("warp must be at least 1"));
        }
        Ok(())
    }

    /// Seconds to move `bytes` once.
    pub fn transfer(&self, bytes: f64) -> f64 {
        self.latency + bytes / self.bandwidth
    }

    /// Every time parameter multiplied by `s` (bandwidth divided by it).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            t_fn: self.t_fn * s,
            t_fixed: self.t_fixed * s,
            latency: self.latency * s,
            bandwidth: self.bandwidth / s,
            ..self.clone()
        }
    }
}

/// `ceil(batch / warp) · warp`.
pub fn effective_samples(batch_per_worker: usize, warp: usize) -> Result<usize> {
    if batch_per_worker == 0 || warp == 0 {
        return Err(Error::config("batch per worker and warp must be at least 1"));
    }
    Ok(batch_per_worker.div_ceil(warp) * warp)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SimScenario {
    /// Residual blocks in the whole network.
    pub blocks: usize,
    pub k: usize,
    pub batch: usize,
    pub workers: usize,
    pub strategy: Strategy,
}

impl SimScenario {
    pub fn new(blocks: usize, k: usize, batch: usize, workers: usize, strategy: Strategy) -> Self {
        Self {
            blocks,
            k,
            batch,
            workers,
            strategy,
        }
    }

    /// Scenario for a basic-block network of the given depth (`6n + 2`, `3n` blocks).
    pub fn from_depth(depth: usize, k: usize, batch: usize, workers: usize, strategy: Strategy) -> Result<Self> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(Error::config(format!("depth {depth} is not of the form 6n+2")));
        }
        Ok(Self::new((depth - 2) / 2, k, batch, workers, strategy))
    }

    /// Residual functions in the network.
    pub fn functions(&self) -> usize {
        self.blocks * self.k
    }

    /// Convolutional depth assuming basic blocks.
    pub fn depth(&self) -> usize {
        2 * self.blocks + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.k == 0 || self.batch == 0 || self.workers == 0 {
            return Err(Error::config("blocks, k, batch and workers must be positive"));
        }
        match self.strategy {
            Strategy::Data => Ok(()),
            Strategy::Model => {
                if self.workers < 2 || !self.k.is_multiple_of(self.workers) {
                    return Err(Error::config(format!(
                        "model parallelism needs k ({}) divisible by {} workers",
                        self.k, self.workers
                    )));
                }
                Ok(())
            }
            Strategy::Hybrid => {
                if self.workers < 2 || !self.workers.is_multiple_of(2) || !self.k.is_multiple_of(2) {
                    return Err(Error::config(format!(
                        "hybrid parallelism needs an even worker count and even k (workers {}, k {})",
                        self.workers, self.k
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub step_time: f64,
    pub compute: f64,
    pub transfer: f64,
    pub fixed: f64,
}

/// Coefficients of `(t_fn, t_fixed, latency, 1/bandwidth)` in the step time.
/// The model is linear in these four, which is what calibration exploits.
pub(crate) fn features(s: &SimScenario, cost: &CostModel) -> Result<[f64; 4]> {
    s.validate()?;
    let n = s.blocks as f64;
    let (fn_units, transfers, bytes) = match s.strategy {
        Strategy::Data => {
            let per = s.batch.div_ceil(s.workers);
            let eff = effective_samples(per, cost.warp)? as f64;
            let (t, b) = if s.workers > 1 {
                (1.0, cost.param_bytes_per_fn * s.functions() as f64)
            } else {
                (0.0, 0.0)
            };
            (s.functions() as f64 * eff, t, b)
        }
        Strategy::Model => {
            let eff = effective_samples(s.batch, cost.warp)? as f64;
            let per_worker = (s.k / s.workers) as f64;
            (
                n * per_worker * eff,
                2.0 * n,
                2.0 * n * cost.activation_bytes * s.batch as f64,
            )
        }
        Strategy::Hybrid => {
            let pairs = s.workers / 2;
            let per = s.batch.div_ceil(pairs);
            let eff = effective_samples(per, cost.warp)? as f64;
            let mut transfers = 2.0 * n;
            let mut bytes = 2.0 * n * cost.activation_bytes * per as f64;
            if pairs > 1 {
                transfers += 1.0;
                bytes += cost.param_bytes_per_fn * s.functions() as f64;
            }
            (n * (s.k / 2) as f64 * eff, transfers, bytes)
        }
    };
    Ok([fn_units, 1.0, transfers, bytes])
}

pub fn simulate_step(scenario: &SimScenario, cost: &CostModel) -> Result<SimResult> {
    cost.validate()?;
    let [units, _, transfers, bytes] = features(scenario, cost)?;
    let compute = units * cost.t_fn;
    let transfer = transfers * cost.latency + bytes / cost.bandwidth;
    Ok(SimResult {
        step_time: compute + transfer + cost.t_fixed,
        compute,
        transfer,
        fixed: cost.t_fixed,
    })
}

/// `(baseline − t) / baseline`, in percent.
pub fn speedup_percent(baseline: f64, time: f64) -> f64 {
    100.0 * (baseline - time) / baseline
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub baseline: SimScenario,
    pub candidate: SimScenario,
    pub baseline_time: f64,
    pub candidate_time: f64,
    pub speedup: f64,
}

/// Simulate deep `k = 1` data-parallel baselines against shallower
/// multi-function candidates with the same number of residual functions.
pub fn speedup_table(pairs: &[(SimScenario, SimScenario)], cost: &CostModel) -> Result<Vec<SpeedupRow>> {
    pairs
        .iter()
        .map(|(base, cand)| {
            if base.k != 1 || base.strategy != Strategy::Data {
                return Err(Error::config("baseline must be a k=1 data-parallel network"));
            }
            if cand.k < 2 || cand.strategy == Strategy::Data {
                return Err(Error::config(
                    "candidate must be a k>1 model or hybrid parallel network",
                ));
            }
            if base.functions() != cand.functions() || base.batch != cand.batch || base.workers != cand.workers {
                return Err(Error::config(format!(
                    "unpaired scenarios: {} vs {} functions, batch {} vs {}, workers {} vs {}",
                    base.functions(),
                    cand.functions(),
                    base.batch,
                    cand.batch,
                    base.workers,
                    cand.workers
                )));
            }
            let bt = simulate_step(base, cost)?.step_time;
            let ct = simulate_step(cand, cost)?.step_time;
            Ok(SpeedupRow {
                baseline: base.clone(),
                candidate: cand.clone(),
                baseline_time: bt,
                candidate_time: ct,
                speedup: speedup_percent(bt, ct),
            })
        })
        .collect()
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut s = String::from("baseline_depth,baseline_k,baseline_ms,depth,k,ms,batch,speedup_pct\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.baseline.depth(),
            r.baseline.k,
            r.baseline_time * 1e3,
            r.candidate.depth(),
            r.candidate.k,
            r.candidate_time * 1e3,
            r.candidate.batch,
            r.speedup
        );
    }
    s
}

/// Markdown table; non-positive speedups print as `-`.
pub fn speedup_markdown(rows: &[SpeedupRow]) -> String {
    let mut s = String::from("| depth | k | time | depth | k | time | mini-batch | speedup |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let speed = if r.speedup > 0.0 {
            format!("{:.0}%", r.speedup)
        } else {
            "-".to_string()
        };
        let _ = writeln!(
            s,
            "| {} | {} | {:.0}ms | {} | {} | {:.0}ms | {} | {} |",
            r.baseline.depth(),
            r.baseline.k,
            r.baseline_time * 1e3,
            r.candidate.depth(),
            r.candidate.k,
            r.candidate_time * 1e3,
            r.candidate.batch,
            speed
        );
    }
    s
}

pub fn sim_result_csv(rows: &[(SimScenario, SimResult)]) -> String {
    let mut s = String::from("blocks,k,batch,workers,strategy,step_time,compute,transfer,fixed\n");
    for (sc, r) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            sc.blocks,
            sc.k,
            sc.batch,
            sc.workers,
            sc.strategy.name(),
            r.step_time,
            r.compute,
            r.transfer,
            r.fixed
        );
    }
    s
}
