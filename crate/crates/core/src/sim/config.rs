//! Plain-text `key = value` configuration and the bundled step-time fixture.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{CostModel, Observation, SimScenario, Strategy};
use crate::error::{Error, Result};

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("cannot parse `{key}` value `{v}`"))),
    }
}

fn reject_leftovers(map: BTreeMap<String, String>) -> Result<()> {
    match map.into_keys().next() {
        Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
        None => Ok(()),
    }
}

impl CostModel {
    /// Keys absent from `map` keep their value from `base`.
    pub fn from_kv(mut map: BTreeMap<String, String>, base: &CostModel) -> Result<Self> {
        let mut m = base.clone();
        if let Some(v) = take(&mut map, "t_fn")? {
            m.t_fn = v;
        }
        if let Some(v) = take(&mut map, "t_fixed")? {
            m.t_fixed = v;
        }
        if let Some(v) = take(&mut map, "activation_bytes")? {
            m.activation_bytes = v;
        }
        if let Some(v) = take(&mut map, "param_bytes_per_fn")? {
            m.param_bytes_per_fn = v;
        }
        if let Some(v) = take(&mut map, "bandwidth")? {
            m.bandwidth = v;
        }
        if let Some(v) = take(&mut map, "latency")? {
            m.latency = v;
        }
        if let Some(v) = take(&mut map, "warp")? {
            m.warp = v;
        }
        reject_leftovers(map)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "t_fn = {}", self.t_fn);
        let _ = writeln!(s, "t_fixed = {}", self.t_fixed);
        let _ = writeln!(s, "activation_bytes = {}", self.activation_bytes);
        let _ = writeln!(s, "param_bytes_per_fn = {}", self.param_bytes_per_fn);
        let _ = writeln!(s, "bandwidth = {}", self.bandwidth);
        let _ = writeln!(s, "latency = {}", self.latency);
        let _ = writeln!(s, "warp = {}", self.warp);
        s
    }
}

impl SimScenario {
    /// Reads `blocks` (or `depth`), `k`, `batch`, `workers`, `strategy`.
    /// Keys other than these are returned untouched for the caller.
    pub fn from_kv(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let k = take(map, "k")?.unwrap_or(1);
        let batch = take(map, "batch")?.ok_or_else(|| Error::config("scenario needs `batch`"))?;
        let workers = take(map, "workers")?.unwrap_or(2);
        let strategy = match map.remove("strategy") {
            Some(s) => Strategy::parse(&s)?,
            None => Strategy::Data,
        };
        let scenario = match (take::<usize>(map, "blocks")?, take::<usize>(map, "depth")?) {
            (Some(b), None) => SimScenario::new(b, k, batch, workers, strategy),
            (None, Some(d)) => SimScenario::from_depth(d, k, batch, workers, strategy)?,
            _ => return Err(Error::config("scenario needs exactly one of `blocks` or `depth`")),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "blocks = {}\nk = {}\nbatch = {}\nworkers = {}\nstrategy = {}\n",
            self.blocks,
            self.k,
            self.batch,
            self.workers,
            self.strategy.name()
        )
    }
}

/// One measured pair: deep `k = 1` data parallel versus multi-function model parallel.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePair {
    pub baseline_depth: usize,
    pub baseline_ms: f64,
    pub depth: usize,
    pub k: usize,
    pub ms: f64,
    pub batch: usize,
    /// `None` where the multi-function network was slower.
    pub speedup_pct: Option<f64>,
}

impl ReferencePair {
    /// Both sides on two workers.
    pub fn scenarios(&self) -> Result<(SimScenario, SimScenario)> {
        Ok((
            SimScenario::from_depth(self.baseline_depth, 1, self.batch, 2, Strategy::Data)?,
            SimScenario::from_depth(self.depth, self.k, self.batch, 2, Strategy::Model)?,
        ))
    }

    pub fn observations(&self) -> Result<[Observation; 2]> {
        let (b, c) = self.scenarios()?;
        Ok([
            Observation {
                scenario: b,
                seconds: self.baseline_ms / 1e3,
            },
            Observation {
                scenario: c,
                seconds: self.ms / 1e3,
            },
        ])
    }
}

/// Parse a step-time CSV with the bundled fixture's columns.
pub fn parse_reference_csv(text: &str, path: &str) -> Result<Vec<ReferencePair>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format(path, format!("line {}: malformed row `{line}`", i + 1));
        if f.len() != 8 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
        if int(f[1])? != 1 {
            return Err(Error::format(path, format!("line {}: baseline must have k = 1", i + 1)));
        }
        out.push(ReferencePair {
            baseline_depth: int(f[0])?,
            baseline_ms: float(f[2])?,
            depth: int(f[3])?,
            k: int(f[4])?,
            ms: float(f[5])?,
            batch: int(f[6])?,
            speedup_pct: if f[7].is_empty() || f[7] == "-" {
                None
            } else {
                Some(float(f[7])?)
            },
        });
    }
    Ok(out)
}

const REFERENCE_CSV: &str = include_str!("../../fixtures/k80_step_times.csv");

/// Bundled step times measured on a dual-GPU board.
pub fn reference_step_times() -> Vec<ReferencePair> {
    parse_reference_csv(REFERENCE_CSV, "k80_step_times.csv").expect("bundled fixture parses")
}

/// Raw text of the bundled fixture.
pub fn reference_csv() -> &'static str {
    REFERENCE_CSV
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let m = parse_kv("a = 1\n# note\n\nb=two # trailing\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        assert!(parse_kv("novalue").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
    }

    #[test]
    fn cost_model_round_trip() {
        let m = CostModel {
            t_fn: 1.25e-5,
            bandwidth: 3e9,
            ..CostModel::default()
        };
        let back = CostModel::from_kv(parse_kv(&m.to_kv()).unwrap(), &CostModel::default()).unwrap();
        assert_eq!(back, m);
        assert!(CostModel::from_kv(parse_kv("speed = 3").unwrap(), &m).is_err());
    }

    #[test]
    fn scenario_from_kv() {
        let mut m = parse_kv("depth = 110\nk = 4\nbatch = 32\nstrategy = model").unwrap();
        let s = SimScenario::from_kv(&mut m).unwrap();
        assert_eq!((s.blocks, s.k, s.workers), (54, 4, 2));
        let mut m = parse_kv("k = 1\nbatch = 32\nstrategy = model\nblocks = 4").unwrap();
        assert!(SimScenario::from_kv(&mut m).is_err());
    }

    #[test]
    fn fixture_loads() {
        let rows = reference_step_times();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].speedup_pct, None);
        assert_eq!(rows[5].ms, 341.0);
        let (b, c) = rows[2].scenarios().unwrap();
        assert_eq!(b.functions(), c.functions());
    }
}
