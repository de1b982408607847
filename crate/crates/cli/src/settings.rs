//! Layered `key = value` settings and the run manifest.
//!
//! Precedence is defaults < config file < flags. A manifest written by an
//! earlier run is itself a valid config file: its `config.*` keys are read
//! back and everything else in it is ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use multiresnet::sim::parse_kv;

pub const MANIFEST: &str = "manifest.txt";

/// Keys written by the manifest that carry no configuration.
const MANIFEST_ONLY: [&str; 3] = ["subcommand", "version", "wall_time"];

#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// `defaults` also declares the complete set of accepted keys.
    pub fn resolve(
        subcommand: &str,
        defaults: &[(&str, &str)],
        config: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file = parse_kv(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if let Some(cmd) = file.get("subcommand") {
                if cmd != subcommand {
                    bail!("{} is a manifest for `{cmd}`, not `{subcommand}`", path.display());
                }
            }
            let is_manifest = file.keys().any(|k| k.starts_with("config."));
            for (key, value) in file {
                let key = if is_manifest {
                    match key.strip_prefix("config.") {
                        Some(k) => k.to_string(),
                        None => continue,
                    }
                } else if MANIFEST_ONLY.contains(&key.as_str()) {
                    continue;
                } else {
                    key
                };
                if !values.contains_key(&key) {
                    bail!("unknown key `{key}` in {} for `{subcommand}`", path.display());
                }
                values.insert(key, value);
            }
        }
        for (key, value) in flags {
            debug_assert!(values.contains_key(key), "flag {key} missing from defaults");
            if let Some(v) = value {
                values.insert(key.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("invalid value `{raw}` for `{key}`: {e}"))
    }

    /// Empty string means unset.
    pub fn opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("invalid entry `{s}` in `{key}`: {e}")))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}

/// Collects artifacts and results while a subcommand runs, then writes the manifest.
pub struct Run {
    pub dir: PathBuf,
    subcommand: &'static str,
    settings: Settings,
    artifacts: Vec<(String, String)>,
    results: Vec<(String, String)>,
    timing: Vec<(String, String)>,
    started: Instant,
}

impl Run {
    pub fn start(dir: &Path, subcommand: &'static str, settings: Settings) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            subcommand,
            settings,
            artifacts: Vec::new(),
            results: Vec::new(),
            timing: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifact(name);
        Ok(path)
    }

    /// Record a file written by other means.
    pub fn artifact(&mut self, name: &str) {
        let key = name.replace('.', "_");
        self.artifacts.push((key, name.to_string()));
    }

    pub fn result(&mut self, key: &str, value: impl Display) {
        self.results.push((key.to_string(), value.to_string()));
    }

    /// Wall-clock measurements; kept out of result files so reruns compare equal.
    pub fn timing(&mut self, key: &str, value: impl Display) {
        self.timing.push((key.to_string(), value.to_string()));
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut s = String::new();
        s.push_str(&format!("subcommand = {}\n", self.subcommand));
        s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("seed = {}\n", self.settings.raw("seed")));
        for (k, v) in self.settings.entries() {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        for (k, v) in &self.artifacts {
            s.push_str(&format!("artifact.{k} = {v}\n"));
        }
        for (k, v) in &self.results {
            s.push_str(&format!("result.{k} = {v}\n"));
        }
        for (k, v) in &self.timing {
            s.push_str(&format!("timing.{k} = {v}\n"));
        }
        s.push_str(&format!("wall_time = {:.3}\n", self.started.elapsed().as_secs_f64()));
        let path = self.dir.join(MANIFEST);
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
