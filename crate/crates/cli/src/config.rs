//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo never silently falls back to a default. Lists are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qkdprov_rl::Scheme;

use crate::harness::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVariable {
    Requests,
    Scenarios,
    Multiplier,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::Requests => "requests",
            SweepVariable::Scenarios => "scenarios",
            SweepVariable::Multiplier => "multiplier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "requests" => Some(SweepVariable::Requests),
            "scenarios" => Some(SweepVariable::Scenarios),
            "multiplier" => Some(SweepVariable::Multiplier),
            _ => None,
        }
    }
}

pub fn parse_scheme(s: &str) -> Option<Scheme> {
    match s {
        "fedsac" => Some(Scheme::FedSac),
        "decsac" => Some(Scheme::DecSac),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `nsfnet`, `usnet` or a topology file.
    pub topology: String,
    /// Request file. Without one, a shipped network uses its shipped
    /// request set unless `request_count` is given, and anything else draws
    /// `request_count` (default 100) requests at random.
    pub requests: Option<PathBuf>,
    pub request_count: Option<usize>,
    pub scenarios: usize,
    pub costs: Option<PathBuf>,
    pub multiplier: f64,
    pub seed: u64,
    pub out: PathBuf,

    pub sweep: SweepVariable,
    pub sweep_values: Vec<f64>,
    pub random_draws: usize,

    /// `toy` or `network` (the configured topology and requests).
    pub train_instance: String,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Managers under FedSAC; DecSAC always makes every agent a manager.
    pub managers: usize,
    pub threshold_fraction: f64,
    pub threshold_window: usize,

    /// Feature CSV; synthetic data is generated when absent.
    pub fel_data: Option<PathBuf>,
    pub fel_samples: usize,
    pub fel_dim: usize,
    pub fel_workers: usize,
    pub fel_separation: f64,
    pub fel_per_channel_rate: f64,
    pub fel_rates: Vec<f64>,
    pub fel_epochs: usize,
    pub fel_learning_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            topology: "nsfnet".into(),
            requests: None,
            request_count: None,
            scenarios: 10,
            costs: None,
            multiplier: 1.0,
            seed: 0,
            out: PathBuf::from("results"),
            sweep: SweepVariable::Multiplier,
            sweep_values: vec![0.5, 1.0, 2.0],
            random_draws: 100,
            train_instance: "toy".into(),
            schemes: vec![Scheme::FedSac, Scheme::DecSac],
            seeds: vec![0, 1, 2, 3, 4],
            episodes: 100,
            managers: 3,
            threshold_fraction: 0.95,
            threshold_window: 5,
            fel_data: None,
            fel_samples: 400,
            fel_dim: 16,
            fel_workers: 8,
            fel_separation: 0.3,
            fel_per_channel_rate: 1.0,
            fel_rates: (0..8).map(f64::from).collect(),
            fel_epochs: 300,
            fel_learning_rate: 0.5,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = || format!("bad value `{value}` for `{key}`");
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "topology" => self.topology = value.to_string(),
            "requests" => self.requests = Some(PathBuf::from(value)),
            "request_count" => self.request_count = Some(value.parse().map_err(|_| bad())?),
            "scenarios" => num!(self.scenarios),
            "costs" => self.costs = Some(PathBuf::from(value)),
            "multiplier" => num!(self.multiplier),
            "seed" => num!(self.seed),
            "out" => self.out = PathBuf::from(value),
            "sweep" => self.sweep = SweepVariable::parse(value).ok_or_else(bad)?,
            "sweep_values" => self.sweep_values = list(value).ok_or_else(bad)?,
            "random_draws" => num!(self.random_draws),
            "train_instance" => self.train_instance = value.to_string(),
            "schemes" => {
                self.schemes = value
                    .split(',')
                    .map(|s| parse_scheme(s.trim()))
                    .collect::<Option<_>>()
                    .ok_or_else(bad)?
            }
            "seeds" => self.seeds = list(value).ok_or_else(bad)?,
            "episodes" => num!(self.episodes),
            "managers" => num!(self.managers),
            "threshold_fraction" => num!(self.threshold_fraction),
            "threshold_window" => num!(self.threshold_window),
            "fel_data" => self.fel_data = Some(PathBuf::from(value)),
            "fel_samples" => num!(self.fel_samples),
            "fel_dim" => num!(self.fel_dim),
            "fel_workers" => num!(self.fel_workers),
            "fel_separation" => num!(self.fel_separation),
            "fel_per_channel_rate" => num!(self.fel_per_channel_rate),
            "fel_rates" => self.fel_rates = list(value).ok_or_else(bad)?,
            "fel_epochs" => num!(self.fel_epochs),
            "fel_learning_rate" => num!(self.fel_learning_rate),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.request_count == Some(0) || self.scenarios == 0 || self.random_draws == 0 {
            return fail("request_count, scenarios and random_draws must be >= 1");
        }
        if !(self.multiplier > 0.0) {
            return fail("multiplier must be positive");
        }
        if self.sweep_values.is_empty() {
            return fail("sweep_values is empty");
        }
        if self.schemes.is_empty() || self.seeds.is_empty() || self.episodes == 0 {
            return fail("schemes, seeds and episodes must be non-empty");
        }
        if self.managers == 0 {
            return fail("managers must be >= 1");
        }
        if self.train_instance != "toy" && self.train_instance != "network" {
            return fail("train_instance must be `toy` or `network`");
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) || self.threshold_window == 0 {
            return fail("threshold_fraction must lie in (0, 1] and threshold_window >= 1");
        }
        if self.fel_workers == 0 || self.fel_dim < self.fel_workers || self.fel_samples == 0 {
            return fail("fel_samples >= 1 and fel_dim >= fel_workers >= 1 required");
        }
        if self.fel_rates.is_empty() || !(self.fel_per_channel_rate > 0.0) {
            return fail("fel_rates must be non-empty and fel_per_channel_rate positive");
        }
        for p in [&self.requests, &self.costs, &self.fel_data].into_iter().flatten() {
            if !p.exists() {
                return fail(&format!("{} does not exist", p.display()));
            }
        }
        if !matches!(self.topology.as_str(), "nsfnet" | "usnet") && !Path::new(&self.topology).exists() {
            return fail(&format!("topology `{}` is neither shipped nor a file", self.topology));
        }
        Ok(())
    }

    /// Round-trippable text form.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("topology", self.topology.clone());
        if let Some(p) = &self.requests {
            kv("requests", p.display().to_string());
        }
        if let Some(n) = self.request_count {
            kv("request_count", n.to_string());
        }
        kv("scenarios", self.scenarios.to_string());
        if let Some(p) = &self.costs {
            kv("costs", p.display().to_string());
        }
        kv("multiplier", self.multiplier.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("sweep", self.sweep.name().into());
        kv("sweep_values", join(&self.sweep_values));
        kv("random_draws", self.random_draws.to_string());
        kv("train_instance", self.train_instance.clone());
        kv("schemes", self.schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
        kv("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        kv("episodes", self.episodes.to_string());
        kv("managers", self.managers.to_string());
        kv("threshold_fraction", self.threshold_fraction.to_string());
        kv("threshold_window", self.threshold_window.to_string());
        if let Some(p) = &self.fel_data {
            kv("fel_data", p.display().to_string());
        }
        kv("fel_samples", self.fel_samples.to_string());
        kv("fel_dim", self.fel_dim.to_string());
        kv("fel_workers", self.fel_workers.to_string());
        kv("fel_separation", self.fel_separation.to_string());
        kv("fel_per_channel_rate", self.fel_per_channel_rate.to_string());
        kv("fel_rates", join(&self.fel_rates));
        kv("fel_epochs", self.fel_epochs.to_string());
        kv("fel_learning_rate", self.fel_learning_rate.to_string());
        out
    }
}
