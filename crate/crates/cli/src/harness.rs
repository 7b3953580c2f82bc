//! Experiment drivers. Each returns plain rows plus a CSV rendering with a
//! fixed header; sweep points and seeds run on the rayon pool and are
//! merged back in input order.

use std::fmt::Write as _;

use qkdprov_core::allocator::{
    brute_force_oracle, evf_plan, mean_level, random_plan, random_plan_mean, solve_deterministic, solve_sip,
    uniform_level_cost, SolveError,
};
use qkdprov_core::cost::CostError;
use qkdprov_core::demand::{build_scenarios, DemandError};
use qkdprov_core::fel::{key_rate_sweep, CurvePoint, FelError, TrainConfig, VerticalDataset};
use qkdprov_core::topology::{parse_requests, random_requests, TopologyError};
use qkdprov_core::{CostTable, NetworkTopology, PhysicalParams, ScenarioSet, SolveReport, TransmissionRequest};
use qkdprov_rl::agents::{
    best_trailing_mean, episodes_to_threshold, final_mean_reward, AgentError, EpisodeLog,
};
use qkdprov_rl::env::{toy_instance, EnvError};
use qkdprov_rl::{train_decsac, train_fedsac, AgentConfig, EnvConfig, ProvisioningEnv, Scheme, TrainingRun};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SweepVariable};

pub const NSFNET_TOPOLOGY: &str = include_str!("../../core/data/nsfnet.topo");
pub const NSFNET_REQUESTS: &str = include_str!("../../core/data/nsfnet_100.req");
pub const USNET_TOPOLOGY: &str = include_str!("../../core/data/usnet.topo");
pub const USNET_REQUESTS: &str = include_str!("../../core/data/usnet_200.req");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Fel(#[from] FelError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl HarnessError {
    pub fn is_infeasible(&self) -> bool {
        match self {
            HarnessError::Solve(e) | HarnessError::Env(EnvError::Solve(e)) => e.is_infeasible(),
            HarnessError::Agent(AgentError::Env(EnvError::Solve(e))) => e.is_infeasible(),
            _ => false,
        }
    }
}

/// Everything a planning scheme needs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub topology: NetworkTopology,
    pub requests: Vec<TransmissionRequest>,
    pub scenarios: ScenarioSet,
    pub costs: CostTable,
    pub params: PhysicalParams,
}

pub fn load_topology(cfg: &ExperimentConfig) -> Result<NetworkTopology, HarnessError> {
    Ok(match cfg.topology.as_str() {
        "nsfnet" => NetworkTopology::parse(NSFNET_TOPOLOGY)?,
        "usnet" => NetworkTopology::parse(USNET_TOPOLOGY)?,
        path => NetworkTopology::from_file(path)?,
    })
}

pub fn load_instance(cfg: &ExperimentConfig) -> Result<Instance, HarnessError> {
    let topology = load_topology(cfg)?;
    let shipped = match cfg.topology.as_str() {
        "nsfnet" => Some(NSFNET_REQUESTS),
        "usnet" => Some(USNET_REQUESTS),
        _ => None,
    };
    let requests = match (&cfg.requests, shipped, cfg.request_count) {
        (Some(path), _, _) => parse_requests(&topology, &std::fs::read_to_string(path)?)?,
        (None, Some(text), None) => parse_requests(&topology, text)?,
        (None, _, n) => random_requests(&topology, n.unwrap_or(100), &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let costs = match &cfg.costs {
        Some(path) => CostTable::from_file(path)?,
        None => CostTable::default(),
    }
    .with_multiplier(cfg.multiplier);
    Ok(Instance {
        topology,
        requests,
        scenarios: build_scenarios(cfg.scenarios, None)?,
        costs,
        params: PhysicalParams::default(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRow {
    pub level: u32,
    pub first_stage: f64,
    pub second_stage: f64,
    pub expected_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostStructure {
    pub rows: Vec<CostRow>,
}

impl CostStructure {
    /// Level with the lowest expected total; ties go to the smaller level.
    pub fn best_level(&self) -> u32 {
        self.rows
            .iter()
            .fold(None::<&CostRow>, |best, r| match best {
                Some(b) if b.expected_total <= r.expected_total => Some(b),
                _ => Some(r),
            })
            .map_or(0, |r| r.level)
    }

    /// `level,first_stage,second_stage,expected_total`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,first_stage,second_stage,expected_total\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.level, r.first_stage, r.second_stage, r.expected_total);
        }
        out
    }
}

/// Expected cost when every link reserves the demand of the same level,
/// for each level of the scenario space.
pub fn run_cost_structure(inst: &Instance) -> Result<CostStructure, HarnessError> {
    let rows = (0..=inst.scenarios.max_level())
        .into_par_iter()
        .map(|level| {
            let c = uniform_level_cost(&inst.topology, &inst.requests, &inst.scenarios, &inst.costs, &inst.params, level)?;
            Ok(CostRow {
                level,
                first_stage: c.first_stage,
                second_stage: c.expected_second_stage(),
                expected_total: c.expected_total,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(CostStructure { rows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComparisonRow {
    pub value: f64,
    pub sip: f64,
    pub evf: f64,
    pub random_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub variable: SweepVariable,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// `variable,value,sip,evf,random_mean`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,value,sip,evf,random_mean\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", self.variable.name(), r.value, r.sip, r.evf, r.random_mean);
        }
        out
    }
}

/// SIP, EVF and the mean of `random_draws` random plans at each sweep value.
/// Every point reuses the random stream of `cfg.seed`, so differences
/// between points come from the sweep variable alone. Request sweeps draw
/// that many random requests from the same seed.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<Comparison, HarnessError> {
    let base = load_instance(cfg)?;
    let rows = cfg
        .sweep_values
        .par_iter()
        .map(|&value| {
            let mut inst = base.clone();
            let count = || -> Result<usize, HarnessError> {
                if value >= 1.0 && value.fract() == 0.0 {
                    Ok(value as usize)
                } else {
                    Err(HarnessError::Config(format!("{} sweep needs positive integers, got {value}", cfg.sweep.name())))
                }
            };
            match cfg.sweep {
                SweepVariable::Requests => {
                    inst.requests = random_requests(&inst.topology, count()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
                }
                SweepVariable::Scenarios => inst.scenarios = build_scenarios(count()?, None)?,
                SweepVariable::Multiplier => inst.costs = inst.costs.clone().with_multiplier(value),
            }
            compare_point(&inst, value, cfg.random_draws, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        })
        .collect::<Result<_, _>>()?;
    Ok(Comparison {
        variable: cfg.sweep,
        rows,
    })
}

pub fn compare_point(inst: &Instance, value: f64, draws: usize, rng: &mut ChaCha8Rng) -> Result<ComparisonRow, HarnessError> {
    let Instance {
        topology: t,
        requests: r,
        scenarios: s,
        costs: c,
        params: p,
    } = inst;
    Ok(ComparisonRow {
        value,
        sip: solve_sip(t, r, s, c, p)?.expected_total(),
        evf: evf_plan(t, r, s, c, p)?.expected_total(),
        random_mean: random_plan_mean(t, r, s, c, p, draws, rng)?.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    /// Reserve the demand of one level; the rounded mean when `None`.
    Deterministic(Option<u32>),
    Sip,
    Evf,
    Random,
    Oracle { paths: usize },
}

pub fn run_solver(inst: &Instance, solver: Solver, seed: u64) -> Result<SolveReport, HarnessError> {
    let Instance {
        topology: t,
        requests: r,
        scenarios: s,
        costs: c,
        params: p,
    } = inst;
    Ok(match solver {
        Solver::Deterministic(level) => solve_deterministic(t, r, level.unwrap_or_else(|| mean_level(s)), c, p)?,
        Solver::Sip => solve_sip(t, r, s, c, p)?,
        Solver::Evf => evf_plan(t, r, s, c, p)?,
        Solver::Random => random_plan(t, r, s, c, p, s.len() as u32, &mut ChaCha8Rng::seed_from_u64(seed))?,
        Solver::Oracle { paths } => brute_force_oracle(t, r, s, c, p, paths)?,
    })
}

/// Environment for one training run: the toy instance with one link per
/// agent, or the configured network laid out the same way.
pub fn training_env(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<ProvisioningEnv, HarnessError> {
    let (topology, requests, costs) = if cfg.train_instance == "toy" {
        let (t, r) = toy_instance();
        let costs = match &cfg.costs {
            Some(path) => CostTable::from_file(path)?,
            None => CostTable::default(),
        }
        .with_multiplier(cfg.multiplier);
        (t, r, costs)
    } else {
        let inst = load_instance(cfg)?;
        (inst.topology, inst.requests, inst.costs)
    };
    let managers = match scheme {
        Scheme::FedSac => cfg.managers.min(topology.link_count()),
        Scheme::DecSac => topology.link_count(),
    };
    let env_cfg = EnvConfig::toy(&topology, managers, seed);
    let scenarios = build_scenarios(cfg.scenarios, None)?;
    Ok(ProvisioningEnv::new(
        &topology,
        &requests,
        &scenarios,
        &costs,
        &PhysicalParams::default(),
        env_cfg,
    )?)
}

pub fn run_train(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<TrainingRun, HarnessError> {
    let mut env = training_env(cfg, scheme, seed)?;
    let agent_cfg = AgentConfig::toy();
    Ok(match scheme {
        Scheme::FedSac => train_fedsac(&mut env, &agent_cfg, cfg.episodes, seed)?,
        Scheme::DecSac => train_decsac(&mut env, &agent_cfg, cfg.episodes, seed)?,
    })
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub scheme: Scheme,
    pub seed: u64,
    pub log: Vec<EpisodeLog>,
}

#[derive(Clone, Debug)]
pub struct Convergence {
    pub runs: Vec<SeedRun>,
    pub episodes: usize,
    pub window: usize,
    /// Highest trailing-mean global reward over every run.
    pub best: f64,
    pub threshold: f64,
}

impl Convergence {
    pub fn schemes(&self) -> Vec<Scheme> {
        let mut out: Vec<Scheme> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.scheme) {
                out.push(r.scheme);
            }
        }
        out
    }

    fn of(&self, scheme: Scheme) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(move |r| r.scheme == scheme)
    }

    /// Per-episode median global reward across seeds.
    pub fn median_curve(&self, scheme: Scheme) -> Vec<f64> {
        (0..self.episodes)
            .map(|e| median(&mut self.of(scheme).map(|r| r.log[e].mean_global_reward).collect::<Vec<_>>()))
            .collect()
    }

    /// Episodes to reach the threshold per seed; runs that never do count
    /// as `episodes + 1`.
    pub fn episodes_to_threshold(&self, scheme: Scheme) -> Vec<usize> {
        self.of(scheme)
            .map(|r| episodes_to_threshold(&r.log, self.threshold, self.window).unwrap_or(self.episodes + 1))
            .collect()
    }

    pub fn median_episodes_to_threshold(&self, scheme: Scheme) -> f64 {
        median(&mut self.episodes_to_threshold(scheme).into_iter().map(|e| e as f64).collect::<Vec<_>>())
    }

    /// Mean global reward of the last ten episodes, per seed.
    pub fn final_rewards(&self, scheme: Scheme) -> Vec<f64> {
        self.of(scheme).map(|r| final_mean_reward(&r.log, 10)).collect()
    }

    /// `episode,<scheme>...` with one median column per scheme.
    pub fn curve_csv(&self) -> String {
        let schemes = self.schemes();
        let curves: Vec<Vec<f64>> = schemes.iter().map(|&s| self.median_curve(s)).collect();
        let mut out = String::from("episode");
        for s in &schemes {
            out += ",";
            out += s.name();
        }
        out += "\n";
        for e in 0..self.episodes {
            let _ = write!(out, "{}", e + 1);
            for c in &curves {
                let _ = write!(out, ",{}", c[e]);
            }
            out += "\n";
        }
        out
    }

    /// `scheme,seed,episodes_to_threshold,final_mean_reward`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("scheme,seed,episodes_to_threshold,final_mean_reward\n");
        for r in &self.runs {
            let to = episodes_to_threshold(&r.log, self.threshold, self.window).unwrap_or(self.episodes + 1);
            let _ = writeln!(out, "{},{},{},{}", r.scheme.name(), r.seed, to, final_mean_reward(&r.log, 10));
        }
        out
    }
}

/// Trains every configured scheme on every seed.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Convergence, HarnessError> {
    if cfg.seeds.len() < 3 {
        return Err(HarnessError::Config("convergence needs at least three seeds".into()));
    }
    let jobs: Vec<(Scheme, u64)> = cfg
        .schemes
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(scheme, seed)| {
            Ok(SeedRun {
                scheme,
                seed,
                log: run_train(cfg, scheme, seed)?.log,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let best = runs
        .iter()
        .map(|r| best_trailing_mean(&r.log, cfg.threshold_window))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Convergence {
        runs,
        episodes: cfg.episodes,
        window: cfg.threshold_window,
        best,
        threshold: cfg.threshold_fraction * best,
    })
}

pub fn fel_dataset(cfg: &ExperimentConfig) -> Result<VerticalDataset, HarnessError> {
    Ok(match &cfg.fel_data {
        Some(path) => {
            let data = VerticalDataset::from_csv_file(path, None)?;
            let shards = qkdprov_core::fel::even_shards(data.dim(), cfg.fel_workers)?;
            VerticalDataset::from_csv_file(path, Some(shards))?
        }
        None => VerticalDataset::synthetic(
            cfg.fel_samples,
            cfg.fel_dim,
            cfg.fel_workers,
            cfg.fel_separation,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )?,
    })
}

/// Final training loss per key-rate budget.
pub fn run_fel_curve(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>, HarnessError> {
    let data = fel_dataset(cfg)?;
    let train = TrainConfig {
        epochs: cfg.fel_epochs,
        learning_rate: cfg.fel_learning_rate,
        ..TrainConfig::default()
    };
    Ok(key_rate_sweep(&data, &cfg.fel_rates, cfg.fel_per_channel_rate, &train)?)
}

/// Gnuplot script drawing columns `ys` of `csv` against column `x` (1-based).
pub fn plot_script(csv: &str, title: &str, xlabel: &str, ylabel: &str, x: usize, ys: &[usize]) -> String {
    let mut out = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset title '{title}'\nset xlabel '{xlabel}'\nset ylabel '{ylabel}'\nplot "
    );
    let series: Vec<String> = ys
        .iter()
        .map(|c| format!("'{csv}' using {x}:{c} with linespoints"))
        .collect();
    out += &series.join(", ");
    out += "\n";
    out
}
