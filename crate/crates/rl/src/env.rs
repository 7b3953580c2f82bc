//! Reservation game over a fixed routed instance.
//!
//! Every agent owns a partition of the links and, each slot, chooses a
//! reservation (KM wavelengths, QKD triples) for each of its links. A demand
//! scenario is then drawn and shortfalls are bought on demand. Observations
//! are each agent's own last `l` reservations and realised shortfalls,
//! normalised per link by the worst-case demand so that every value lies in
//! `[0, 1]`.
//!
//! Managers are rewarded with `C*/max(C, C*)` over their own links, where `C`
//! is the expected two-stage cost of the chosen reservation and `C*` the
//! optimum. Controllers always receive zero.

use std::collections::VecDeque;

use qkdprov_core::allocator::{newsvendor_cost, route_all, sip_reservation, solve_sip, DemandProfile, SolveError};
use qkdprov_core::cost::{link_unit_prices, LinkWavelengths, UnitPrices};
use qkdprov_core::topology::{LinkId, WavelengthClass};
use qkdprov_core::{CostTable, NetworkTopology, PhysicalParams, ScenarioSet, TransmissionRequest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Values per link per history slot: KM and triple reservation, KM and
/// triple shortfall.
pub const FEATURES_PER_LINK: usize = 4;
/// Action coordinates per link.
pub const ACTIONS_PER_LINK: usize = 2;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("agent {agent}: expected {expected} action values, got {got}")]
    Action { agent: usize, expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub history_len: usize,
    pub slots_per_episode: usize,
    /// Links owned by each agent.
    pub partitions: Vec<Vec<LinkId>>,
    /// Agents that receive rewards.
    pub managers: Vec<usize>,
    pub seed: u64,
}

impl EnvConfig {
    /// Round-robin split of all links over `agents`, with the first
    /// `managers` agents rewarded.
    pub fn round_robin(topo: &NetworkTopology, agents: usize, managers: usize, seed: u64) -> Self {
        let mut partitions = vec![Vec::new(); agents];
        for l in topo.link_ids() {
            partitions[l.0 % agents].push(l);
        }
        EnvConfig {
            history_len: 2,
            slots_per_episode: 8,
            partitions,
            managers: (0..managers).collect(),
            seed,
        }
    }

    /// One link per agent and a single-slot history, the layout used with
    /// [`crate::agents::AgentConfig::toy`].
    pub fn toy(topo: &NetworkTopology, managers: usize, seed: u64) -> Self {
        EnvConfig {
            history_len: 1,
            ..EnvConfig::round_robin(topo, topo.link_count(), managers, seed)
        }
    }

    /// Padded partition width shared by every agent.
    pub fn width(&self) -> usize {
        self.partitions.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn observation_dim(&self) -> usize {
        FEATURES_PER_LINK * self.history_len * self.width()
    }

    pub fn action_dim(&self) -> usize {
        ACTIONS_PER_LINK * self.width()
    }

    pub fn agent_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_manager(&self, agent: usize) -> bool {
        self.managers.contains(&agent)
    }

    pub fn validate(&self, link_count: usize) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.history_len == 0 || self.slots_per_episode == 0 {
            return err("history length and slots per episode must be >= 1".into());
        }
        if self.partitions.is_empty() || self.partitions.iter().any(Vec::is_empty) {
            return err("every agent needs at least one link".into());
        }
        let mut seen = vec![false; link_count];
        for l in self.partitions.iter().flatten() {
            if l.0 >= link_count || seen[l.0] {
                return err(format!("link {} is out of range or owned twice", l.0));
            }
            seen[l.0] = true;
        }
        if seen.iter().any(|s| !s) {
            return err("partitions must cover every link".into());
        }
        if self.managers.is_empty() || self.managers.iter().any(|&m| m >= self.partitions.len()) {
            return err("need at least one manager among the agents".into());
        }
        Ok(())
    }
}

/// Per-link quantities the environment needs each step.
#[derive(Clone, Debug)]
struct LinkModel {
    km_max: u32,
    triple_max: u32,
    km_series: Vec<u32>,
    triple_series: Vec<u32>,
    prices: UnitPrices,
    optimum: f64,
}

impl LinkModel {
    fn expected_cost(&self, probs: &[f64], km: u32, triples: u32) -> f64 {
        newsvendor_cost(&self.km_series, probs, self.prices.km_reserved, self.prices.km_on_demand, km)
            + newsvendor_cost(
                &self.triple_series,
                probs,
                self.prices.triple_reserved,
                self.prices.triple_on_demand,
                triples,
            )
    }

    fn realised_cost(&self, scenario: usize, km: u32, triples: u32) -> f64 {
        let dkm = self.km_series[scenario];
        let dtr = self.triple_series[scenario];
        km as f64 * self.prices.km_reserved
            + triples as f64 * self.prices.triple_reserved
            + dkm.saturating_sub(km) as f64 * self.prices.km_on_demand
            + dtr.saturating_sub(triples) as f64 * self.prices.triple_on_demand
    }
}

/// Maps an action coordinate in `[-1, 1]` to `0..=max`, rounding half up.
pub fn decode(a: f64, max: u32) -> u32 {
    let x = ((a.clamp(-1.0, 1.0) + 1.0) / 2.0) * max as f64;
    ((x + 0.5).floor() as u32).min(max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    /// Zero for controllers.
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Index into the scenario set.
    pub scenario: usize,
    /// Realised cost per agent partition in the drawn scenario.
    pub realised_costs: Vec<f64>,
    /// Expected two-stage cost of the joint reservation over all links.
    pub expected_cost: f64,
}

#[derive(Clone, Debug)]
pub struct ProvisioningEnv {
    config: EnvConfig,
    scenarios: ScenarioSet,
    links: Vec<LinkModel>,
    optimal_cost: f64,
    history: Vec<VecDeque<[f64; FEATURES_PER_LINK]>>,
    slot: usize,
    rng: ChaCha8Rng,
}

impl ProvisioningEnv {
    pub fn new(
        topo: &NetworkTopology,
        requests: &[TransmissionRequest],
        scenarios: &ScenarioSet,
        costs: &CostTable,
        params: &PhysicalParams,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        config.validate(topo.link_count())?;
        let routes = route_all(topo, requests)?;
        let profile = DemandProfile::new(topo, &routes, scenarios, params);
        let bottlenecks = profile.bottlenecks(topo);
        if !bottlenecks.is_empty() {
            return Err(SolveError::Infeasible(bottlenecks).into());
        }
        let optimum = sip_reservation(topo, &profile, scenarios, costs, params);
        let probs = scenarios.probabilities();
        let links: Vec<LinkModel> = topo
            .link_ids()
            .map(|l| {
                let km_series = profile.link_series(l, WavelengthClass::Km);
                let triple_series = profile.link_series(l, WavelengthClass::Qkd);
                let mut m = LinkModel {
                    km_max: km_series.iter().copied().max().unwrap_or(0),
                    triple_max: triple_series.iter().copied().max().unwrap_or(0),
                    km_series,
                    triple_series,
                    prices: link_unit_prices(topo.link(l).length_km, costs, params),
                    optimum: 0.0,
                };
                let LinkWavelengths { km, qkd } = optimum[l.0];
                m.optimum = m.expected_cost(probs, km, qkd / 3);
                m
            })
            .collect();
        let optimal_cost: f64 = links.iter().map(|m| m.optimum).sum();
        if optimal_cost <= 0.0 {
            return Err(EnvError::Config("optimal cost is zero; nothing to provision".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut env = ProvisioningEnv {
            history: Vec::new(),
            slot: 0,
            scenarios: scenarios.clone(),
            links,
            optimal_cost,
            config,
            rng,
        };
        env.clear_history();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    /// Optimal expected cost over all links.
    pub fn optimal_cost(&self) -> f64 {
        self.optimal_cost
    }

    /// Optimal expected cost over one agent's links.
    pub fn optimal_cost_of(&self, agent: usize) -> f64 {
        self.config.partitions[agent].iter().map(|l| self.links[l.0].optimum).sum()
    }

    pub fn observation_dim(&self) -> usize {
        self.config.observation_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim()
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    fn clear_history(&mut self) {
        let zeros = [0.0; FEATURES_PER_LINK];
        self.history = (0..self.links.len())
            .map(|_| std::iter::repeat_n(zeros, self.config.history_len).collect())
            .collect();
    }

    /// Zeroes the history and restarts the episode. The scenario stream
    /// continues from the environment's own seeded generator.
    pub fn reset(&mut self) -> Vec<Vec<f64>> {
        self.clear_history();
        self.slot = 0;
        self.observations()
    }

    /// Reseeds the scenario stream and resets.
    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset()
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.config.agent_count()).map(|a| self.observation(a)).collect()
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.observation_dim()];
        let per_link = FEATURES_PER_LINK * self.config.history_len;
        for (slot, l) in self.config.partitions[agent].iter().enumerate() {
            for (h, f) in self.history[l.0].iter().enumerate() {
                let at = slot * per_link + h * FEATURES_PER_LINK;
                obs[at..at + FEATURES_PER_LINK].copy_from_slice(f);
            }
        }
        obs
    }

    /// Integer reservation `(KM, triples)` per owned link.
    pub fn decode_actions(&self, agent: usize, action: &[f64]) -> Result<Vec<(LinkId, u32, u32)>, EnvError> {
        if action.len() != self.action_dim() {
            return Err(EnvError::Action {
                agent,
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        Ok(self.config.partitions[agent]
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let m = &self.links[l.0];
                (
                    l,
                    decode(action[ACTIONS_PER_LINK * i], m.km_max),
                    decode(action[ACTIONS_PER_LINK * i + 1], m.triple_max),
                )
            })
            .collect())
    }

    /// Expected cost over `agent`'s links of a decoded action.
    pub fn expected_cost_of(&self, agent: usize, action: &[f64]) -> Result<f64, EnvError> {
        let probs = self.scenarios.probabilities();
        Ok(self
            .decode_actions(agent, action)?
            .iter()
            .map(|&(l, km, tr)| self.links[l.0].expected_cost(probs, km, tr))
            .sum())
    }

    /// Manager reward of an action, independent of the scenario stream.
    pub fn reward_of(&self, agent: usize, action: &[f64]) -> Result<f64, EnvError> {
        let c = self.expected_cost_of(agent, action)?;
        let star = self.optimal_cost_of(agent);
        Ok(reward(star, c))
    }

    /// Applies one joint action, draws a scenario and advances the slot.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepOutcome, EnvError> {
        if actions.len() != self.config.agent_count() {
            return Err(EnvError::Config(format!(
                "{} agents but {} actions",
                self.config.agent_count(),
                actions.len()
            )));
        }
        let decoded: Vec<Vec<(LinkId, u32, u32)>> = actions
            .iter()
            .enumerate()
            .map(|(a, act)| self.decode_actions(a, act))
            .collect::<Result<_, _>>()?;
        let scenario = self.scenarios.sample_index(&mut self.rng);
        let probs = self.scenarios.probabilities();
        let mut rewards = vec![0.0; actions.len()];
        let mut realised_costs = vec![0.0; actions.len()];
        let mut expected_cost = 0.0;
        for (agent, links) in decoded.iter().enumerate() {
            let mut exp = 0.0;
            for &(l, km, tr) in links {
                let m = &self.links[l.0];
                exp += m.expected_cost(probs, km, tr);
                realised_costs[agent] += m.realised_cost(scenario, km, tr);
                let short_km = m.km_series[scenario].saturating_sub(km);
                let short_tr = m.triple_series[scenario].saturating_sub(tr);
                let h = &mut self.history[l.0];
                h.pop_front();
                h.push_back([
                    ratio(km, m.km_max),
                    ratio(tr, m.triple_max),
                    ratio(short_km, m.km_max),
                    ratio(short_tr, m.triple_max),
                ]);
            }
            expected_cost += exp;
            if self.config.is_manager(agent) {
                rewards[agent] = reward(self.optimal_cost_of(agent), exp);
            }
        }
        self.slot += 1;
        Ok(StepOutcome {
            observations: self.observations(),
            rewards,
            done: self.slot >= self.config.slots_per_episode,
            scenario,
            realised_costs,
            expected_cost,
        })
    }
}

fn ratio(v: u32, max: u32) -> f64 {
    if max == 0 {
        0.0
    } else {
        v as f64 / max as f64
    }
}

/// `C*/max(C, C*)`; one when both are zero.
pub fn reward(optimal: f64, cost: f64) -> f64 {
    if optimal <= 0.0 {
        return if cost <= 0.0 { 1.0 } else { 0.0 };
    }
    optimal / cost.max(optimal)
}

/// Expected total of the two-stage optimum for the instance.
pub fn optimal_reference(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Result<f64, SolveError> {
    Ok(solve_sip(topo, requests, scenarios, costs, params)?.expected_total())
}

/// Small six-node instance for training experiments.
pub fn toy_instance() -> (NetworkTopology, Vec<TransmissionRequest>) {
    let topo = NetworkTopology::new(
        &["n1", "n2", "n3", "n4", "n5", "n6"],
        &[
            ("n1", "n2", 120.0),
            ("n2", "n3", 200.0),
            ("n3", "n4", 150.0),
            ("n4", "n5", 260.0),
            ("n5", "n6", 180.0),
            ("n6", "n1", 300.0),
            ("n1", "n4", 340.0),
            ("n2", "n5", 230.0),
            ("n3", "n6", 280.0),
        ],
        300,
        100,
    )
    .expect("toy topology is valid");
    let pairs = [
        ("n1", "n3"),
        ("n1", "n5"),
        ("n2", "n4"),
        ("n2", "n6"),
        ("n3", "n5"),
        ("n4", "n6"),
        ("n1", "n4"),
        ("n2", "n5"),
        ("n3", "n6"),
        ("n6", "n2"),
        ("n5", "n1"),
        ("n4", "n2"),
    ];
    let requests = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, d))| TransmissionRequest::new(&topo, i, s, d).expect("toy request is valid"))
        .collect();
    (topo, requests)
}
