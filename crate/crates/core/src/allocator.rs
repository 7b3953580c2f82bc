//! Reservation planning.
//!
//! With routes fixed to shortest paths, the two-stage objective
//! `C^b(X^b, F^b) + Σ_k p(k) C^o(X^o(k), F^o(k))` is a sum of independent
//! per-link, per-class terms. Each term is a discrete newsvendor problem:
//! reserve `w` units at price `c_b` and buy the shortfall `max(0, d_k - w)`
//! at price `c_o` once the scenario is known. QKD wavelengths are bought in
//! triples, so the QKD newsvendor runs in triple units.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::cost::{
    concurrent_links, link_stage_cost, link_unit_prices, plan_cost, CostError, CostTable, LinkWavelengths,
    PhysicalParams, PlanCost, ProvisioningPlan, Stage,
};
use crate::demand::ScenarioSet;
use crate::topology::{
    assign_wavelengths, k_shortest_paths, shortest_path, validate_assignment, ConstraintViolation, LinkId,
    NetworkTopology, Route, TopologyError, TransmissionRequest, WavelengthAssignment, WavelengthClass,
    WavelengthDemand, WavelengthError,
};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Wavelength(#[from] WavelengthError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("infeasible: demand exceeds capacity on {}", .0.join(", "))]
    Infeasible(Vec<String>),
    #[error("instance too large for the exhaustive oracle: {0}")]
    TooLarge(String),
}

impl SolveError {
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            SolveError::Infeasible(_) | SolveError::Wavelength(_) | SolveError::Cost(CostError::Capacity { .. })
        )
    }
}

/// Shortest-path route for every request, keyed by request id.
pub fn route_all(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
) -> Result<BTreeMap<usize, Route>, SolveError> {
    requests
        .iter()
        .map(|r| Ok((r.id, shortest_path(topo, r.source, r.destination)?)))
        .collect()
}

/// Per-link wavelength demand of a routed request set, per scenario.
#[derive(Clone, Debug)]
pub struct DemandProfile {
    params: PhysicalParams,
    levels: Vec<u32>,
    /// Request ids routed over each link.
    link_requests: Vec<Vec<usize>>,
    request_ids: Vec<usize>,
    /// `[scenario][link]`
    demand: Vec<Vec<LinkWavelengths>>,
}

impl DemandProfile {
    pub fn new(
        topo: &NetworkTopology,
        routes: &BTreeMap<usize, Route>,
        scenarios: &ScenarioSet,
        params: &PhysicalParams,
    ) -> Self {
        let mut link_requests = vec![Vec::new(); topo.link_count()];
        for (&id, route) in routes {
            for l in &route.links {
                link_requests[l.0].push(id);
            }
        }
        let mut profile = DemandProfile {
            params: *params,
            levels: scenarios.levels().to_vec(),
            link_requests,
            request_ids: routes.keys().copied().collect(),
            demand: Vec::new(),
        };
        profile.demand = profile.levels.iter().map(|&k| profile.at_level(k)).collect();
        profile
    }

    /// Concurrent MDI-QKD links each request needs at demand `level`.
    pub fn rho(&self, level: u32) -> u32 {
        concurrent_links(level as f64, &self.params)
    }

    /// Link demand if every request asked for `level`. Defined for any
    /// level, including ones outside the scenario set.
    pub fn at_level(&self, level: u32) -> Vec<LinkWavelengths> {
        let rho = self.rho(level);
        self.link_requests
            .iter()
            .map(|reqs| {
                let n = reqs.len() as u32;
                if rho == 0 {
                    LinkWavelengths::default()
                } else {
                    LinkWavelengths::new(n, 3 * rho * n)
                }
            })
            .collect()
    }

    /// Per-request wavelength need at `level`; requests with zero concurrent
    /// links need nothing.
    pub fn request_demands(&self, level: u32) -> BTreeMap<usize, WavelengthDemand> {
        let rho = self.rho(level);
        let d = if rho == 0 {
            WavelengthDemand::default()
        } else {
            WavelengthDemand { km: 1, qkd: 3 * rho }
        };
        self.request_ids.iter().map(|&id| (id, d)).collect()
    }

    pub fn scenario(&self, index: usize) -> &[LinkWavelengths] {
        &self.demand[index]
    }

    pub fn scenario_count(&self) -> usize {
        self.demand.len()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn link_count(&self) -> usize {
        self.link_requests.len()
    }

    pub fn requests_on(&self, link: LinkId) -> &[usize] {
        &self.link_requests[link.0]
    }

    /// Largest demand across scenarios, per link.
    pub fn max_demand(&self) -> Vec<LinkWavelengths> {
        (0..self.link_count())
            .map(|l| {
                self.demand.iter().fold(LinkWavelengths::default(), |acc, row| {
                    LinkWavelengths::new(acc.km.max(row[l].km), acc.qkd.max(row[l].qkd))
                })
            })
            .collect()
    }

    /// Demand sequence of one link and class across scenarios; QKD in triples.
    pub fn link_series(&self, link: LinkId, class: WavelengthClass) -> Vec<u32> {
        self.demand
            .iter()
            .map(|row| match class {
                WavelengthClass::Km => row[link.0].km,
                WavelengthClass::Qkd => row[link.0].qkd / 3,
            })
            .collect()
    }

    /// Links whose demand (in any scenario) exceeds capacity.
    pub fn bottlenecks(&self, topo: &NetworkTopology) -> Vec<String> {
        self.max_demand()
            .iter()
            .enumerate()
            .filter_map(|(li, d)| {
                let over_km = d.km > topo.km_capacity();
                let over_qkd = d.qkd > topo.qkd_capacity();
                (over_km || over_qkd).then(|| {
                    format!(
                        "{} (KM {}/{}, QKD {}/{})",
                        topo.link_label(LinkId(li)),
                        d.km,
                        topo.km_capacity(),
                        d.qkd,
                        topo.qkd_capacity()
                    )
                })
            })
            .collect()
    }
}

/// Outcome of one planning scheme.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub solver: String,
    pub plan: ProvisioningPlan,
    pub cost: PlanCost,
    pub routes: BTreeMap<usize, Route>,
    /// Wavelength assignment per scenario.
    pub assignments: Vec<WavelengthAssignment>,
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn expected_total(&self) -> f64 {
        self.cost.expected_total
    }

    /// `link,reserved_km,reserved_qkd,expected_on_demand_km,expected_on_demand_qkd`
    /// rows followed by `expected_total=<float>`.
    pub fn to_csv(&self, topo: &NetworkTopology, scenarios: &ScenarioSet) -> String {
        let mut out = String::from("link,reserved_km,reserved_qkd,expected_on_demand_km,expected_on_demand_qkd\n");
        for (li, r) in self.plan.reserved.iter().enumerate() {
            let (mut ekm, mut eqkd) = (0.0, 0.0);
            for (row, p) in self.plan.on_demand.iter().zip(scenarios.probabilities()) {
                ekm += p * row[li].km as f64;
                eqkd += p * row[li].qkd as f64;
            }
            let _ = writeln!(out, "{},{},{},{},{}", topo.link_label(LinkId(li)), r.km, r.qkd, ekm, eqkd);
        }
        let _ = writeln!(out, "expected_total={}", self.cost.expected_total);
        out
    }
}

/// Plans reserving `reserved` per link, with shortfall recourse per scenario.
fn recourse_plan(profile: &DemandProfile, reserved: Vec<LinkWavelengths>) -> ProvisioningPlan {
    let on_demand = (0..profile.scenario_count())
        .map(|k| {
            profile
                .scenario(k)
                .iter()
                .zip(&reserved)
                .map(|(d, r)| LinkWavelengths::new(d.km.saturating_sub(r.km), d.qkd.saturating_sub(r.qkd)))
                .collect()
        })
        .collect();
    ProvisioningPlan { reserved, on_demand }
}

struct Instance<'a> {
    topo: &'a NetworkTopology,
    scenarios: &'a ScenarioSet,
    costs: &'a CostTable,
    params: &'a PhysicalParams,
    routes: BTreeMap<usize, Route>,
    profile: DemandProfile,
}

impl<'a> Instance<'a> {
    fn new(
        topo: &'a NetworkTopology,
        requests: &[TransmissionRequest],
        scenarios: &'a ScenarioSet,
        costs: &'a CostTable,
        params: &'a PhysicalParams,
    ) -> Result<Self, SolveError> {
        let routes = route_all(topo, requests)?;
        let profile = DemandProfile::new(topo, &routes, scenarios, params);
        let bottlenecks = profile.bottlenecks(topo);
        if !bottlenecks.is_empty() {
            return Err(SolveError::Infeasible(bottlenecks));
        }
        Ok(Instance {
            topo,
            scenarios,
            costs,
            params,
            routes,
            profile,
        })
    }

    fn finish(self, solver: &str, reserved: Vec<LinkWavelengths>, start: Instant) -> Result<SolveReport, SolveError> {
        let plan = recourse_plan(&self.profile, reserved);
        let cost = plan_cost(&plan, self.topo, self.scenarios, self.costs, self.params)?;
        let assignments = self
            .profile
            .levels()
            .iter()
            .map(|&k| assign_wavelengths(self.topo, &self.routes, &self.profile.request_demands(k)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SolveReport {
            solver: solver.to_string(),
            plan,
            cost,
            routes: self.routes,
            assignments,
            wall_time: start.elapsed(),
        })
    }

    /// Reservation equal to the demand at `level` on every link, clamped to capacity.
    fn level_reservation(&self, levels: impl Iterator<Item = u32>) -> Vec<LinkWavelengths> {
        let km_cap = self.topo.km_capacity();
        let qkd_cap = self.topo.qkd_capacity() / 3 * 3;
        let mut cache: BTreeMap<u32, Vec<LinkWavelengths>> = BTreeMap::new();
        levels
            .enumerate()
            .map(|(li, level)| {
                let d = cache.entry(level).or_insert_with(|| self.profile.at_level(level))[li];
                LinkWavelengths::new(d.km.min(km_cap), d.qkd.min(qkd_cap))
            })
            .collect()
    }
}

/// Reserves exactly the demand of a known level; no recourse.
pub fn solve_deterministic(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    level: u32,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let scenarios = ScenarioSet::certain(level);
    let inst = Instance::new(topo, requests, &scenarios, costs, params)?;
    let reserved = inst.profile.scenario(0).to_vec();
    inst.finish("deterministic", reserved, start)
}

/// Expected cost of reserving `w` units under discrete demand.
pub fn newsvendor_cost(demands: &[u32], probabilities: &[f64], reserved_price: f64, on_demand_price: f64, w: u32) -> f64 {
    reserved_price * w as f64
        + demands
            .iter()
            .zip(probabilities)
            .map(|(&d, &p)| p * on_demand_price * d.saturating_sub(w) as f64)
            .sum::<f64>()
}

/// Optimal reservation by enumerating `w ∈ 0..=max d`. Costs within a
/// relative 1e-12 of the minimum count as ties, which go to the smaller `w`.
pub fn newsvendor_enumerate(demands: &[u32], probabilities: &[f64], reserved_price: f64, on_demand_price: f64) -> (u32, f64) {
    let max = demands.iter().copied().max().unwrap_or(0);
    let costs: Vec<f64> = (0..=max)
        .map(|w| newsvendor_cost(demands, probabilities, reserved_price, on_demand_price, w))
        .collect();
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1.0);
    let w = costs.iter().position(|&c| c <= best + tol).unwrap_or(0);
    (w as u32, costs[w])
}

/// Smallest `w` with `P(d <= w) >= 1 - c_b / c_o`.
pub fn critical_fractile(demands: &[u32], probabilities: &[f64], reserved_price: f64, on_demand_price: f64) -> u32 {
    if on_demand_price <= reserved_price {
        return 0;
    }
    let target = 1.0 - reserved_price / on_demand_price;
    let max = demands.iter().copied().max().unwrap_or(0);
    for w in 0..=max {
        let cdf: f64 = demands
            .iter()
            .zip(probabilities)
            .filter(|(&d, _)| d <= w)
            .map(|(_, &p)| p)
            .sum();
        if cdf >= target - 1e-12 {
            return w;
        }
    }
    max
}

/// Two-stage stochastic plan: exact per-link newsvendor on shortest-path
/// routes.
pub fn solve_sip(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let inst = Instance::new(topo, requests, scenarios, costs, params)?;
    let reserved = sip_reservation(topo, &inst.profile, scenarios, costs, params);
    inst.finish("sip", reserved, start)
}

/// Per-link newsvendor reservations for a demand profile.
pub fn sip_reservation(
    topo: &NetworkTopology,
    profile: &DemandProfile,
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Vec<LinkWavelengths> {
    let probs = scenarios.probabilities();
    topo.link_ids()
        .map(|l| {
            let prices = link_unit_prices(topo.link(l).length_km, costs, params);
            let km = profile.link_series(l, WavelengthClass::Km);
            let triples = profile.link_series(l, WavelengthClass::Qkd);
            let (w_km, _) = newsvendor_enumerate(&km, probs, prices.km_reserved, prices.km_on_demand);
            let (w_tr, _) = newsvendor_enumerate(&triples, probs, prices.triple_reserved, prices.triple_on_demand);
            LinkWavelengths::new(w_km, 3 * w_tr)
        })
        .collect()
}

/// Level of the rounded mean demand.
pub fn mean_level(scenarios: &ScenarioSet) -> u32 {
    scenarios.mean_level().round() as u32
}

/// Expected-value baseline: reserve the demand of the mean level.
pub fn evf_plan(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let inst = Instance::new(topo, requests, scenarios, costs, params)?;
    let level = mean_level(scenarios);
    let reserved = inst.level_reservation(std::iter::repeat_n(level, topo.link_count()));
    inst.finish("evf", reserved, start)
}

/// Random baseline: each link reserves the demand of a level drawn
/// uniformly from `0..=max_level`.
pub fn random_plan<R: Rng + ?Sized>(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
    max_level: u32,
    rng: &mut R,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let inst = Instance::new(topo, requests, scenarios, costs, params)?;
    let levels: Vec<u32> = (0..topo.link_count()).map(|_| rng.random_range(0..=max_level)).collect();
    let reserved = inst.level_reservation(levels.into_iter());
    inst.finish("random", reserved, start)
}

/// Mean expected cost over `draws` random plans (levels up to `|Ω|`).
pub fn random_plan_mean<R: Rng + ?Sized>(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), SolveError> {
    assert!(draws > 0, "need at least one draw");
    let inst = Instance::new(topo, requests, scenarios, costs, params)?;
    let max_level = scenarios.len() as u32;
    let mut totals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let levels: Vec<u32> = (0..topo.link_count()).map(|_| rng.random_range(0..=max_level)).collect();
        let plan = recourse_plan(&inst.profile, inst.level_reservation(levels.into_iter()));
        totals.push(plan_cost(&plan, topo, scenarios, costs, params)?.expected_total);
    }
    Ok((totals.iter().sum::<f64>() / draws as f64, totals))
}

/// Expected cost when every link reserves the demand of the same `level`.
pub fn uniform_level_cost(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
    level: u32,
) -> Result<PlanCost, SolveError> {
    let inst = Instance::new(topo, requests, scenarios, costs, params)?;
    let plan = recourse_plan(&inst.profile, inst.level_reservation(std::iter::repeat_n(level, topo.link_count())));
    Ok(plan_cost(&plan, topo, scenarios, costs, params)?)
}

/// Size limits of [`brute_force_oracle`].
pub const ORACLE_MAX_NODES: usize = 6;
pub const ORACLE_MAX_REQUESTS: usize = 4;
pub const ORACLE_MAX_SCENARIOS: usize = 3;
pub const ORACLE_MAX_PATHS: usize = 3;

/// Exhaustive minimum of the two-stage objective over every combination of
/// up to `paths_per_request` candidate paths per request and every
/// reservation `0..=max demand` on every link and class.
///
/// For a fixed path choice the objective is a sum of terms that each depend
/// on one link and class only, so the minimum over the product of
/// reservation grids is the sum of per-term grid minima; each grid is still
/// scanned in full. Path choices whose worst-case demand exceeds capacity
/// are skipped.
pub fn brute_force_oracle(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
    paths_per_request: usize,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    if topo.node_count() > ORACLE_MAX_NODES
        || requests.len() > ORACLE_MAX_REQUESTS
        || scenarios.len() > ORACLE_MAX_SCENARIOS
        || paths_per_request > ORACLE_MAX_PATHS
        || paths_per_request == 0
    {
        return Err(SolveError::TooLarge(format!(
            "{} nodes, {} requests, {} scenarios, {} paths (limits {ORACLE_MAX_NODES}/{ORACLE_MAX_REQUESTS}/{ORACLE_MAX_SCENARIOS}/{ORACLE_MAX_PATHS})",
            topo.node_count(),
            requests.len(),
            scenarios.len(),
            paths_per_request
        )));
    }
    let candidates: Vec<Vec<Route>> = requests
        .iter()
        .map(|r| k_shortest_paths(topo, r.source, r.destination, paths_per_request))
        .collect::<Result<_, _>>()?;
    let reserved_prices = costs.prices(Stage::Reserved);
    let on_demand_prices = costs.prices(Stage::OnDemand);
    let probs = scenarios.probabilities();

    let mut best: Option<(f64, BTreeMap<usize, Route>, Vec<LinkWavelengths>)> = None;
    let mut choice = vec![0usize; requests.len()];
    loop {
        let routes: BTreeMap<usize, Route> = requests
            .iter()
            .zip(&choice)
            .map(|(r, &c)| (r.id, candidates_for(&candidates, r, requests, c)))
            .collect();
        let profile = DemandProfile::new(topo, &routes, scenarios, params);
        if profile.bottlenecks(topo).is_empty() {
            let mut total = 0.0;
            let mut reserved = Vec::with_capacity(topo.link_count());
            for l in topo.link_ids() {
                let len = topo.link(l).length_km;
                let series: Vec<LinkWavelengths> =
                    (0..profile.scenario_count()).map(|k| profile.scenario(k)[l.0]).collect();
                let max_km = series.iter().map(|d| d.km).max().unwrap_or(0);
                let max_tr = series.iter().map(|d| d.qkd / 3).max().unwrap_or(0);
                let eval = |r: LinkWavelengths| {
                    link_stage_cost(len, r, &reserved_prices, params)
                        + series
                            .iter()
                            .zip(probs)
                            .map(|(d, p)| {
                                let short =
                                    LinkWavelengths::new(d.km.saturating_sub(r.km), d.qkd.saturating_sub(r.qkd));
                                p * link_stage_cost(len, short, &on_demand_prices, params)
                            })
                            .sum::<f64>()
                };
                let scan = |make: &dyn Fn(u32) -> LinkWavelengths, max: u32| {
                    let mut arg = 0;
                    let mut val = eval(make(0));
                    for w in 1..=max {
                        let c = eval(make(w));
                        if c < val - 1e-12 * val.abs().max(1.0) {
                            val = c;
                            arg = w;
                        }
                    }
                    (arg, val)
                };
                let (w_km, c_km) = scan(&|w| LinkWavelengths::new(w, 0), max_km);
                let (w_tr, c_tr) = scan(&|w| LinkWavelengths::new(0, 3 * w), max_tr);
                total += c_km + c_tr;
                reserved.push(LinkWavelengths::new(w_km, 3 * w_tr));
            }
            let better = match &best {
                None => true,
                Some((b, _, _)) => total < *b - 1e-9 * b.abs().max(1.0),
            };
            if better {
                best = Some((total, routes, reserved));
            }
        }
        if !advance(&mut choice, &candidates) {
            break;
        }
    }
    let Some((_, routes, reserved)) = best else {
        return Err(SolveError::Infeasible(vec!["every candidate routing".into()]));
    };
    let profile = DemandProfile::new(topo, &routes, scenarios, params);
    let inst = Instance {
        topo,
        scenarios,
        costs,
        params,
        routes,
        profile,
    };
    inst.finish("oracle", reserved, start)
}

fn candidates_for(cands: &[Vec<Route>], r: &TransmissionRequest, requests: &[TransmissionRequest], c: usize) -> Route {
    let idx = requests.iter().position(|q| q.id == r.id).expect("request present");
    cands[idx][c].clone()
}

/// Odometer increment over candidate indices.
fn advance(choice: &mut [usize], candidates: &[Vec<Route>]) -> bool {
    for i in (0..choice.len()).rev() {
        if choice[i] + 1 < candidates[i].len() {
            choice[i] += 1;
            return true;
        }
        choice[i] = 0;
    }
    false
}

/// Independent check of a report against the two-stage constraint set:
/// flow conservation per scenario, demand satisfaction, triple coupling,
/// wavelength continuity, capacity and uniqueness.
pub fn validate_report(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    scenarios: &ScenarioSet,
    params: &PhysicalParams,
    report: &SolveReport,
) -> Result<(), ConstraintViolation> {
    let plan = &report.plan;
    if report.assignments.len() != scenarios.len() || plan.on_demand.len() != scenarios.len() {
        return Err(ConstraintViolation::BrokenPath { request: usize::MAX });
    }
    for (li, r) in plan.reserved.iter().enumerate() {
        if r.qkd % 3 != 0 {
            return Err(ConstraintViolation::NotTriples {
                link: LinkId(li),
                value: r.qkd,
            });
        }
    }
    for (k, level) in scenarios.levels().iter().enumerate() {
        let rho = concurrent_links(*level as f64, params);
        let demands: BTreeMap<usize, WavelengthDemand> = requests
            .iter()
            .map(|r| {
                let d = if rho == 0 {
                    WavelengthDemand::default()
                } else {
                    WavelengthDemand { km: 1, qkd: 3 * rho }
                };
                (r.id, d)
            })
            .collect();
        let assignment = &report.assignments[k];
        validate_assignment(topo, requests, &report.routes, &demands, assignment)?;
        for req in requests {
            let route = &report.routes[&req.id];
            for &l in &route.links {
                let (km, qkd) = assignment
                    .entries
                    .get(&(req.id, l))
                    .map(|c| (c.km.len() as u32, c.qkd.len() as u32))
                    .unwrap_or((0, 0));
                if qkd != 3 * rho * km {
                    return Err(ConstraintViolation::TripleCoupling { request: req.id, qkd, km });
                }
            }
        }
        for l in topo.link_ids() {
            let od = plan.on_demand[k][l.0];
            if od.qkd % 3 != 0 {
                return Err(ConstraintViolation::NotTriples { link: l, value: od.qkd });
            }
            for class in [WavelengthClass::Km, WavelengthClass::Qkd] {
                let demand = assignment.used_on(l, class);
                let reserved = plan.reserved[l.0].get(class);
                let on_demand = od.get(class);
                if reserved + on_demand < demand {
                    return Err(ConstraintViolation::Shortfall {
                        link: l,
                        class,
                        reserved,
                        on_demand,
                        demand,
                    });
                }
                let capacity = topo.capacity(class);
                if reserved + on_demand > capacity {
                    return Err(ConstraintViolation::Capacity {
                        link: l,
                        class,
                        used: reserved + on_demand,
                        capacity,
                    });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::build_scenarios;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triangle() -> NetworkTopology {
        NetworkTopology::new(
            &["a", "b", "c"],
            &[("a", "b", 160.0), ("b", "c", 160.0), ("a", "c", 400.0)],
            300,
            100,
        )
        .unwrap()
    }

    fn one_link() -> NetworkTopology {
        NetworkTopology::new(&["a", "b"], &[("a", "b", 160.0)], 300, 100).unwrap()
    }

    #[test]
    fn routes_follow_shortest_paths() {
        let t = triangle();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "c").unwrap()];
        let routes = route_all(&t, &reqs).unwrap();
        assert_eq!(routes[&0].nodes.len(), 3);
        assert!(route_all(&t, &[]).unwrap().is_empty());
    }

    #[test]
    fn deterministic_single_request_single_link() {
        let t = one_link();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "b").unwrap()];
        let r = solve_deterministic(&t, &reqs, 1, &CostTable::default(), &PhysicalParams::default()).unwrap();
        assert_eq!(r.plan.reserved, vec![LinkWavelengths::new(1, 3)]);
        assert_eq!(r.expected_total(), 8590.0);
        let zero = solve_deterministic(&t, &reqs, 0, &CostTable::default(), &PhysicalParams::default()).unwrap();
        assert_eq!(zero.plan.reserved, vec![LinkWavelengths::default()]);
        assert_eq!(zero.expected_total(), 0.0);
    }

    #[test]
    fn deterministic_shared_link_adds_demand() {
        let t = one_link();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "b").unwrap(),
            TransmissionRequest::new(&t, 1, "b", "a").unwrap(),
        ];
        let r = solve_deterministic(&t, &reqs, 1, &CostTable::default(), &PhysicalParams::default()).unwrap();
        assert_eq!(r.plan.reserved, vec![LinkWavelengths::new(2, 6)]);
    }

    #[test]
    fn deterministic_reports_bottlenecks() {
        let t = one_link().with_capacities(3, 1).unwrap();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "b").unwrap(),
            TransmissionRequest::new(&t, 1, "a", "b").unwrap(),
        ];
        let err = solve_deterministic(&t, &reqs, 1, &CostTable::default(), &PhysicalParams::default()).unwrap_err();
        assert!(err.is_infeasible());
        assert!(err.to_string().contains("a-b"));
    }

    #[test]
    fn toy_newsvendor_breaks_tie_low() {
        let d = [0, 1, 2];
        let p = [0.25, 0.5, 0.25];
        assert_eq!(newsvendor_cost(&d, &p, 10.0, 40.0, 0), 40.0);
        assert_eq!(newsvendor_cost(&d, &p, 10.0, 40.0, 1), 20.0);
        assert_eq!(newsvendor_cost(&d, &p, 10.0, 40.0, 2), 20.0);
        assert_eq!(newsvendor_enumerate(&d, &p, 10.0, 40.0), (1, 20.0));
        assert_eq!(critical_fractile(&d, &p, 10.0, 40.0), 1);
    }

    #[test]
    fn equal_prices_reserve_nothing() {
        let d = [3, 5, 9];
        let p = [0.2, 0.3, 0.5];
        assert_eq!(newsvendor_enumerate(&d, &p, 7.0, 7.0).0, 0);
        assert_eq!(critical_fractile(&d, &p, 7.0, 7.0), 0);
    }

    #[test]
    fn sip_with_one_scenario_matches_deterministic() {
        let t = triangle();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "b", "c").unwrap(),
        ];
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        let s = ScenarioSet::certain(4);
        let sip = solve_sip(&t, &reqs, &s, &costs, &p).unwrap();
        let det = solve_deterministic(&t, &reqs, 4, &costs, &p).unwrap();
        assert_eq!(sip.plan, det.plan);
        assert_eq!(sip.expected_total(), det.expected_total());
        let evf = evf_plan(&t, &reqs, &s, &costs, &p).unwrap();
        assert_eq!(evf.plan, sip.plan);
    }

    #[test]
    fn demand_profile_is_monotone_and_in_triples() {
        let t = triangle();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "b", "c").unwrap(),
        ];
        let routes = route_all(&t, &reqs).unwrap();
        let s = build_scenarios(10, None).unwrap();
        let prof = DemandProfile::new(&t, &routes, &s, &PhysicalParams::new(160.0, 2.0));
        for k in 1..prof.scenario_count() {
            for (a, b) in prof.scenario(k - 1).iter().zip(prof.scenario(k)) {
                assert!(b.km >= a.km && b.qkd >= a.qkd);
                assert_eq!(b.qkd % 3, 0);
            }
        }
        // b-c carries both requests
        let bc = t.link_ids().find(|&l| t.link_label(l) == "b-c").unwrap();
        assert_eq!(prof.scenario(5)[bc.0], LinkWavelengths::new(2, 2 * 3 * 3));
    }

    #[test]
    fn evf_reserves_at_rounded_mean() {
        let s = build_scenarios(10, None).unwrap();
        assert_eq!(mean_level(&s), 3);
        let t = one_link();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "b").unwrap()];
        let r = evf_plan(&t, &reqs, &s, &CostTable::default(), &PhysicalParams::default()).unwrap();
        assert_eq!(r.plan.reserved, vec![LinkWavelengths::new(1, 9)]);
    }

    #[test]
    fn degenerate_distribution_has_no_recourse() {
        let t = one_link();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "b").unwrap()];
        let s = ScenarioSet::from_pairs(&[(0, 0.0), (1, 0.0), (2, 1.0)]).unwrap();
        let r = evf_plan(&t, &reqs, &s, &CostTable::default(), &PhysicalParams::default()).unwrap();
        assert_eq!(r.plan.reserved, vec![LinkWavelengths::new(1, 6)]);
        assert_eq!(r.cost.expected_second_stage(), 0.0);
    }

    #[test]
    fn random_plan_zero_range_and_determinism() {
        let t = triangle();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "c").unwrap()];
        let s = build_scenarios(10, None).unwrap();
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_plan(&t, &reqs, &s, &costs, &p, 0, &mut rng).unwrap();
        assert!(r.plan.reserved.iter().all(|w| *w == LinkWavelengths::default()));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_plan(&t, &reqs, &s, &costs, &p, 10, &mut rng).unwrap().plan
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn sip_dominates_baselines_on_small_instance() {
        let t = triangle();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "a", "b").unwrap(),
            TransmissionRequest::new(&t, 2, "c", "b").unwrap(),
        ];
        let s = build_scenarios(10, None).unwrap();
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        let sip = solve_sip(&t, &reqs, &s, &costs, &p).unwrap();
        let evf = evf_plan(&t, &reqs, &s, &costs, &p).unwrap();
        assert!(sip.expected_total() <= evf.expected_total() + 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mean, draws) = random_plan_mean(&t, &reqs, &s, &costs, &p, 100, &mut rng).unwrap();
        assert!(draws.iter().all(|&c| c >= sip.expected_total() - 1e-9));
        assert!(mean >= sip.expected_total());
        for r in [&sip, &evf] {
            validate_report(&t, &reqs, &s, &p, r).unwrap();
        }
    }

    #[test]
    fn report_csv_has_stable_header_and_summary() {
        let t = one_link();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "b").unwrap()];
        let s = build_scenarios(3, Some(1.0)).unwrap();
        let r = solve_sip(&t, &reqs, &s, &CostTable::default(), &PhysicalParams::default()).unwrap();
        let csv = r.to_csv(&t, &s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "link,reserved_km,reserved_qkd,expected_on_demand_km,expected_on_demand_qkd");
        assert!(lines[1].starts_with("a-b,"));
        assert_eq!(lines[2], format!("expected_total={}", r.expected_total()));
    }

    #[test]
    fn oracle_single_path_collapses_to_newsvendor() {
        let t = one_link();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "b").unwrap()];
        let s = build_scenarios(3, Some(1.0)).unwrap();
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        let o = brute_force_oracle(&t, &reqs, &s, &costs, &p, 3).unwrap();
        let sip = solve_sip(&t, &reqs, &s, &costs, &p).unwrap();
        assert_eq!(o.plan, sip.plan);
        assert!((o.expected_total() - sip.expected_total()).abs() < 1e-9);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let t = triangle();
        let reqs: Vec<_> = (0..5).map(|i| TransmissionRequest::new(&t, i, "a", "c").unwrap()).collect();
        let s = build_scenarios(3, None).unwrap();
        let err = brute_force_oracle(&t, &reqs, &s, &CostTable::default(), &PhysicalParams::default(), 2);
        assert!(matches!(err, Err(SolveError::TooLarge(_))));
    }

    #[test]
    fn oracle_beats_shortest_path_when_segments_favor_detour() {
        // a-b-c is 200 km over two single-segment links; the direct 210 km
        // link needs two segments but only one set of endpoints.
        let t = NetworkTopology::new(
            &["a", "b", "c"],
            &[("a", "b", 100.0), ("b", "c", 100.0), ("a", "c", 210.0)],
            300,
            100,
        )
        .unwrap();
        let reqs = vec![TransmissionRequest::new(&t, 0, "a", "c").unwrap()];
        let s = build_scenarios(3, Some(1.0)).unwrap();
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        let sip = solve_sip(&t, &reqs, &s, &costs, &p).unwrap();
        let o = brute_force_oracle(&t, &reqs, &s, &costs, &p, 2).unwrap();
        assert!(o.expected_total() < sip.expected_total());
        assert_eq!(o.routes[&0].links.len(), 1);
        validate_report(&t, &reqs, &s, &p, &o).unwrap();
    }

    #[test]
    fn oracle_reroutes_around_congestion() {
        // KM capacity 1 on a-b: two requests a->c cannot both use a-b-c.
        let t = NetworkTopology::new(
            &["a", "b", "c"],
            &[("a", "b", 160.0), ("b", "c", 160.0), ("a", "c", 400.0)],
            300,
            1,
        )
        .unwrap();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "a", "c").unwrap(),
        ];
        let s = build_scenarios(3, Some(1.0)).unwrap();
        let costs = CostTable::default();
        let p = PhysicalParams::default();
        assert!(solve_sip(&t, &reqs, &s, &costs, &p).unwrap_err().is_infeasible());
        let o = brute_force_oracle(&t, &reqs, &s, &costs, &p, 2).unwrap();
        validate_report(&t, &reqs, &s, &p, &o).unwrap();
    }

    #[test]
    fn validator_catches_shortfall_and_corrupted_index() {
        let t = triangle();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "b", "c").unwrap(),
        ];
        let s = build_scenarios(4, Some(2.0)).unwrap();
        let p = PhysicalParams::default();
        let r = solve_sip(&t, &reqs, &s, &CostTable::default(), &p).unwrap();
        validate_report(&t, &reqs, &s, &p, &r).unwrap();

        let mut bad = r.clone();
        let last = s.len() - 1;
        let entry = bad.assignments[last].entries.values_mut().next().unwrap();
        entry.qkd[0] += 50;
        assert!(validate_report(&t, &reqs, &s, &p, &bad).is_err());

        let mut short = r.clone();
        for row in &mut short.plan.on_demand {
            for w in row.iter_mut() {
                *w = LinkWavelengths::default();
            }
        }
        for w in &mut short.plan.reserved {
            *w = LinkWavelengths::default();
        }
        assert!(matches!(
            validate_report(&t, &reqs, &s, &p, &short),
            Err(ConstraintViolation::Shortfall { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn enumeration_matches_critical_fractile(
            raw in proptest::collection::vec((0u32..30, 0.01f64..1.0), 1..8),
            cb in 0.1f64..100.0,
            ratio in 1.0f64..10.0,
        ) {
            let total: f64 = raw.iter().map(|r| r.1).sum();
            let d: Vec<u32> = raw.iter().map(|r| r.0).collect();
            let p: Vec<f64> = raw.iter().map(|r| r.1 / total).collect();
            let co = cb * ratio;
            proptest::prop_assert_eq!(newsvendor_enumerate(&d, &p, cb, co).0, critical_fractile(&d, &p, cb, co));
        }
    }
}
