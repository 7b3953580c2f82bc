//! MDI-QKD component counting and provisioning cost.
//!
//! Every secured segment of length at most `L` needs two quantum
//! transmitters and one untrusted receiver. A link of length `l` is split
//! into `n_seg = ceil(l / L)` segments; trusted relays between segments carry
//! security infrastructure, and each segment endpoint hosts a local key
//! manager.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::demand::ScenarioSet;
use crate::topology::{LinkId, NetworkTopology, Route, WavelengthClass};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid cost table: {0}")]
    Invalid(String),
    #[error("link {link} ({label}): {class} usage {used} exceeds capacity {capacity} in scenario {scenario}")]
    Capacity {
        link: LinkId,
        label: String,
        class: WavelengthClass,
        used: u32,
        capacity: u32,
        scenario: usize,
    },
    #[error("plan shape does not match topology/scenarios: {0}")]
    Shape(String),
    #[error("link {0}: QKD wavelengths must come in triples")]
    NotTriples(LinkId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Physical constants of the QKD layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalParams {
    /// Distance `L` between two connected transmitters, in km.
    pub segment_length_km: f64,
    /// Key units per second one MDI-QKD link sustains at distance `L`.
    pub key_rate_capacity: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            segment_length_km: 160.0,
            key_rate_capacity: 1.0,
        }
    }
}

impl PhysicalParams {
    pub fn new(segment_length_km: f64, key_rate_capacity: f64) -> Self {
        assert!(segment_length_km > 0.0, "segment length must be positive");
        assert!(key_rate_capacity > 0.0, "key-rate capacity must be positive");
        PhysicalParams {
            segment_length_km,
            key_rate_capacity,
        }
    }

    /// Key-rate capacity inversely proportional to the segment length,
    /// `K_L = scale / L`.
    pub fn from_scale(segment_length_km: f64, scale: f64) -> Self {
        PhysicalParams::new(segment_length_km, scale / segment_length_km)
    }

    /// Transmitter-to-receiver distance, half a segment.
    pub fn qt_qr_distance_km(&self) -> f64 {
        self.segment_length_km / 2.0
    }

    /// `ceil(l / L)`.
    pub fn segments(&self, length_km: f64) -> u64 {
        (length_km / self.segment_length_km).ceil() as u64
    }
}

/// Number of concurrent MDI-QKD links needed for a key rate: `ceil(k / K_L)`.
pub fn concurrent_links(key_rate: f64, params: &PhysicalParams) -> u32 {
    assert!(key_rate >= 0.0, "key rate must be non-negative");
    (key_rate / params.key_rate_capacity).ceil() as u32
}

/// Priced component classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostClass {
    /// Quantum transmitter.
    Tx,
    /// Quantum receiver.
    Rx,
    /// Local key manager.
    Km,
    /// Security infrastructure at trusted relays.
    Si,
    /// MUX/DEMUX pair.
    Md,
    /// One wavelength over one km of fiber.
    Ch,
}

impl CostClass {
    pub const ALL: [CostClass; 6] = [
        CostClass::Tx,
        CostClass::Rx,
        CostClass::Km,
        CostClass::Si,
        CostClass::Md,
        CostClass::Ch,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CostClass::Tx => "Tx",
            CostClass::Rx => "Rx",
            CostClass::Km => "KM",
            CostClass::Si => "SI",
            CostClass::Md => "MD",
            CostClass::Ch => "Ch",
        }
    }

    pub fn parse(s: &str) -> Option<CostClass> {
        CostClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for CostClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unit prices for reserved and on-demand purchases.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    reserved: [f64; 6],
    on_demand: [f64; 6],
    on_demand_multiplier: f64,
}

impl Default for CostTable {
    /// Reference prices in normalised monetary units.
    fn default() -> Self {
        CostTable {
            reserved: [1500.0, 2250.0, 1200.0, 150.0, 300.0, 1.0],
            on_demand: [6000.0, 9000.0, 3000.0, 500.0, 900.0, 4.0],
            on_demand_multiplier: 1.0,
        }
    }
}

impl CostTable {
    pub fn new(reserved: [f64; 6], on_demand: [f64; 6]) -> Result<Self, CostError> {
        if reserved.iter().chain(on_demand.iter()).any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CostError::Invalid("prices must be finite and >= 0".into()));
        }
        Ok(CostTable {
            reserved,
            on_demand,
            on_demand_multiplier: 1.0,
        })
    }

    pub fn with_multiplier(mut self, multiplier: f64) -> Self {
        assert!(multiplier.is_finite() && multiplier >= 0.0, "multiplier must be >= 0");
        self.on_demand_multiplier = multiplier;
        self
    }

    pub fn multiplier(&self) -> f64 {
        self.on_demand_multiplier
    }

    pub fn reserved(&self, class: CostClass) -> f64 {
        self.reserved[class.index()]
    }

    /// On-demand price with the multiplier applied.
    pub fn on_demand(&self, class: CostClass) -> f64 {
        self.on_demand[class.index()] * self.on_demand_multiplier
    }

    pub fn prices(&self, stage: Stage) -> [f64; 6] {
        let mut out = [0.0; 6];
        for c in CostClass::ALL {
            out[c.index()] = match stage {
                Stage::Reserved => self.reserved(c),
                Stage::OnDemand => self.on_demand(c),
            };
        }
        out
    }

    /// Classes whose on-demand price undercuts the reserved price.
    pub fn sanity_warnings(&self) -> Vec<String> {
        CostClass::ALL
            .into_iter()
            .filter(|&c| self.on_demand(c) < self.reserved(c))
            .map(|c| {
                format!(
                    "{c}: on-demand price {} below reserved price {}",
                    self.on_demand(c),
                    self.reserved(c)
                )
            })
            .collect()
    }

    /// Parses `cost <class> <reserved> <on_demand>` lines. All six classes
    /// must be present.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut reserved = [f64::NAN; 6];
        let mut on_demand = [f64::NAN; 6];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| CostError::Parse { line: i + 1, message };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "cost" {
                return Err(perr("expected `cost <class> <reserved> <on_demand>`".into()));
            }
            let class = CostClass::parse(parts[1]).ok_or_else(|| perr(format!("unknown class `{}`", parts[1])))?;
            let r: f64 = parts[2].parse().map_err(|_| perr(format!("bad price `{}`", parts[2])))?;
            let o: f64 = parts[3].parse().map_err(|_| perr(format!("bad price `{}`", parts[3])))?;
            reserved[class.index()] = r;
            on_demand[class.index()] = o;
        }
        if let Some(c) = CostClass::ALL.into_iter().find(|c| reserved[c.index()].is_nan()) {
            return Err(CostError::Invalid(format!("missing class {c}")));
        }
        CostTable::new(reserved, on_demand)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CostError> {
        CostTable::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        CostClass::ALL
            .into_iter()
            .map(|c| format!("cost {c} {} {}\n", self.reserved[c.index()], self.on_demand[c.index()]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Reserved,
    OnDemand,
}

/// Hardware needed by one request along its route.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComponentCounts {
    pub qt: u64,
    pub qr: u64,
    pub lkm: u64,
    pub si: u64,
    pub mux_demux: u64,
    pub channel_km: f64,
}

/// Component counts for a request routed on `route` with `rho` concurrent
/// MDI-QKD links.
pub fn request_components(
    topo: &NetworkTopology,
    route: &Route,
    rho: u32,
    params: &PhysicalParams,
) -> ComponentCounts {
    let rho = rho as u64;
    let mut c = ComponentCounts::default();
    for &l in &route.links {
        let len = topo.link(l).length_km;
        let ratio = len / params.segment_length_km;
        let n = ratio.ceil() as u64;
        let relays = (ratio - 1.0).ceil().max(0.0) as u64;
        c.qt += 2 * rho * n;
        c.qr += rho * n;
        c.lkm += (ratio + 1.0).ceil() as u64;
        c.si += relays;
        c.mux_demux += n + relays;
        c.channel_km += 3.0 * rho as f64 * len + len;
    }
    c
}

/// Per-link hardware for one QKD wavelength triple and for one KM wavelength.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkUnitCounts {
    pub length_km: f64,
    pub segments: u64,
    /// Transmitters per triple.
    pub triple_qt: u64,
    /// Receivers per triple.
    pub triple_qr: u64,
    /// Key managers per KM wavelength.
    pub km_lkm: u64,
    /// Relay security infrastructure per KM wavelength.
    pub km_si: u64,
    /// MUX/DEMUX pairs per KM wavelength.
    pub km_md: u64,
}

impl LinkUnitCounts {
    /// Cost of one QKD triple (three wavelengths) at the given prices.
    pub fn triple_cost(&self, prices: &[f64; 6]) -> f64 {
        self.triple_qt as f64 * prices[CostClass::Tx.index()]
            + self.triple_qr as f64 * prices[CostClass::Rx.index()]
            + 3.0 * self.length_km * prices[CostClass::Ch.index()]
    }

    /// Cost of one KM wavelength at the given prices.
    pub fn km_cost(&self, prices: &[f64; 6]) -> f64 {
        self.km_lkm as f64 * prices[CostClass::Km.index()]
            + self.km_si as f64 * prices[CostClass::Si.index()]
            + self.km_md as f64 * prices[CostClass::Md.index()]
            + self.length_km * prices[CostClass::Ch.index()]
    }
}

pub fn link_unit_counts(length_km: f64, params: &PhysicalParams) -> LinkUnitCounts {
    assert!(length_km > 0.0, "link length must be positive");
    let n = params.segments(length_km);
    LinkUnitCounts {
        length_km,
        segments: n,
        triple_qt: 2 * n,
        triple_qr: n,
        km_lkm: n + 1,
        km_si: n.saturating_sub(1),
        km_md: 2 * n - 1,
    }
}

/// Per-unit prices of one link: `(per KM wavelength, per QKD triple)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitPrices {
    pub km_reserved: f64,
    pub km_on_demand: f64,
    pub triple_reserved: f64,
    pub triple_on_demand: f64,
}

pub fn link_unit_prices(length_km: f64, costs: &CostTable, params: &PhysicalParams) -> UnitPrices {
    let u = link_unit_counts(length_km, params);
    let b = costs.prices(Stage::Reserved);
    let o = costs.prices(Stage::OnDemand);
    UnitPrices {
        km_reserved: u.km_cost(&b),
        km_on_demand: u.km_cost(&o),
        triple_reserved: u.triple_cost(&b),
        triple_on_demand: u.triple_cost(&o),
    }
}

/// Wavelength counts on one link. `qkd` counts wavelengths, not triples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkWavelengths {
    pub km: u32,
    pub qkd: u32,
}

impl LinkWavelengths {
    pub fn new(km: u32, qkd: u32) -> Self {
        LinkWavelengths { km, qkd }
    }

    pub fn get(&self, class: WavelengthClass) -> u32 {
        match class {
            WavelengthClass::Km => self.km,
            WavelengthClass::Qkd => self.qkd,
        }
    }
}

/// First-stage reservations per link plus on-demand recourse per scenario
/// and link.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvisioningPlan {
    pub reserved: Vec<LinkWavelengths>,
    /// Indexed `[scenario][link]`.
    pub on_demand: Vec<Vec<LinkWavelengths>>,
}

impl ProvisioningPlan {
    pub fn empty(links: usize, scenarios: usize) -> Self {
        ProvisioningPlan {
            reserved: vec![LinkWavelengths::default(); links],
            on_demand: vec![vec![LinkWavelengths::default(); links]; scenarios],
        }
    }

    /// Multiplies every quantity by `factor`.
    pub fn scaled(&self, factor: u32) -> Self {
        let s = |w: &LinkWavelengths| LinkWavelengths::new(w.km * factor, w.qkd * factor);
        ProvisioningPlan {
            reserved: self.reserved.iter().map(s).collect(),
            on_demand: self.on_demand.iter().map(|v| v.iter().map(s).collect()).collect(),
        }
    }

    fn check_shape(&self, topo: &NetworkTopology, scenarios: &ScenarioSet) -> Result<(), CostError> {
        if self.reserved.len() != topo.link_count() {
            return Err(CostError::Shape(format!(
                "{} reserved entries for {} links",
                self.reserved.len(),
                topo.link_count()
            )));
        }
        if self.on_demand.len() != scenarios.len() {
            return Err(CostError::Shape(format!(
                "{} on-demand scenarios for {} scenarios",
                self.on_demand.len(),
                scenarios.len()
            )));
        }
        if self.on_demand.iter().any(|v| v.len() != topo.link_count()) {
            return Err(CostError::Shape("on-demand entry length differs from link count".into()));
        }
        Ok(())
    }

    /// Checks triples and per-scenario capacity.
    pub fn check(&self, topo: &NetworkTopology, scenarios: &ScenarioSet) -> Result<(), CostError> {
        self.check_shape(topo, scenarios)?;
        for (li, r) in self.reserved.iter().enumerate() {
            if r.qkd % 3 != 0 {
                return Err(CostError::NotTriples(LinkId(li)));
            }
        }
        for (k, row) in self.on_demand.iter().enumerate() {
            for (li, o) in row.iter().enumerate() {
                let link = LinkId(li);
                if o.qkd % 3 != 0 {
                    return Err(CostError::NotTriples(link));
                }
                let r = self.reserved[li];
                for class in [WavelengthClass::Km, WavelengthClass::Qkd] {
                    let used = r.get(class) + o.get(class);
                    let capacity = topo.capacity(class);
                    if used > capacity {
                        return Err(CostError::Capacity {
                            link,
                            label: topo.link_label(link),
                            class,
                            used,
                            capacity,
                            scenario: k,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stage cost of buying `amount` on one link at `prices`.
pub fn link_stage_cost(length_km: f64, amount: LinkWavelengths, prices: &[f64; 6], params: &PhysicalParams) -> f64 {
    if amount.km == 0 && amount.qkd == 0 {
        return 0.0;
    }
    let u = link_unit_counts(length_km, params);
    let triples = (amount.qkd / 3) as f64;
    let km = amount.km as f64;
    triples * (u.triple_qt as f64 * prices[CostClass::Tx.index()] + u.triple_qr as f64 * prices[CostClass::Rx.index()])
        + km * (u.km_lkm as f64 * prices[CostClass::Km.index()]
            + u.km_si as f64 * prices[CostClass::Si.index()]
            + u.km_md as f64 * prices[CostClass::Md.index()])
        + length_km * (amount.qkd + amount.km) as f64 * prices[CostClass::Ch.index()]
}

/// Cost of one stage over all links.
pub fn stage_cost(
    topo: &NetworkTopology,
    amounts: &[LinkWavelengths],
    prices: &[f64; 6],
    params: &PhysicalParams,
) -> f64 {
    amounts
        .iter()
        .enumerate()
        .map(|(li, &a)| link_stage_cost(topo.link(LinkId(li)).length_km, a, prices, params))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanCost {
    pub first_stage: f64,
    /// Recourse cost per scenario.
    pub second_stage: Vec<f64>,
    /// `first_stage + Σ_k p(k) second_stage[k]`.
    pub expected_total: f64,
}

impl PlanCost {
    pub fn expected_second_stage(&self) -> f64 {
        self.expected_total - self.first_stage
    }
}

pub fn plan_cost(
    plan: &ProvisioningPlan,
    topo: &NetworkTopology,
    scenarios: &ScenarioSet,
    costs: &CostTable,
    params: &PhysicalParams,
) -> Result<PlanCost, CostError> {
    plan.check(topo, scenarios)?;
    let first_stage = stage_cost(topo, &plan.reserved, &costs.prices(Stage::Reserved), params);
    let od = costs.prices(Stage::OnDemand);
    let second_stage: Vec<f64> = plan
        .on_demand
        .iter()
        .map(|row| stage_cost(topo, row, &od, params))
        .collect();
    let expected_total = first_stage
        + second_stage
            .iter()
            .zip(scenarios.probabilities())
            .map(|(c, p)| c * p)
            .sum::<f64>();
    Ok(PlanCost {
        first_stage,
        second_stage,
        expected_total,
    })
}
