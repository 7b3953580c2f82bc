//! Fiber topology, transmission requests, routing and wavelength assignment.
//!
//! Links are undirected. Node identifiers are the names used in topology
//! files; internally nodes are indexed in declaration order and every tie
//! (equal-length paths, candidate ordering) is broken lexicographically on
//! that index sequence so results are reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path as FsPath;

use rand::Rng;
use thiserror::Error;

/// Default number of QKD wavelengths per link.
pub const DEFAULT_QKD_CAPACITY: u32 = 300;
/// Default number of key-management wavelengths per link.
pub const DEFAULT_KM_CAPACITY: u32 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub usize);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Wavelength class carried on a fiber.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WavelengthClass {
    /// Key-management (and FEL payload) channels.
    Km,
    /// Quantum channels; one MDI-QKD link occupies a triple.
    Qkd,
}

impl fmt::Display for WavelengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WavelengthClass::Km => f.write_str("KM"),
            WavelengthClass::Qkd => f.write_str("QKD"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("source and destination coincide at `{0}`")]
    SameEndpoints(String),
    #[error("no path from `{from}` to `{to}`")]
    NoPath { from: String, to: String },
    #[error("k must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WavelengthError {
    #[error("{class} capacity exceeded on link {link} ({endpoints})")]
    CapacityExceeded {
        link: LinkId,
        endpoints: String,
        class: WavelengthClass,
    },
    #[error("request {request}: no {class} wavelength free on every link of its route")]
    ContinuityBlocked {
        request: usize,
        class: WavelengthClass,
    },
    #[error("request {0} has no route")]
    MissingRoute(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    /// Endpoints with `a < b`.
    pub a: NodeId,
    pub b: NodeId,
    pub length_km: f64,
}

impl Link {
    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        if n == self.a {
            Some(self.b)
        } else if n == self.b {
            Some(self.a)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkTopology {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    links: Vec<Link>,
    adjacency: Vec<Vec<(NodeId, LinkId)>>,
    qkd_capacity: u32,
    km_capacity: u32,
}

impl NetworkTopology {
    /// Builds and validates a topology. Links are given by endpoint names.
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        nodes: &[S],
        links: &[(T, T, f64)],
        qkd_capacity: u32,
        km_capacity: u32,
    ) -> Result<Self, TopologyError> {
        let mut names = Vec::with_capacity(nodes.len());
        let mut index = HashMap::new();
        for n in nodes {
            let n = n.as_ref().to_string();
            if index.insert(n.clone(), NodeId(names.len())).is_some() {
                return Err(TopologyError::Invalid(format!("duplicate node `{n}`")));
            }
            names.push(n);
        }
        let mut topo = NetworkTopology {
            adjacency: vec![Vec::new(); names.len()],
            names,
            index,
            links: Vec::with_capacity(links.len()),
            qkd_capacity,
            km_capacity,
        };
        for (a, b, len) in links {
            topo.push_link(a.as_ref(), b.as_ref(), *len)?;
        }
        topo.validate()?;
        Ok(topo)
    }

    fn push_link(&mut self, a: &str, b: &str, length_km: f64) -> Result<(), TopologyError> {
        let na = self.node(a)?;
        let nb = self.node(b)?;
        if na == nb {
            return Err(TopologyError::Invalid(format!("self-loop at `{a}`")));
        }
        if !(length_km.is_finite() && length_km > 0.0) {
            return Err(TopologyError::Invalid(format!(
                "link {a}-{b} has non-positive length {length_km}"
            )));
        }
        let (lo, hi) = if na < nb { (na, nb) } else { (nb, na) };
        if self.links.iter().any(|l| l.a == lo && l.b == hi) {
            return Err(TopologyError::Invalid(format!("duplicate link {a}-{b}")));
        }
        let id = LinkId(self.links.len());
        self.links.push(Link {
            a: lo,
            b: hi,
            length_km,
        });
        self.adjacency[lo.0].push((hi, id));
        self.adjacency[hi.0].push((lo, id));
        self.adjacency[lo.0].sort();
        self.adjacency[hi.0].sort();
        Ok(())
    }

    fn validate(&self) -> Result<(), TopologyError> {
        if self.names.is_empty() {
            return Err(TopologyError::Invalid("no nodes".into()));
        }
        if self.qkd_capacity < 1 || self.km_capacity < 1 {
            return Err(TopologyError::Invalid("capacities must be at least 1".into()));
        }
        let mut seen = vec![false; self.names.len()];
        let mut stack = vec![NodeId(0)];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(m, _) in &self.adjacency[n.0] {
                if !seen[m.0] {
                    seen[m.0] = true;
                    stack.push(m);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TopologyError::Invalid(format!(
                "graph is disconnected (`{}` unreachable from `{}`)",
                self.names[i], self.names[0]
            )));
        }
        Ok(())
    }

    /// Parses the line-oriented topology format:
    ///
    /// ```text
    /// qkd_capacity 300
    /// km_capacity 100
    /// node A
    /// link A B 160
    /// ```
    ///
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut nodes: Vec<String> = Vec::new();
        let mut links: Vec<(String, String, f64, usize)> = Vec::new();
        let mut qkd = None;
        let mut km = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let perr = |message: String| TopologyError::Parse {
                line: line_no,
                message,
            };
            match parts[0] {
                "node" if parts.len() == 2 => nodes.push(parts[1].to_string()),
                "link" if parts.len() == 4 => {
                    let len: f64 = parts[3]
                        .parse()
                        .map_err(|_| perr(format!("bad length `{}`", parts[3])))?;
                    links.push((parts[1].to_string(), parts[2].to_string(), len, line_no));
                }
                "qkd_capacity" | "km_capacity" if parts.len() == 2 => {
                    let v: u32 = parts[1]
                        .parse()
                        .map_err(|_| perr(format!("bad capacity `{}`", parts[1])))?;
                    if parts[0] == "qkd_capacity" {
                        qkd = Some(v);
                    } else {
                        km = Some(v);
                    }
                }
                other => return Err(perr(format!("unrecognised directive `{other}`"))),
            }
        }
        let qkd = qkd.ok_or_else(|| TopologyError::Invalid("missing qkd_capacity".into()))?;
        let km = km.ok_or_else(|| TopologyError::Invalid("missing km_capacity".into()))?;
        let known: BTreeSet<&str> = nodes.iter().map(String::as_str).collect();
        for (a, b, _, line) in &links {
            for n in [a, b] {
                if !known.contains(n.as_str()) {
                    return Err(TopologyError::Parse {
                        line: *line,
                        message: format!("unknown node `{n}`"),
                    });
                }
            }
        }
        let links: Vec<(String, String, f64)> =
            links.into_iter().map(|(a, b, l, _)| (a, b, l)).collect();
        let link_refs: Vec<(&str, &str, f64)> = links
            .iter()
            .map(|(a, b, l)| (a.as_str(), b.as_str(), *l))
            .collect();
        NetworkTopology::new(&nodes, &link_refs, qkd, km)
    }

    pub fn from_file(path: impl AsRef<FsPath>) -> Result<Self, TopologyError> {
        NetworkTopology::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialises back into the text format accepted by [`NetworkTopology::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "qkd_capacity {}\nkm_capacity {}\n",
            self.qkd_capacity, self.km_capacity
        );
        for n in &self.names {
            out.push_str(&format!("node {n}\n"));
        }
        for l in &self.links {
            out.push_str(&format!(
                "link {} {} {}\n",
                self.names[l.a.0], self.names[l.b.0], l.length_km
            ));
        }
        out
    }

    pub fn node(&self, name: &str) -> Result<NodeId, TopologyError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.names[n.0]
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> {
        (0..self.links.len()).map(LinkId)
    }

    pub fn link_label(&self, id: LinkId) -> String {
        let l = &self.links[id.0];
        format!("{}-{}", self.names[l.a.0], self.names[l.b.0])
    }

    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, LinkId)] {
        &self.adjacency[n.0]
    }

    pub fn qkd_capacity(&self) -> u32 {
        self.qkd_capacity
    }

    pub fn km_capacity(&self) -> u32 {
        self.km_capacity
    }

    pub fn capacity(&self, class: WavelengthClass) -> u32 {
        match class {
            WavelengthClass::Km => self.km_capacity,
            WavelengthClass::Qkd => self.qkd_capacity,
        }
    }

    /// Returns a copy with different wavelength capacities.
    pub fn with_capacities(&self, qkd_capacity: u32, km_capacity: u32) -> Result<Self, TopologyError> {
        let mut t = self.clone();
        t.qkd_capacity = qkd_capacity;
        t.km_capacity = km_capacity;
        t.validate()?;
        Ok(t)
    }
}

/// A quantum-secured model transmission request between two nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransmissionRequest {
    pub id: usize,
    pub source: NodeId,
    pub destination: NodeId,
}

impl TransmissionRequest {
    pub fn new(
        topo: &NetworkTopology,
        id: usize,
        source: &str,
        destination: &str,
    ) -> Result<Self, TopologyError> {
        let s = topo.node(source)?;
        let d = topo.node(destination)?;
        if s == d {
            return Err(TopologyError::SameEndpoints(source.to_string()));
        }
        Ok(TransmissionRequest {
            id,
            source: s,
            destination: d,
        })
    }
}

/// Parses `request <id> <src> <dst>` lines.
pub fn parse_requests(
    topo: &NetworkTopology,
    text: &str,
) -> Result<Vec<TransmissionRequest>, TopologyError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let perr = |message: String| TopologyError::Parse {
            line: i + 1,
            message,
        };
        if parts.len() != 4 || parts[0] != "request" {
            return Err(perr("expected `request <id> <src> <dst>`".into()));
        }
        let id: usize = parts[1]
            .parse()
            .map_err(|_| perr(format!("bad request id `{}`", parts[1])))?;
        if !ids.insert(id) {
            return Err(perr(format!("duplicate request id {id}")));
        }
        let req = TransmissionRequest::new(topo, id, parts[2], parts[3]).map_err(|e| perr(e.to_string()))?;
        out.push(req);
    }
    Ok(out)
}

pub fn load_requests(
    topo: &NetworkTopology,
    path: impl AsRef<FsPath>,
) -> Result<Vec<TransmissionRequest>, TopologyError> {
    parse_requests(topo, &std::fs::read_to_string(path)?)
}

pub fn requests_to_text(topo: &NetworkTopology, requests: &[TransmissionRequest]) -> String {
    requests
        .iter()
        .map(|r| {
            format!(
                "request {} {} {}\n",
                r.id,
                topo.name(r.source),
                topo.name(r.destination)
            )
        })
        .collect()
}

/// Draws `count` requests with uniformly random distinct endpoints.
pub fn random_requests<R: Rng>(
    topo: &NetworkTopology,
    count: usize,
    rng: &mut R,
) -> Vec<TransmissionRequest> {
    let n = topo.node_count();
    assert!(n >= 2, "need at least two nodes to draw requests");
    (0..count)
        .map(|id| {
            let s = rng.random_range(0..n);
            let mut d = rng.random_range(0..n - 1);
            if d >= s {
                d += 1;
            }
            TransmissionRequest {
                id,
                source: NodeId(s),
                destination: NodeId(d),
            }
        })
        .collect()
}

/// A simple path through the topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
    pub length_km: f64,
}

impl Route {
    pub fn source(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn destination(&self) -> NodeId {
        *self.nodes.last().expect("route has at least one node")
    }

    fn key_cmp(&self, other: &Route) -> std::cmp::Ordering {
        self.length_km
            .total_cmp(&other.length_km)
            .then_with(|| self.nodes.cmp(&other.nodes))
    }
}

fn build_route(topo: &NetworkTopology, nodes: Vec<NodeId>) -> Route {
    let mut links = Vec::with_capacity(nodes.len().saturating_sub(1));
    let mut length_km = 0.0;
    for w in nodes.windows(2) {
        let link = topo
            .neighbors(w[0])
            .iter()
            .find(|(m, _)| *m == w[1])
            .map(|&(_, l)| l)
            .expect("consecutive route nodes are adjacent");
        length_km += topo.link(link).length_km;
        links.push(link);
    }
    Route {
        nodes,
        links,
        length_km,
    }
}

/// Dijkstra with (distance, node sequence) labels, skipping banned nodes and links.
fn constrained_shortest(
    topo: &NetworkTopology,
    s: NodeId,
    d: NodeId,
    banned_nodes: &[bool],
    banned_links: &[bool],
) -> Option<Route> {
    let n = topo.node_count();
    let mut label: Vec<Option<(f64, Vec<NodeId>)>> = vec![None; n];
    let mut done = vec![false; n];
    label[s.0] = Some((0.0, vec![s]));
    loop {
        let mut best: Option<usize> = None;
        for v in 0..n {
            if done[v] {
                continue;
            }
            if let Some((dv, pv)) = &label[v] {
                let better = match best {
                    None => true,
                    Some(b) => {
                        let (db, pb) = label[b].as_ref().unwrap();
                        dv.total_cmp(db).then_with(|| pv.cmp(pb)).is_lt()
                    }
                };
                if better {
                    best = Some(v);
                }
            }
        }
        let u = best?;
        done[u] = true;
        if u == d.0 {
            let (_, nodes) = label[u].take().unwrap();
            return Some(build_route(topo, nodes));
        }
        let (du, pu) = label[u].clone().unwrap();
        for &(m, l) in topo.neighbors(NodeId(u)) {
            if done[m.0] || banned_nodes[m.0] || banned_links[l.0] {
                continue;
            }
            let dm = du + topo.link(l).length_km;
            let replace = match &label[m.0] {
                None => true,
                Some((old_d, old_p)) => match dm.total_cmp(old_d) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => {
                        let mut cand = pu.clone();
                        cand.push(m);
                        cand < *old_p
                    }
                },
            };
            if replace {
                let mut p = pu.clone();
                p.push(m);
                label[m.0] = Some((dm, p));
            }
        }
    }
}

/// Minimum-length simple path; ties go to the lexicographically smallest
/// node sequence.
pub fn shortest_path(topo: &NetworkTopology, s: NodeId, d: NodeId) -> Result<Route, TopologyError> {
    if s == d {
        return Err(TopologyError::SameEndpoints(topo.name(s).to_string()));
    }
    constrained_shortest(
        topo,
        s,
        d,
        &vec![false; topo.node_count()],
        &vec![false; topo.link_count()],
    )
    .ok_or_else(|| TopologyError::NoPath {
        from: topo.name(s).to_string(),
        to: topo.name(d).to_string(),
    })
}

/// Up to `count` loopless paths in nondecreasing (length, node sequence)
/// order (Yen's algorithm). Fewer are returned when fewer exist.
pub fn k_shortest_paths(
    topo: &NetworkTopology,
    s: NodeId,
    d: NodeId,
    count: usize,
) -> Result<Vec<Route>, TopologyError> {
    if count == 0 {
        return Err(TopologyError::ZeroCount);
    }
    let first = shortest_path(topo, s, d)?;
    let mut accepted = vec![first];
    let mut candidates: Vec<Route> = Vec::new();
    while accepted.len() < count {
        let last = accepted.last().unwrap().clone();
        for i in 0..last.nodes.len() - 1 {
            let spur = last.nodes[i];
            let root = &last.nodes[..=i];
            let mut banned_links = vec![false; topo.link_count()];
            for p in &accepted {
                if p.nodes.len() > i + 1 && &p.nodes[..=i] == root {
                    banned_links[p.links[i].0] = true;
                }
            }
            let mut banned_nodes = vec![false; topo.node_count()];
            for &n in &root[..i] {
                banned_nodes[n.0] = true;
            }
            if let Some(spur_path) = constrained_shortest(topo, spur, d, &banned_nodes, &banned_links) {
                let mut nodes = root[..i].to_vec();
                nodes.extend_from_slice(&spur_path.nodes);
                let cand = build_route(topo, nodes);
                let known = accepted.iter().chain(candidates.iter()).any(|r| r.nodes == cand.nodes);
                if !known {
                    candidates.push(cand);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let best = (0..candidates.len())
            .min_by(|&a, &b| candidates[a].key_cmp(&candidates[b]))
            .unwrap();
        accepted.push(candidates.swap_remove(best));
    }
    Ok(accepted)
}

/// Wavelengths a request needs on every link of its route.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WavelengthDemand {
    pub km: u32,
    pub qkd: u32,
}

/// Wavelength indices (1-based) used by one request on one link.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Channels {
    pub km: Vec<u32>,
    pub qkd: Vec<u32>,
}

impl Channels {
    fn class(&self, class: WavelengthClass) -> &[u32] {
        match class {
            WavelengthClass::Km => &self.km,
            WavelengthClass::Qkd => &self.qkd,
        }
    }
}

/// Per (request, link) wavelength indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WavelengthAssignment {
    pub entries: BTreeMap<(usize, LinkId), Channels>,
}

impl WavelengthAssignment {
    /// Number of wavelengths of `class` in use on `link`.
    pub fn used_on(&self, link: LinkId, class: WavelengthClass) -> u32 {
        self.entries
            .iter()
            .filter(|((_, l), _)| *l == link)
            .map(|(_, c)| c.class(class).len() as u32)
            .sum()
    }
}

/// First-fit assignment with wavelength continuity. Requests are served in
/// ascending id order; each needed wavelength takes the lowest index free on
/// every link of the route.
pub fn assign_wavelengths(
    topo: &NetworkTopology,
    routes: &BTreeMap<usize, Route>,
    demands: &BTreeMap<usize, WavelengthDemand>,
) -> Result<WavelengthAssignment, WavelengthError> {
    let mut occupied: [Vec<Vec<bool>>; 2] = [
        vec![vec![false; topo.km_capacity() as usize]; topo.link_count()],
        vec![vec![false; topo.qkd_capacity() as usize]; topo.link_count()],
    ];
    let mut out = WavelengthAssignment::default();
    for (&req, demand) in demands {
        let route = routes.get(&req).ok_or(WavelengthError::MissingRoute(req))?;
        if demand.km == 0 && demand.qkd == 0 {
            continue;
        }
        let mut picked: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
        for (slot, class, need) in [
            (0usize, WavelengthClass::Km, demand.km),
            (1, WavelengthClass::Qkd, demand.qkd),
        ] {
            let table = &mut occupied[slot];
            for _ in 0..need {
                let cap = topo.capacity(class) as usize;
                let free = (0..cap).find(|&w| route.links.iter().all(|l| !table[l.0][w]));
                match free {
                    Some(w) => {
                        for l in &route.links {
                            table[l.0][w] = true;
                        }
                        picked[slot].push(w as u32 + 1);
                    }
                    None => {
                        let full = route
                            .links
                            .iter()
                            .copied()
                            .find(|l| table[l.0].iter().all(|&b| b));
                        return Err(match full {
                            Some(link) => WavelengthError::CapacityExceeded {
                                link,
                                endpoints: topo.link_label(link),
                                class,
                            },
                            None => WavelengthError::ContinuityBlocked { request: req, class },
                        });
                    }
                }
            }
        }
        let [km, qkd] = picked;
        for &l in &route.links {
            out.entries.insert(
                (req, l),
                Channels {
                    km: km.clone(),
                    qkd: qkd.clone(),
                },
            );
        }
    }
    Ok(out)
}

/// A broken routing or wavelength constraint found by a validator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintViolation {
    #[error("request {request}: flow conservation broken at node {node}")]
    FlowConservation { request: usize, node: usize },
    #[error("request {request}: route is not a simple connected path")]
    BrokenPath { request: usize },
    #[error("request {request}: wavelengths assigned on link {link} outside its route")]
    StrayChannel { request: usize, link: LinkId },
    #[error("request {request}: {class} wavelengths differ between links of its route")]
    Continuity { request: usize, class: WavelengthClass },
    #[error("request {request}: {class} demand {expected} but {got} wavelengths assigned on link {link}")]
    Demand {
        request: usize,
        link: LinkId,
        class: WavelengthClass,
        expected: u32,
        got: u32,
    },
    #[error("request {request}: QKD wavelengths {qkd} are not 3 x rho x KM wavelengths {km}")]
    TripleCoupling { request: usize, qkd: u32, km: u32 },
    #[error("link {link}: {class} usage {used} exceeds capacity {capacity}")]
    Capacity {
        link: LinkId,
        class: WavelengthClass,
        used: u32,
        capacity: u32,
    },
    #[error("link {link}: {class} wavelength {index} used more than once")]
    Uniqueness {
        link: LinkId,
        class: WavelengthClass,
        index: u32,
    },
    #[error("link {link}: {class} reservation {reserved} + on-demand {on_demand} below demand {demand}")]
    Shortfall {
        link: LinkId,
        class: WavelengthClass,
        reserved: u32,
        on_demand: u32,
        demand: u32,
    },
    #[error("link {link}: QKD quantity {value} is not a multiple of 3")]
    NotTriples { link: LinkId, value: u32 },
}

/// Checks that a route joins `request`'s endpoints: unit out-flow at the
/// source, unit in-flow at the destination and balance elsewhere, counted
/// from link incidences.
pub fn check_flow_conservation(
    topo: &NetworkTopology,
    request: &TransmissionRequest,
    route: &Route,
) -> Result<(), ConstraintViolation> {
    let broken = ConstraintViolation::BrokenPath { request: request.id };
    if route.nodes.len() != route.links.len() + 1 {
        return Err(broken);
    }
    let distinct: BTreeSet<_> = route.nodes.iter().collect();
    if distinct.len() != route.nodes.len() {
        return Err(broken);
    }
    let mut balance = vec![0i64; topo.node_count()];
    for (i, &l) in route.links.iter().enumerate() {
        let link = topo.link(l);
        let (from, to) = (route.nodes[i], route.nodes[i + 1]);
        if link.other(from) != Some(to) {
            return Err(broken);
        }
        balance[from.0] += 1;
        balance[to.0] -= 1;
    }
    for (node, &b) in balance.iter().enumerate() {
        let expected = if node == request.source.0 {
            1
        } else if node == request.destination.0 {
            -1
        } else {
            0
        };
        if b != expected {
            return Err(ConstraintViolation::FlowConservation {
                request: request.id,
                node,
            });
        }
    }
    Ok(())
}

/// Independent re-check of routing, continuity, demand, capacity and
/// uniqueness for one assignment.
pub fn validate_assignment(
    topo: &NetworkTopology,
    requests: &[TransmissionRequest],
    routes: &BTreeMap<usize, Route>,
    demands: &BTreeMap<usize, WavelengthDemand>,
    assignment: &WavelengthAssignment,
) -> Result<(), ConstraintViolation> {
    for req in requests {
        let route = routes
            .get(&req.id)
            .ok_or(ConstraintViolation::BrokenPath { request: req.id })?;
        check_flow_conservation(topo, req, route)?;
    }
    for &(req, link) in assignment.entries.keys() {
        let on_route = routes.get(&req).is_some_and(|r| r.links.contains(&link));
        if !on_route {
            return Err(ConstraintViolation::StrayChannel { request: req, link });
        }
    }
    let empty = Channels::default();
    for (&req, demand) in demands {
        let Some(route) = routes.get(&req) else {
            return Err(ConstraintViolation::BrokenPath { request: req });
        };
        for class in [WavelengthClass::Km, WavelengthClass::Qkd] {
            let expected = match class {
                WavelengthClass::Km => demand.km,
                WavelengthClass::Qkd => demand.qkd,
            };
            let mut reference: Option<BTreeSet<u32>> = None;
            for &l in &route.links {
                let ch = assignment.entries.get(&(req, l)).unwrap_or(&empty).class(class);
                if ch.len() as u32 != expected {
                    return Err(ConstraintViolation::Demand {
                        request: req,
                        link: l,
                        class,
                        expected,
                        got: ch.len() as u32,
                    });
                }
                let set: BTreeSet<u32> = ch.iter().copied().collect();
                match &reference {
                    None => reference = Some(set),
                    Some(r) if *r != set => {
                        return Err(ConstraintViolation::Continuity { request: req, class })
                    }
                    Some(_) => {}
                }
            }
        }
    }
    for link in topo.link_ids() {
        for class in [WavelengthClass::Km, WavelengthClass::Qkd] {
            let cap = topo.capacity(class);
            let mut seen = BTreeSet::new();
            let mut used = 0u32;
            for ((_, l), ch) in &assignment.entries {
                if *l != link {
                    continue;
                }
                for &w in ch.class(class) {
                    used += 1;
                    if !seen.insert(w) {
                        return Err(ConstraintViolation::Uniqueness { link, class, index: w });
                    }
                    if w == 0 || w > cap {
                        return Err(ConstraintViolation::Capacity {
                            link,
                            class,
                            used: w,
                            capacity: cap,
                        });
                    }
                }
            }
            if used > cap {
                return Err(ConstraintViolation::Capacity {
                    link,
                    class,
                    used,
                    capacity: cap,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> NetworkTopology {
        NetworkTopology::new(
            &["a", "b", "c"],
            &[("a", "b", 160.0), ("b", "c", 160.0), ("a", "c", 400.0)],
            DEFAULT_QKD_CAPACITY,
            DEFAULT_KM_CAPACITY,
        )
        .unwrap()
    }

    fn names(topo: &NetworkTopology, r: &Route) -> Vec<String> {
        r.nodes.iter().map(|&n| topo.name(n).to_string()).collect()
    }

    #[test]
    fn parses_triangle() {
        let t = NetworkTopology::parse(
            "qkd_capacity 300\nkm_capacity 100\nnode a\nnode b\nnode c\n\
             link a b 160\nlink b c 160\nlink a c 160\n",
        )
        .unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.link_count(), 3);
        let again = NetworkTopology::parse(&t.to_text()).unwrap();
        assert_eq!(again.links(), t.links());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = NetworkTopology::parse("qkd_capacity 3\nkm_capacity 1\nnode a\nlink a b x\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 4, .. }), "{err}");
        let err = NetworkTopology::parse("qkd_capacity 3\nkm_capacity 1\nnode a\nnode b\nlink a z 5\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 5, .. }), "{err}");
        let err = NetworkTopology::parse("qkd_capacity 3\nkm_capacity 1\nbogus\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 3, .. }));
    }

    #[test]
    fn rejects_invariant_violations() {
        let bad = |links: &[(&str, &str, f64)], nodes: &[&str]| NetworkTopology::new(nodes, links, 3, 1);
        assert!(bad(&[("a", "b", 1.0)], &["a", "b", "c"]).unwrap_err().to_string().contains("disconnected"));
        assert!(bad(&[("a", "a", 1.0)], &["a"]).unwrap_err().to_string().contains("self-loop"));
        assert!(bad(&[("a", "b", 0.0)], &["a", "b"]).unwrap_err().to_string().contains("length"));
        assert!(bad(&[("a", "b", 1.0), ("b", "a", 2.0)], &["a", "b"])
            .unwrap_err()
            .to_string()
            .contains("duplicate link"));
        assert!(NetworkTopology::new(&["a", "b"], &[("a", "b", 1.0)], 0, 1).is_err());
        assert!(NetworkTopology::parse("km_capacity 1\nnode a\n").is_err());
    }

    #[test]
    fn shortest_path_prefers_two_short_hops() {
        let t = triangle();
        let r = shortest_path(&t, t.node("a").unwrap(), t.node("c").unwrap()).unwrap();
        assert_eq!(names(&t, &r), ["a", "b", "c"]);
        assert_eq!(r.length_km, 320.0);
        assert!(matches!(
            shortest_path(&t, NodeId(0), NodeId(0)),
            Err(TopologyError::SameEndpoints(_))
        ));
    }

    #[test]
    fn equal_length_tie_breaks_lexicographically() {
        // square a-b-d and a-c-d, both 200 km
        let t = NetworkTopology::new(
            &["a", "b", "c", "d"],
            &[("a", "c", 100.0), ("c", "d", 100.0), ("a", "b", 100.0), ("b", "d", 100.0)],
            3,
            1,
        )
        .unwrap();
        let r = shortest_path(&t, NodeId(0), NodeId(3)).unwrap();
        assert_eq!(names(&t, &r), ["a", "b", "d"]);
        let all = k_shortest_paths(&t, NodeId(0), NodeId(3), 5).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(names(&t, &all[1]), ["a", "c", "d"]);
    }

    #[test]
    fn k_shortest_on_triangle_and_line() {
        let t = triangle();
        let ks = k_shortest_paths(&t, NodeId(0), NodeId(2), 2).unwrap();
        assert_eq!(ks.len(), 2);
        assert_eq!(names(&t, &ks[0]), ["a", "b", "c"]);
        assert_eq!(ks[0].length_km, 320.0);
        assert_eq!(names(&t, &ks[1]), ["a", "c"]);
        assert_eq!(ks[1].length_km, 400.0);
        let one = k_shortest_paths(&t, NodeId(0), NodeId(2), 1).unwrap();
        assert_eq!(one, vec![shortest_path(&t, NodeId(0), NodeId(2)).unwrap()]);
        assert!(matches!(k_shortest_paths(&t, NodeId(0), NodeId(2), 0), Err(TopologyError::ZeroCount)));

        let line = NetworkTopology::new(&["a", "b", "c"], &[("a", "b", 1.0), ("b", "c", 1.0)], 3, 1).unwrap();
        assert_eq!(k_shortest_paths(&line, NodeId(0), NodeId(2), 3).unwrap().len(), 1);
    }

    fn single(req: usize, route: Route, km: u32, qkd: u32) -> (BTreeMap<usize, Route>, BTreeMap<usize, WavelengthDemand>) {
        (BTreeMap::from([(req, route)]), BTreeMap::from([(req, WavelengthDemand { km, qkd })]))
    }

    #[test]
    fn first_fit_single_request() {
        let t = triangle();
        let route = shortest_path(&t, NodeId(0), NodeId(2)).unwrap();
        let (routes, demands) = single(0, route.clone(), 1, 3);
        let a = assign_wavelengths(&t, &routes, &demands).unwrap();
        for l in &route.links {
            assert_eq!(a.entries[&(0, *l)].km, vec![1]);
            assert_eq!(a.entries[&(0, *l)].qkd, vec![1, 2, 3]);
        }
    }

    #[test]
    fn first_fit_shared_link_and_pigeonhole() {
        let t = triangle();
        let r0 = shortest_path(&t, NodeId(0), NodeId(2)).unwrap(); // a-b-c
        let r1 = shortest_path(&t, NodeId(1), NodeId(2)).unwrap(); // b-c
        let routes = BTreeMap::from([(0, r0), (1, r1.clone())]);
        let demands = BTreeMap::from([
            (0, WavelengthDemand { km: 1, qkd: 0 }),
            (1, WavelengthDemand { km: 1, qkd: 0 }),
        ]);
        let a = assign_wavelengths(&t, &routes, &demands).unwrap();
        assert_eq!(a.entries[&(0, r1.links[0])].km, vec![1]);
        assert_eq!(a.entries[&(1, r1.links[0])].km, vec![2]);

        let tight = t.with_capacities(3, 1).unwrap();
        let err = assign_wavelengths(&tight, &routes, &demands).unwrap_err();
        match err {
            WavelengthError::CapacityExceeded { link, class, .. } => {
                assert_eq!(link, r1.links[0]);
                assert_eq!(class, WavelengthClass::Km);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validator_accepts_first_fit_and_catches_corruption() {
        let t = triangle();
        let reqs = vec![
            TransmissionRequest::new(&t, 0, "a", "c").unwrap(),
            TransmissionRequest::new(&t, 1, "b", "c").unwrap(),
        ];
        let routes: BTreeMap<_, _> = reqs
            .iter()
            .map(|r| (r.id, shortest_path(&t, r.source, r.destination).unwrap()))
            .collect();
        let demands = BTreeMap::from([
            (0, WavelengthDemand { km: 1, qkd: 3 }),
            (1, WavelengthDemand { km: 1, qkd: 6 }),
        ]);
        let a = assign_wavelengths(&t, &routes, &demands).unwrap();
        validate_assignment(&t, &reqs, &routes, &demands, &a).unwrap();

        // continuity: change one link's index for request 0
        let mut bad = a.clone();
        let first = routes[&0].links[0];
        bad.entries.get_mut(&(0, first)).unwrap().km[0] = 7;
        assert!(matches!(
            validate_assignment(&t, &reqs, &routes, &demands, &bad),
            Err(ConstraintViolation::Continuity { .. })
        ));

        // uniqueness: request 1 reuses request 0's QKD index on the shared link
        let mut bad = a.clone();
        let shared = routes[&1].links[0];
        let stolen = a.entries[&(0, shared)].qkd[0];
        bad.entries.get_mut(&(1, shared)).unwrap().qkd[0] = stolen;
        assert!(matches!(
            validate_assignment(&t, &reqs, &routes, &demands, &bad),
            Err(ConstraintViolation::Uniqueness { .. })
        ));

        // broken path
        let mut bad_routes = routes.clone();
        bad_routes.get_mut(&0).unwrap().nodes.reverse();
        assert!(validate_assignment(&t, &reqs, &bad_routes, &demands, &a).is_err());
    }

    #[test]
    fn parses_requests() {
        let t = triangle();
        let reqs = parse_requests(&t, "request 0 a c\nrequest 1 b c\n").unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(requests_to_text(&t, &reqs), "request 0 a c\nrequest 1 b c\n");
        assert!(matches!(parse_requests(&t, "request 0 a a\n"), Err(TopologyError::Parse { line: 1, .. })));
        assert!(parse_requests(&t, "request 0 a c\nrequest 0 b c\n").is_err());
    }
}
