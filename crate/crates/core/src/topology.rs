//! Y-shaped backbone topology: relay nodes, three gateways, lossy links and
//! the radio-proximity relation that drives transmission conflicts.
//!
//! Node and gateway ids share one id space. Gateways never transmit and carry
//! no generation rate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn default_rate() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    #[serde(default = "default_rate")]
    pub rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySpec {
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: u32,
    pub a: u32,
    pub b: u32,
    pub loss: f64,
}

/// Raw topology description as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub cycle_slots: u32,
    pub nodes: Vec<NodeSpec>,
    pub gateways: Vec<GatewaySpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub proximity: Vec<[u32; 2]>,
}

impl TopologyConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Replace every link loss rate, keyed by link id.
    pub fn with_losses(mut self, losses: &BTreeMap<u32, f64>) -> Self {
        for link in &mut self.links {
            if let Some(q) = losses.get(&link.id) {
                link.loss = *q;
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub loss: f64,
}

impl Link {
    pub fn other(&self, end: NodeId) -> NodeId {
        if end == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// One gateway-terminated arm hanging off the central node.
///
/// `nodes` runs from the central node outward. `links[0]` attaches the first
/// node (or the gateway, for an empty branch) to the central node and
/// `links.last()` attaches the gateway, so `links.len() == nodes.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub gateway: NodeId,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
}

/// A validated Y-shaped topology. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    cycle_slots: u32,
    rates: BTreeMap<NodeId, u32>,
    gateways: Vec<NodeId>,
    links: BTreeMap<LinkId, Link>,
    proximity: BTreeSet<(NodeId, NodeId)>,
    central: NodeId,
    branches: Vec<Branch>,
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Validate a raw description and locate the central node and its branches.
pub fn validate_topology(cfg: &TopologyConfig) -> Result<Topology, TopologyError> {
    if cfg.cycle_slots == 0 {
        return Err(TopologyError::ZeroCycle);
    }
    if cfg.gateways.len() != 3 {
        return Err(TopologyError::GatewayCountNot3(cfg.gateways.len()));
    }

    let mut seen = BTreeSet::new();
    let mut rates = BTreeMap::new();
    for n in &cfg.nodes {
        if !seen.insert(n.id) {
            return Err(TopologyError::DuplicateId(n.id));
        }
        if n.rate == 0 {
            return Err(TopologyError::ZeroRate(NodeId(n.id)));
        }
        rates.insert(NodeId(n.id), n.rate);
    }
    let mut gateways = Vec::with_capacity(3);
    for g in &cfg.gateways {
        if !seen.insert(g.id) {
            return Err(TopologyError::DuplicateId(g.id));
        }
        gateways.push(NodeId(g.id));
    }

    let mut links = BTreeMap::new();
    for l in &cfg.links {
        let id = LinkId(l.id);
        if links.contains_key(&id) {
            return Err(TopologyError::DuplicateId(l.id));
        }
        for end in [l.a, l.b] {
            if !seen.contains(&end) {
                return Err(TopologyError::UnknownEndpoint {
                    link: id,
                    endpoint: end,
                });
            }
        }
        if l.a == l.b {
            return Err(TopologyError::NotATree(format!("link {} is a self-loop", l.id)));
        }
        if !(l.loss > 0.0 && l.loss < 1.0) {
            return Err(TopologyError::LossOutOfRange { link: id, loss: l.loss });
        }
        links.insert(
            id,
            Link {
                id,
                a: NodeId(l.a),
                b: NodeId(l.b),
                loss: l.loss,
            },
        );
    }

    let mut proximity = BTreeSet::new();
    for [a, b] in &cfg.proximity {
        for end in [*a, *b] {
            if !seen.contains(&end) {
                return Err(TopologyError::UnknownProximityId(end));
            }
        }
        if a != b {
            proximity.insert(ordered(NodeId(*a), NodeId(*b)));
        }
    }

    // Tree check: |E| = |V| - 1 and connected.
    let vertex_count = seen.len();
    if links.len() + 1 != vertex_count {
        return Err(TopologyError::NotATree(format!(
            "{} links for {} vertices",
            links.len(),
            vertex_count
        )));
    }
    let mut adjacency: BTreeMap<NodeId, Vec<LinkId>> = seen.iter().map(|&v| (NodeId(v), Vec::new())).collect();
    for link in links.values() {
        adjacency.get_mut(&link.a).expect("known endpoint").push(link.id);
        adjacency.get_mut(&link.b).expect("known endpoint").push(link.id);
    }
    let start = *adjacency.keys().next().expect("non-empty vertex set");
    let mut reached = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for lid in &adjacency[&v] {
            let w = links[lid].other(v);
            if reached.insert(w) {
                queue.push_back(w);
            }
        }
    }
    if reached.len() != vertex_count {
        return Err(TopologyError::NotATree("graph is disconnected".into()));
    }

    for &g in &gateways {
        if adjacency[&g].len() != 1 {
            return Err(TopologyError::GatewayNotLeaf(g));
        }
    }
    let mut central = None;
    for &node in rates.keys() {
        let degree = adjacency[&node].len();
        match degree {
            2 => {}
            3 if central.is_none() => central = Some(node),
            _ => return Err(TopologyError::BadDegree { node, degree }),
        }
    }
    let central = central.ok_or(TopologyError::NoDegree3Node)?;

    for link in links.values() {
        if !proximity.contains(&ordered(link.a, link.b)) {
            return Err(TopologyError::LinkNotInProximity(link.id));
        }
    }

    // Walk each arm from the central node out to its gateway.
    let mut by_gateway = BTreeMap::new();
    for first in &adjacency[&central] {
        let mut nodes = Vec::new();
        let mut arm_links = vec![*first];
        let mut prev = central;
        let mut cur = links[first].other(central);
        while !gateways.contains(&cur) {
            nodes.push(cur);
            let next = adjacency[&cur]
                .iter()
                .copied()
                .find(|l| links[l].other(cur) != prev)
                .expect("degree-2 node has an onward link");
            arm_links.push(next);
            prev = cur;
            cur = links[&next].other(cur);
        }
        by_gateway.insert(
            cur,
            Branch {
                gateway: cur,
                nodes,
                links: arm_links,
            },
        );
    }
    let branches = gateways
        .iter()
        .map(|g| by_gateway.remove(g).expect("every gateway terminates one arm"))
        .collect();

    Ok(Topology {
        cycle_slots: cfg.cycle_slots,
        rates,
        gateways,
        links,
        proximity,
        central,
        branches,
    })
}

impl Topology {
    pub fn from_config(cfg: &TopologyConfig) -> Result<Self, TopologyError> {
        validate_topology(cfg)
    }

    pub fn cycle_slots(&self) -> u32 {
        self.cycle_slots
    }

    pub fn central(&self) -> NodeId {
        self.central
    }

    /// Branches in gateway declaration order.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn gateways(&self) -> &[NodeId] {
        &self.gateways
    }

    pub fn is_gateway(&self, id: NodeId) -> bool {
        self.gateways.contains(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.rates.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, node: NodeId) -> u32 {
        self.rates.get(&node).copied().unwrap_or(0)
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[&id]
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn loss(&self, id: LinkId) -> f64 {
        self.links[&id].loss
    }

    pub fn near(&self, a: NodeId, b: NodeId) -> bool {
        self.proximity.contains(&ordered(a, b))
    }

    pub fn proximity(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.proximity.iter().copied()
    }

    /// Copy with one extra proximity pair.
    pub fn with_proximity(&self, a: NodeId, b: NodeId) -> Topology {
        let mut t = self.clone();
        if a != b {
            t.proximity.insert(ordered(a, b));
        }
        t
    }
}

/// One node sending one packet over one link towards `rx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Transmission {
    pub tx: NodeId,
    pub rx: NodeId,
    pub link: LinkId,
}

impl fmt::Display for Transmission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}:{}", self.tx, self.rx, self.link)
    }
}

/// Protocol-interference rule: two transmissions conflict when they share a
/// node, or when either transmitter is in radio range of the other's receiver.
pub fn interferes(topology: &Topology, a: &Transmission, b: &Transmission) -> bool {
    if a == b {
        return false;
    }
    a.tx == b.tx
        || a.rx == b.rx
        || a.tx == b.rx
        || b.tx == a.rx
        || topology.near(b.tx, a.rx)
        || topology.near(a.tx, b.rx)
}

/// Unordered pairs of transmissions that may not share a slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConflictSet {
    pairs: BTreeSet<(Transmission, Transmission)>,
}

impl ConflictSet {
    pub fn insert(&mut self, a: Transmission, b: Transmission) {
        if a != b {
            self.pairs.insert(if a <= b { (a, b) } else { (b, a) });
        }
    }

    pub fn conflicts(&self, a: &Transmission, b: &Transmission) -> bool {
        let key = if a <= b { (*a, *b) } else { (*b, *a) };
        self.pairs.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Transmission, Transmission)> {
        self.pairs.iter()
    }
}

/// Every transmission a relay node could make: both directions of every link,
/// excluding gateways as transmitters.
pub fn all_transmissions(topology: &Topology) -> Vec<Transmission> {
    let mut out = Vec::new();
    for link in topology.links() {
        for (tx, rx) in [(link.a, link.b), (link.b, link.a)] {
            if !topology.is_gateway(tx) {
                out.push(Transmission { tx, rx, link: link.id });
            }
        }
    }
    out.sort();
    out
}

pub fn derive_conflicts(topology: &Topology) -> ConflictSet {
    let all = all_transmissions(topology);
    let mut set = ConflictSet::default();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if interferes(topology, a, b) {
                set.insert(*a, *b);
            }
        }
    }
    set
}
