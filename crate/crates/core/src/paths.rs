//! Separation-link placements on a Y-shaped topology and the routing groups
//! they induce.
//!
//! Two separation links split the tree into three single-path groups. The
//! branch without a separation link is labelled Z; the other two are X and Y
//! in gateway declaration order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::topology::{ConflictSet, LinkId, NodeId, Topology, Transmission};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum GroupLabel {
    X,
    Y,
    Z,
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupLabel::X => "X",
            GroupLabel::Y => "Y",
            GroupLabel::Z => "Z",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hop {
    pub link: LinkId,
    pub tx: NodeId,
    pub rx: NodeId,
    pub loss: f64,
}

impl Hop {
    pub fn transmission(&self) -> Transmission {
        Transmission {
            tx: self.tx,
            rx: self.rx,
            link: self.link,
        }
    }
}

/// Nodes whose packets drain to one gateway.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Group {
    pub label: GroupLabel,
    pub gateway: NodeId,
    /// Most-upstream first: longest route first, ties by node id.
    pub nodes: Vec<NodeId>,
    pub routes: BTreeMap<NodeId, Vec<Hop>>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn route(&self, node: NodeId) -> &[Hop] {
        &self.routes[&node]
    }

    /// The single transmission a member node makes (its next hop).
    pub fn next_hop(&self, node: NodeId) -> &Hop {
        &self.routes[&node][0]
    }

    pub fn transmissions(&self) -> Vec<Transmission> {
        self.nodes.iter().map(|&n| self.next_hop(n).transmission()).collect()
    }

    /// Members no other member forwards through.
    pub fn leaves(&self) -> Vec<NodeId> {
        let relays: BTreeSet<NodeId> = self
            .routes
            .values()
            .flat_map(|r| r.iter().skip(1).map(|h| h.tx))
            .collect();
        self.nodes.iter().copied().filter(|n| !relays.contains(n)).collect()
    }

    /// Origins whose packets `node` transmits, in member order.
    pub fn origins_via(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .copied()
            .filter(|o| self.routes[o].iter().any(|h| h.tx == node))
            .collect()
    }

    /// Every (origin, link) use, origin-major in member order, route order inside.
    pub fn pairs(&self) -> Vec<(NodeId, LinkId)> {
        self.nodes
            .iter()
            .flat_map(|&o| self.routes[&o].iter().map(move |h| (o, h.link)))
            .collect()
    }

    pub fn hop(&self, origin: NodeId, link: LinkId) -> &Hop {
        self.routes[&origin]
            .iter()
            .find(|h| h.link == link)
            .expect("pair belongs to this group")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ModelType {
    Type1 = 1,
    Type2 = 2,
    Type3 = 3,
}

impl ModelType {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathModel {
    /// `l-r-d` group sizes.
    pub name: String,
    /// Gateway id of the branch carrying no separation link (labelled Z).
    pub no_sep_branch: NodeId,
    /// Separation links in the X and Y branches.
    pub sep_links: [LinkId; 2],
    /// Groups in X, Y, Z order.
    pub groups: [Group; 3],
    pub model_type: ModelType,
}

impl PathModel {
    /// Unique key across all no-sep branch choices, e.g. `3-2-3@103`.
    pub fn key(&self) -> String {
        format!("{}@{}", self.name, self.no_sep_branch)
    }

    pub fn group(&self, label: GroupLabel) -> &Group {
        &self.groups[label as usize]
    }

    pub fn route(&self, node: NodeId) -> Option<&[Hop]> {
        self.groups.iter().find_map(|g| g.routes.get(&node).map(Vec::as_slice))
    }

    pub fn group_of(&self, node: NodeId) -> Option<GroupLabel> {
        self.groups
            .iter()
            .find(|g| g.routes.contains_key(&node))
            .map(|g| g.label)
    }
}

/// Tree path from `from` to `to` as a sequence of hops.
fn tree_path(topology: &Topology, from: NodeId, to: NodeId) -> Vec<Hop> {
    let mut parent: BTreeMap<NodeId, (NodeId, LinkId)> = BTreeMap::new();
    let mut queue = VecDeque::from([to]);
    let mut seen = BTreeSet::from([to]);
    while let Some(v) = queue.pop_front() {
        for link in topology.links() {
            if link.a == v || link.b == v {
                let w = link.other(v);
                if seen.insert(w) {
                    parent.insert(w, (v, link.id));
                    queue.push_back(w);
                }
            }
        }
    }
    let mut hops = Vec::new();
    let mut cur = from;
    while cur != to {
        let (next, link) = parent[&cur];
        hops.push(Hop {
            link,
            tx: cur,
            rx: next,
            loss: topology.loss(link),
        });
        cur = next;
    }
    hops
}

fn build_group(topology: &Topology, label: GroupLabel, gateway: NodeId, members: Vec<NodeId>) -> Group {
    let routes: BTreeMap<NodeId, Vec<Hop>> = members.iter().map(|&n| (n, tree_path(topology, n, gateway))).collect();
    let mut nodes = members;
    nodes.sort_by(|a, b| routes[b].len().cmp(&routes[a].len()).then(a.cmp(b)));
    Group {
        label,
        gateway,
        nodes,
        routes,
    }
}

/// Build the model for one placement. `z` is the no-sep branch index; `x`/`y`
/// are the other branch indices with separation positions `px`/`py`, where
/// position p cuts `links[p]` so nodes `[p..]` keep draining outward.
fn build_model(topology: &Topology, z: usize, (x, px): (usize, usize), (y, py): (usize, usize)) -> PathModel {
    let arms = topology.branches();
    let (bx, by, bz) = (&arms[x], &arms[y], &arms[z]);
    let sx: Vec<NodeId> = bx.nodes[px..].to_vec();
    let sy: Vec<NodeId> = by.nodes[py..].to_vec();
    let mut sz: Vec<NodeId> = vec![topology.central()];
    sz.extend_from_slice(&bz.nodes);
    sz.extend_from_slice(&bx.nodes[..px]);
    sz.extend_from_slice(&by.nodes[..py]);

    let groups = [
        build_group(topology, GroupLabel::X, bx.gateway, sx),
        build_group(topology, GroupLabel::Y, by.gateway, sy),
        build_group(topology, GroupLabel::Z, bz.gateway, sz),
    ];
    let name = format!("{}-{}-{}", groups[0].len(), groups[1].len(), groups[2].len());
    let adjacent = [px, py].iter().filter(|&&p| p == 0).count();
    let model_type = match adjacent {
        2 => ModelType::Type1,
        1 => ModelType::Type2,
        _ => ModelType::Type3,
    };
    PathModel {
        name,
        no_sep_branch: bz.gateway,
        sep_links: [bx.links[px], by.links[py]],
        groups,
        model_type,
    }
}

/// All admissible separation-link placements. With `fixed_z`, only the last
/// declared gateway's branch is used as the no-sep branch.
pub fn enumerate_path_models(topology: &Topology, fixed_z: bool) -> Vec<PathModel> {
    let arms = topology.branches();
    let z_choices: Vec<usize> = if fixed_z { vec![2] } else { vec![2, 0, 1] };
    let mut models = Vec::new();
    for z in z_choices {
        let others: Vec<usize> = (0..3).filter(|&b| b != z).collect();
        let (x, y) = (others[0], others[1]);
        for px in 0..arms[x].nodes.len() {
            for py in 0..arms[y].nodes.len() {
                models.push(build_model(topology, z, (x, px), (y, py)));
            }
        }
    }
    models
}

pub fn classify_model(model: &PathModel) -> ModelType {
    model.model_type
}

/// A priority ordering of the interacting groups of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatternSpec {
    pub id: u8,
    /// Groups that start at slot 0 and open the early window.
    pub prioritized: Vec<GroupLabel>,
    /// Groups whose blocked transmitters wait for the window to close.
    pub deferred: Vec<GroupLabel>,
    /// Groups with no conflicts against any other group; solved separately.
    pub independent: Vec<GroupLabel>,
}

impl PatternSpec {
    pub fn role_of(&self, label: GroupLabel) -> Role {
        if self.prioritized.contains(&label) {
            Role::Prioritized
        } else if self.deferred.contains(&label) {
            Role::Deferred
        } else {
            Role::Independent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Prioritized,
    Deferred,
    Independent,
}

pub fn groups_interact(a: &Group, b: &Group, conflicts: &ConflictSet) -> bool {
    let tb = b.transmissions();
    a.transmissions()
        .iter()
        .any(|x| tb.iter().any(|y| conflicts.conflicts(x, y)))
}

/// Slot-allocation patterns for a model, derived from group interactions.
///
/// Interacting groups are split into a prioritized and a deferred side, each
/// internally conflict-free. Patterns deferring Z come first. A model whose
/// interacting groups cannot be split that way has no pattern.
pub fn patterns_for(model: &PathModel, conflicts: &ConflictSet) -> Vec<PatternSpec> {
    let labels = [GroupLabel::X, GroupLabel::Y, GroupLabel::Z];
    let interacts = |a: GroupLabel, b: GroupLabel| groups_interact(model.group(a), model.group(b), conflicts);
    let interacting: Vec<GroupLabel> = labels
        .iter()
        .copied()
        .filter(|&a| labels.iter().any(|&b| a != b && interacts(a, b)))
        .collect();
    let independent: Vec<GroupLabel> = labels.iter().copied().filter(|l| !interacting.contains(l)).collect();
    if interacting.is_empty() {
        return vec![PatternSpec {
            id: 1,
            prioritized: Vec::new(),
            deferred: Vec::new(),
            independent,
        }];
    }
    let mut splits: Vec<(Vec<GroupLabel>, Vec<GroupLabel>)> = Vec::new();
    let n = interacting.len();
    for mask in 1..(1u32 << n) - 1 {
        let (p, d): (Vec<GroupLabel>, Vec<GroupLabel>) =
            (0..n)
                .map(|i| (interacting[i], mask >> i & 1 == 1))
                .fold((vec![], vec![]), |(mut p, mut d), (l, f)| {
                    if f {
                        p.push(l)
                    } else {
                        d.push(l)
                    }
                    (p, d)
                });
        let clean = |side: &[GroupLabel]| side.iter().all(|&a| side.iter().all(|&b| a == b || !interacts(a, b)));
        if clean(&p) && clean(&d) {
            splits.push((p, d));
        }
    }
    splits.sort_by_key(|(p, d)| (!d.contains(&GroupLabel::Z), p.clone()));
    splits
        .into_iter()
        .enumerate()
        .map(|(i, (prioritized, deferred))| PatternSpec {
            id: i as u8 + 1,
            prioritized,
            deferred,
            independent: independent.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::tests::{example_config, CASE1};
    use crate::topology::{derive_conflicts, validate_topology};

    fn example() -> Topology {
        validate_topology(&example_config(CASE1)).unwrap()
    }

    fn ids(v: &[NodeId]) -> Vec<u32> {
        let mut out: Vec<u32> = v.iter().map(|n| n.0).collect();
        out.sort();
        out
    }

    #[test]
    fn fixed_z_gives_six_models() {
        let names: Vec<String> = enumerate_path_models(&example(), true)
            .into_iter()
            .map(|m| m.name)
            .collect();
        assert_eq!(names, ["3-2-3", "3-1-4", "2-2-4", "2-1-5", "1-2-5", "1-1-6"]);
    }

    #[test]
    fn all_branches_give_sixteen_models() {
        let topo = example();
        let models = enumerate_path_models(&topo, false);
        let n: Vec<usize> = topo.branches().iter().map(|b| b.nodes.len()).collect();
        assert_eq!(models.len(), n[0] * n[1] + n[1] * n[2] + n[0] * n[2]);
        assert_eq!(models.len(), 16);
        // brute force: every pair of inter-node links in distinct branches
        let mut brute = 0;
        for (i, a) in topo.branches().iter().enumerate() {
            for b in topo.branches().iter().skip(i + 1) {
                brute += (a.links.len() - 1) * (b.links.len() - 1);
            }
        }
        assert_eq!(brute, 16);
    }

    #[test]
    fn example_groups_and_types() {
        let models = enumerate_path_models(&example(), true);
        let m323 = &models[0];
        assert_eq!(ids(&m323.groups[0].nodes), [1, 2, 3]);
        assert_eq!(ids(&m323.groups[1].nodes), [5, 6]);
        assert_eq!(ids(&m323.groups[2].nodes), [4, 7, 8]);
        assert_eq!(m323.sep_links, [LinkId(4), LinkId(5)]);
        assert_eq!(classify_model(m323), ModelType::Type1);
        assert_eq!(m323.groups[2].nodes, vec![NodeId(4), NodeId(7), NodeId(8)]);
        let m224 = models.iter().find(|m| m.name == "2-2-4").unwrap();
        assert_eq!(classify_model(m224), ModelType::Type2);
        let m215 = models.iter().find(|m| m.name == "2-1-5").unwrap();
        assert_eq!(classify_model(m215), ModelType::Type3);
        assert_eq!(
            m215.groups[2].nodes,
            vec![NodeId(3), NodeId(5), NodeId(4), NodeId(7), NodeId(8)]
        );
        let r5: Vec<u32> = m215.groups[2].route(NodeId(5)).iter().map(|h| h.link.0).collect();
        assert_eq!(r5, [5, 8, 9, 10]);
    }

    #[test]
    fn single_node_branch_has_one_position() {
        let topo = example();
        let models = enumerate_path_models(&topo, true);
        // Y branch has 2 nodes -> 2 positions; with the Z branch (2 nodes) as X/Y partner too.
        let y_links: BTreeSet<LinkId> = models.iter().map(|m| m.sep_links[1]).collect();
        assert_eq!(y_links, BTreeSet::from([LinkId(5), LinkId(6)]));
        assert!(models.iter().all(|m| m.sep_links.iter().all(|l| {
            let link = topo.link(*l);
            !topo.is_gateway(link.a) && !topo.is_gateway(link.b)
        })));
    }

    #[test]
    fn routes_partition_and_avoid_separation_links() {
        let topo = example();
        for m in enumerate_path_models(&topo, false) {
            let mut all: Vec<NodeId> = m.groups.iter().flat_map(|g| g.nodes.clone()).collect();
            all.sort();
            assert_eq!(all, topo.nodes().collect::<Vec<_>>());
            assert!(m.groups.iter().all(|g| !g.is_empty()));
            assert_eq!(m.group_of(topo.central()), Some(GroupLabel::Z));
            for g in &m.groups {
                for (n, route) in &g.routes {
                    assert_eq!(route[0].tx, *n);
                    assert_eq!(route.last().unwrap().rx, g.gateway);
                    assert!(route.iter().all(|h| !m.sep_links.contains(&h.link)));
                    let visited: BTreeSet<NodeId> = route.iter().map(|h| h.tx).collect();
                    assert_eq!(visited.len(), route.len());
                }
            }
        }
    }

    #[test]
    fn relabeling_gateways_keeps_groups() {
        let base = example();
        let mut cfg = example_config(CASE1);
        cfg.gateways.rotate_left(1);
        let rotated = validate_topology(&cfg).unwrap();
        let sets = |t: &Topology| {
            let mut v: Vec<Vec<Vec<u32>>> = enumerate_path_models(t, false)
                .iter()
                .map(|m| {
                    let mut g: Vec<Vec<u32>> = m.groups.iter().map(|g| ids(&g.nodes)).collect();
                    g.sort();
                    g
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(sets(&base), sets(&rotated));
    }

    #[test]
    fn example_patterns() {
        let topo = example();
        let conflicts = derive_conflicts(&topo);
        let models = enumerate_path_models(&topo, true);
        let m = |name: &str| models.iter().find(|m| m.name == name).unwrap();

        let p323 = patterns_for(m("3-2-3"), &conflicts);
        assert_eq!(p323.len(), 2);
        assert_eq!(p323[0].prioritized, [GroupLabel::X, GroupLabel::Y]);
        assert_eq!(p323[0].deferred, [GroupLabel::Z]);
        assert_eq!(p323[1].prioritized, [GroupLabel::Z]);
        assert_eq!(p323[1].deferred, [GroupLabel::X, GroupLabel::Y]);

        let p224 = patterns_for(m("2-2-4"), &conflicts);
        assert_eq!(p224.len(), 2);
        assert!(p224.iter().all(|p| p.independent == [GroupLabel::X]));

        let p215 = patterns_for(m("2-1-5"), &conflicts);
        assert_eq!(p215.len(), 1);
        assert!(p215[0].independent.contains(&GroupLabel::X));
        assert!(p215[0].independent.contains(&GroupLabel::Y));
    }
}
