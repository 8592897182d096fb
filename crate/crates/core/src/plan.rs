//! How each group's slot stream is shaped inside a pattern.
//!
//! A group stream is serialized by default. Two kinds of spatial reuse are
//! recognised: a prioritized or independent group may run some downstream
//! transmissions while its leaf nodes send their first hop (`Overlap`), and a
//! deferred group may run its unblocked transmissions while the prioritized
//! groups still hold the channel (`Deferred`).

use std::collections::BTreeSet;

use serde::Serialize;

use crate::paths::{Group, GroupLabel, PathModel, PatternSpec, Role};
use crate::topology::{ConflictSet, LinkId, NodeId, Transmission};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StreamKind {
    /// Everything serialized within the cycle.
    Plain,
    /// Leaf first hops form a window; `eligible` pairs may run inside it.
    Overlap {
        leaves: Vec<NodeId>,
        eligible: Vec<(NodeId, LinkId)>,
    },
    /// `eligible` pairs may run while the prioritized groups are still
    /// blocking; the rest waits for the latest `source` burst to end.
    Deferred {
        eligible: Vec<(NodeId, LinkId)>,
        sources: Vec<(GroupLabel, NodeId)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupPlan {
    pub label: GroupLabel,
    pub role: Role,
    pub kind: StreamKind,
}

impl GroupPlan {
    pub fn eligible(&self) -> &[(NodeId, LinkId)] {
        match &self.kind {
            StreamKind::Plain => &[],
            StreamKind::Overlap { eligible, .. } | StreamKind::Deferred { eligible, .. } => eligible,
        }
    }

    /// Pairs forming the leaf window of an overlap stream.
    pub fn window_pairs(&self, group: &Group) -> Vec<(NodeId, LinkId)> {
        match &self.kind {
            StreamKind::Overlap { leaves, .. } => leaves.iter().map(|&n| (n, group.next_hop(n).link)).collect(),
            _ => Vec::new(),
        }
    }
}

fn conflicts_any(conflicts: &ConflictSet, t: &Transmission, others: &[Transmission]) -> bool {
    others.iter().any(|o| conflicts.conflicts(t, o))
}

/// Pairs an origin can push through free transmitters from its own position,
/// in fill order: hop index first, then member order.
pub fn eligible_pairs(group: &Group, free: &BTreeSet<NodeId>) -> Vec<(NodeId, LinkId)> {
    let mut out: Vec<(usize, usize, NodeId, LinkId)> = Vec::new();
    for (oi, &o) in group.nodes.iter().enumerate() {
        for (h, hop) in group.route(o).iter().enumerate() {
            if !free.contains(&hop.tx) {
                break;
            }
            out.push((h, oi, o, hop.link));
        }
    }
    out.sort();
    out.into_iter().map(|(_, _, o, l)| (o, l)).collect()
}

fn overlap_or_plain(group: &Group, conflicts: &ConflictSet) -> StreamKind {
    let leaves = group.leaves();
    let leaf_tx: Vec<Transmission> = leaves.iter().map(|&n| group.next_hop(n).transmission()).collect();
    let free: BTreeSet<NodeId> = group
        .nodes
        .iter()
        .copied()
        .filter(|n| !leaves.contains(n))
        .filter(|&n| !conflicts_any(conflicts, &group.next_hop(n).transmission(), &leaf_tx))
        .collect();
    let eligible = eligible_pairs(group, &free);
    if eligible.is_empty() {
        StreamKind::Plain
    } else {
        StreamKind::Overlap { leaves, eligible }
    }
}

fn deferred(model: &PathModel, label: GroupLabel, pattern: &PatternSpec, conflicts: &ConflictSet) -> StreamKind {
    let group = model.group(label);
    let own_tx = group.transmissions();
    let prior_tx: Vec<Transmission> = pattern
        .prioritized
        .iter()
        .flat_map(|&p| model.group(p).transmissions())
        .collect();
    let free: BTreeSet<NodeId> = group
        .nodes
        .iter()
        .copied()
        .filter(|&n| !conflicts_any(conflicts, &group.next_hop(n).transmission(), &prior_tx))
        .collect();
    let sources = pattern
        .prioritized
        .iter()
        .filter_map(|&p| {
            let pg = model.group(p);
            pg.nodes
                .iter()
                .rev()
                .find(|&&n| conflicts_any(conflicts, &pg.next_hop(n).transmission(), &own_tx))
                .map(|&n| (p, n))
        })
        .collect();
    StreamKind::Deferred {
        eligible: eligible_pairs(group, &free),
        sources,
    }
}

/// Stream shape of every group, in X, Y, Z order.
pub fn plan_pattern(model: &PathModel, pattern: &PatternSpec, conflicts: &ConflictSet) -> Vec<GroupPlan> {
    [GroupLabel::X, GroupLabel::Y, GroupLabel::Z]
        .into_iter()
        .map(|label| {
            let role = pattern.role_of(label);
            let kind = match role {
                Role::Deferred => deferred(model, label, pattern, conflicts),
                _ => overlap_or_plain(model.group(label), conflicts),
            };
            GroupPlan { label, role, kind }
        })
        .collect()
}

/// Pairs counted by the window position of `until` in a prioritized stream:
/// every pair transmitted by members up to and including `until`, plus the
/// leaf window of an overlap stream.
pub fn position_pairs(group: &Group, plan: &GroupPlan, until: NodeId) -> Vec<(NodeId, LinkId)> {
    let window = plan.window_pairs(group);
    let upto: Vec<NodeId> = {
        let i = group.nodes.iter().position(|&n| n == until).expect("member node");
        group.nodes[..=i].to_vec()
    };
    let mut out = window.clone();
    for (o, l) in group.pairs() {
        let tx = group.hop(o, l).tx;
        if upto.contains(&tx) && !window.contains(&(o, l)) {
            out.push((o, l));
        }
    }
    out
}
