//! Slot-by-slot transmission grid for an allocation, and its checker.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::allocator::{PatternSolution, SlotAllocation, SlotKey};
use crate::error::TimelineError;
use crate::paths::{Group, PathModel};
use crate::plan::{plan_pattern, StreamKind};
use crate::topology::{ConflictSet, LinkId, NodeId, Transmission};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Entry {
    pub tx: NodeId,
    pub rx: NodeId,
    pub link: LinkId,
    pub origin: NodeId,
    pub packet: u32,
}

impl Entry {
    pub fn transmission(&self) -> Transmission {
        Transmission {
            tx: self.tx,
            rx: self.rx,
            link: self.link,
        }
    }
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}:{}#{}", self.tx, self.rx, self.link, self.origin)?;
        if self.packet > 0 {
            write!(f, ".{}", self.packet)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Timeline {
    pub slots: Vec<Vec<Entry>>,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn transmissions(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    /// First and last slot carrying each origin's packets.
    pub fn origin_span(&self) -> BTreeMap<NodeId, (usize, usize)> {
        let mut out: BTreeMap<NodeId, (usize, usize)> = BTreeMap::new();
        for (i, slot) in self.slots.iter().enumerate() {
            for e in slot {
                out.entry(e.origin).and_modify(|s| s.1 = i).or_insert((i, i));
            }
        }
        out
    }

    /// One line per slot, entries in a fixed order.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let mut items: Vec<&Entry> = slot.iter().collect();
            items.sort();
            let text: Vec<String> = items.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!("{i:3}: {}\n", text.join(" ")));
        }
        out
    }

    fn place(&mut self, start: usize, count: usize, e: Entry) -> usize {
        if self.slots.len() < start + count {
            self.slots.resize(start + count, Vec::new());
        }
        for s in &mut self.slots[start..start + count] {
            s.push(e);
        }
        start + count
    }
}

fn entry(group: &Group, origin: NodeId, link: LinkId, packet: u32) -> Entry {
    let hop = group.hop(origin, link);
    Entry {
        tx: hop.tx,
        rx: hop.rx,
        link,
        origin,
        packet,
    }
}

/// Every unit a member transmits, in node order, then origin, then packet.
fn node_order_keys(group: &Group, entries: &BTreeMap<SlotKey, u32>, early: bool) -> Vec<(SlotKey, u32)> {
    let mut out = Vec::new();
    for &n in &group.nodes {
        for o in group.origins_via(n) {
            let link = group.route(o).iter().find(|h| h.tx == n).expect("relay on route").link;
            for (k, &c) in entries.range(
                SlotKey {
                    origin: o,
                    link,
                    packet: 0,
                    early: false,
                }..=SlotKey {
                    origin: o,
                    link,
                    packet: u32::MAX,
                    early: true,
                },
            ) {
                if k.early == early {
                    out.push((*k, c));
                }
            }
        }
    }
    out
}

fn fill_order_keys(eligible: &[(NodeId, LinkId)], entries: &BTreeMap<SlotKey, u32>) -> Vec<(SlotKey, u32)> {
    eligible
        .iter()
        .flat_map(|&(o, l)| {
            entries
                .iter()
                .filter(move |(k, _)| k.early && k.origin == o && k.link == l)
                .map(|(k, &c)| (*k, c))
        })
        .collect()
}

/// Lay out a solved pattern slot by slot. Every group stream starts at slot
/// 0; serialized units of a deferred stream start after its window.
pub fn build_timeline(
    model: &PathModel,
    solution: &PatternSolution,
    conflicts: &ConflictSet,
    cycle_slots: u32,
) -> Result<Timeline, TimelineError> {
    let entries = &solution.allocation.entries;
    let plans = plan_pattern(model, &solution.pattern, conflicts);
    let mut tl = Timeline::default();
    for (plan, outcome) in plans.iter().zip(&solution.groups) {
        let group = model.group(plan.label);
        let put = |tl: &mut Timeline, start: usize, keys: &[(SlotKey, u32)]| {
            let mut at = start;
            for &(k, c) in keys {
                at = tl.place(at, c as usize, entry(group, k.origin, k.link, k.packet));
            }
            at
        };
        let serial = node_order_keys(group, entries, false);
        match &plan.kind {
            StreamKind::Plain => {
                put(&mut tl, 0, &serial);
            }
            StreamKind::Overlap { eligible, .. } => {
                let window = plan.window_pairs(group);
                let (head, rest): (Vec<_>, Vec<_>) = serial
                    .into_iter()
                    .partition(|(k, _)| window.contains(&(k.origin, k.link)));
                let h = put(&mut tl, 0, &head);
                put(&mut tl, 0, &fill_order_keys(eligible, entries));
                put(&mut tl, h, &rest);
            }
            StreamKind::Deferred { eligible, .. } => {
                put(&mut tl, 0, &fill_order_keys(eligible, entries));
                put(&mut tl, outcome.window as usize, &serial);
            }
        }
    }
    if tl.len() > cycle_slots as usize {
        return Err(TimelineError::DoesNotFit {
            needed: tl.len(),
            cycle: cycle_slots as usize,
        });
    }
    let report = verify_timeline(&tl, conflicts, cycle_slots);
    match report.violation {
        Some(v) => Err(v),
        None => Ok(tl),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub ok: bool,
    pub length: usize,
    pub transmissions: usize,
    #[serde(serialize_with = "ser_violation")]
    pub violation: Option<TimelineError>,
}

fn ser_violation<S: serde::Serializer>(v: &Option<TimelineError>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(e) => s.serialize_some(&e.to_string()),
        None => s.serialize_none(),
    }
}

/// Check the cycle bound, pairwise conflicts per slot and causality; the
/// first violation found is reported.
pub fn verify_timeline(tl: &Timeline, conflicts: &ConflictSet, cycle_slots: u32) -> Verification {
    let violation = check(tl, conflicts, cycle_slots).err();
    Verification {
        ok: violation.is_none(),
        length: tl.len(),
        transmissions: tl.transmissions(),
        violation,
    }
}

fn check(tl: &Timeline, conflicts: &ConflictSet, cycle_slots: u32) -> Result<(), TimelineError> {
    if tl.len() > cycle_slots as usize {
        return Err(TimelineError::DoesNotFit {
            needed: tl.len(),
            cycle: cycle_slots as usize,
        });
    }
    // (origin, packet) -> nodes holding it and the slot they got it
    let mut held: BTreeMap<(NodeId, u32, NodeId), usize> = BTreeMap::new();
    for (i, slot) in tl.slots.iter().enumerate() {
        for (a, x) in slot.iter().enumerate() {
            for y in &slot[a + 1..] {
                let (tx, ty) = (x.transmission(), y.transmission());
                if tx.tx == ty.tx || tx.rx == ty.rx || conflicts.conflicts(&tx, &ty) {
                    return Err(TimelineError::ConflictViolation {
                        slot: i,
                        detail: format!("{x} and {y}"),
                    });
                }
            }
            if x.tx != x.origin && held.get(&(x.origin, x.packet, x.tx)).is_none_or(|&s| s >= i) {
                return Err(TimelineError::CausalityViolation {
                    slot: i,
                    detail: format!("{x} relays a packet it has not received"),
                });
            }
        }
        for x in slot {
            held.entry((x.origin, x.packet, x.rx)).or_insert(i);
        }
    }
    Ok(())
}

/// Slot counts per allocation key agree with the grid.
pub fn conserves(tl: &Timeline, alloc: &SlotAllocation) -> bool {
    let mut grid: BTreeMap<(NodeId, LinkId, u32), u32> = BTreeMap::new();
    for e in tl.slots.iter().flatten() {
        *grid.entry((e.origin, e.link, e.packet)).or_default() += 1;
    }
    let mut want: BTreeMap<(NodeId, LinkId, u32), u32> = BTreeMap::new();
    for (k, &c) in &alloc.entries {
        if c > 0 {
            *want.entry((k.origin, k.link, k.packet)).or_default() += c;
        }
    }
    grid == want
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{com_probability, solve_model};
    use crate::paths::enumerate_path_models;
    use crate::topology::tests::{example_config, CASE1};
    use crate::topology::{derive_conflicts, validate_topology, Topology};

    fn setup() -> (Topology, ConflictSet, PathModel) {
        let topo = validate_topology(&example_config(CASE1)).unwrap();
        let cs = derive_conflicts(&topo);
        let model = enumerate_path_models(&topo, true).remove(0);
        (topo, cs, model)
    }

    fn e(tx: u32, rx: u32, link: u32, origin: u32) -> Entry {
        Entry {
            tx: NodeId(tx),
            rx: NodeId(rx),
            link: LinkId(link),
            origin: NodeId(origin),
            packet: 0,
        }
    }

    /// Reference pattern-1 integer allocation placed into the solved pattern-1 structure.
    fn reference_solution(topo: &Topology, cs: &ConflictSet, model: &PathModel) -> PatternSolution {
        let mut sol = solve_model(topo, model, cs, 30).unwrap().remove(0);
        let rows = [
            (1, 1, 5),
            (2, 1, 5),
            (2, 2, 4),
            (3, 1, 6),
            (3, 2, 4),
            (3, 3, 6),
            (4, 8, 3),
            (4, 9, 7),
            (4, 10, 4),
            (5, 6, 12),
            (5, 7, 9),
            (6, 7, 9),
            (7, 9, 0),
            (7, 10, 4),
            (8, 10, 0),
        ];
        let early = [(7, 9, 7), (7, 10, 1), (8, 10, 4)];
        let mut entries = BTreeMap::new();
        for (rs, flag) in [(&rows[..], false), (&early[..], true)] {
            for &(o, l, c) in rs {
                entries.insert(
                    SlotKey {
                        origin: NodeId(o),
                        link: LinkId(l),
                        packet: 0,
                        early: flag,
                    },
                    c,
                );
            }
        }
        let (per_node, com) = com_probability(&entries, topo);
        sol.allocation.entries = entries;
        sol.allocation.per_node = per_node;
        sol.allocation.com_product = com;
        sol.groups[2].window = 12;
        sol
    }

    #[test]
    fn reference_timeline() {
        let (topo, cs, model) = setup();
        let sol = reference_solution(&topo, &cs, &model);
        let tl = build_timeline(&model, &sol, &cs, 30).unwrap();
        assert!(tl.len() <= 30);
        assert!(conserves(&tl, &sol.allocation));
        for slot in &tl.slots {
            let tx: Vec<u32> = slot.iter().map(|e| e.tx.0).collect();
            assert!(!(tx.contains(&3) && tx.contains(&4)));
            assert!(!(tx.contains(&5) && tx.contains(&4)));
        }
        // the early window is exactly the 12 serialized early transmissions of 7 and 8
        let early: usize = tl.slots[..12]
            .iter()
            .map(|s| s.iter().filter(|e| e.tx == NodeId(7) || e.tx == NodeId(8)).count())
            .sum();
        assert_eq!(early, 12);
        assert!(tl.slots[..12].iter().all(|s| s.iter().all(|e| e.tx != NodeId(4))));
    }

    #[test]
    fn every_solution_builds_and_verifies() {
        let topo = validate_topology(&example_config(CASE1)).unwrap();
        let cs = derive_conflicts(&topo);
        for t in [20, 30] {
            for model in enumerate_path_models(&topo, false) {
                for sol in solve_model(&topo, &model, &cs, t).unwrap() {
                    if !sol.allocation.feasible {
                        continue;
                    }
                    let tl = build_timeline(&model, &sol, &cs, t).unwrap();
                    assert!(verify_timeline(&tl, &cs, t).ok);
                    assert!(conserves(&tl, &sol.allocation), "{} p{}", sol.model, sol.pattern.id);
                    assert_eq!(tl, build_timeline(&model, &sol, &cs, t).unwrap());
                }
            }
        }
    }

    #[test]
    fn co_scheduled_three_and_four_rejected() {
        let (_, cs, _) = setup();
        let tl = Timeline {
            slots: vec![vec![e(5, 6, 6, 5)], vec![e(3, 2, 3, 3), e(4, 7, 8, 4)]],
        };
        let v = verify_timeline(&tl, &cs, 30);
        assert!(matches!(
            v.violation,
            Some(TimelineError::ConflictViolation { slot: 1, .. })
        ));
    }

    #[test]
    fn relay_before_receive_rejected() {
        let (_, cs, _) = setup();
        let tl = Timeline {
            slots: vec![vec![e(2, 1, 2, 3)], vec![e(3, 2, 3, 3)]],
        };
        let v = verify_timeline(&tl, &cs, 30);
        assert!(matches!(
            v.violation,
            Some(TimelineError::CausalityViolation { slot: 0, .. })
        ));
        let ok = Timeline {
            slots: vec![vec![e(3, 2, 3, 3)], vec![e(2, 1, 2, 3)]],
        };
        assert!(verify_timeline(&ok, &cs, 30).ok);
    }

    #[test]
    fn cycle_bound_and_empty() {
        let (_, cs, _) = setup();
        let tl = Timeline {
            slots: vec![vec![e(1, 101, 1, 1)]; 31],
        };
        assert!(matches!(
            verify_timeline(&tl, &cs, 30).violation,
            Some(TimelineError::DoesNotFit { needed: 31, cycle: 30 })
        ));
        let empty = Timeline::default();
        assert!(verify_timeline(&empty, &cs, 30).ok);
        assert_eq!(empty.to_grid(), "");
    }

    #[test]
    fn grid_lines() {
        let tl = Timeline {
            slots: vec![vec![e(5, 6, 6, 5), e(3, 2, 3, 3)]],
        };
        assert_eq!(tl.to_grid(), "  0: 3->2:3#3 5->6:6#5\n");
    }
}
