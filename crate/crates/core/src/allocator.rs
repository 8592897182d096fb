//! Integer slot allocation per (model, pattern), with its relaxed upper bound.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::SolveError;
use crate::paths::{enumerate_path_models, patterns_for, Group, GroupLabel, PathModel, PatternSpec, Role};
use crate::plan::{plan_pattern, position_pairs, GroupPlan, StreamKind};
use crate::relax::{solve_group_relaxed, ChainOrigin, GroupChain, RelaxedProgram};
use crate::rounding::{best_split, round_allocation, Unit};
use crate::topology::{derive_conflicts, ConflictSet, LinkId, NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SlotKey {
    pub origin: NodeId,
    pub link: LinkId,
    pub packet: u32,
    pub early: bool,
}

impl SlotKey {
    pub fn unit(&self) -> Unit {
        Unit {
            origin: self.origin,
            link: self.link,
            packet: self.packet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotAllocation {
    pub model: String,
    pub pattern_id: u8,
    pub entries: BTreeMap<SlotKey, u32>,
    /// False when some group could not give every hop a slot.
    pub feasible: bool,
    pub com_product: f64,
    pub per_node: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupOutcome {
    pub label: GroupLabel,
    pub role: Role,
    pub kind: StreamKind,
    /// Integer early window: the leaf window of an overlap stream, the
    /// blocking window of a deferred one, 0 otherwise.
    pub window: u32,
    pub window_real: f64,
    pub case_label: Option<String>,
    pub predicted_case: Option<String>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternSolution {
    pub model: String,
    pub model_name: String,
    pub no_sep_branch: NodeId,
    pub pattern: PatternSpec,
    pub cycle_slots: u32,
    pub tub_product: f64,
    pub tub: BTreeMap<SlotKey, f64>,
    pub allocation: SlotAllocation,
    pub groups: Vec<GroupOutcome>,
    pub case_label: String,
}

impl PatternSolution {
    pub fn com_product(&self) -> f64 {
        self.allocation.com_product
    }
}

/// Per-node delivery probability and their product. A node's value covers
/// all its packets, so the product needs no rate exponent.
pub fn com_probability(entries: &BTreeMap<SlotKey, u32>, topology: &Topology) -> (BTreeMap<NodeId, f64>, f64) {
    let mut totals: BTreeMap<Unit, u32> = BTreeMap::new();
    for (k, &s) in entries {
        *totals.entry(k.unit()).or_default() += s;
    }
    let mut per_node: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (u, s) in totals {
        let q = topology.loss(u.link);
        *per_node.entry(u.origin).or_insert(1.0) *= 1.0 - q.powi(s as i32);
    }
    let product = per_node.values().product();
    (per_node, product)
}

fn group_units(group: &Group, topology: &Topology) -> Vec<(Unit, f64)> {
    let mut out = Vec::new();
    for (origin, link) in group.pairs() {
        let q = group.hop(origin, link).loss;
        for packet in 0..topology.rate(origin) {
            out.push((Unit { origin, link, packet }, q));
        }
    }
    out
}

pub fn group_chain(group: &Group, topology: &Topology, budget: f64) -> GroupChain {
    GroupChain {
        origins: group
            .nodes
            .iter()
            .map(|&n| ChainOrigin {
                node: n,
                rate: topology.rate(n),
                route: group.route(n).iter().map(|h| (h.link, h.loss)).collect(),
            })
            .collect(),
        budget,
    }
}

type Counts = BTreeMap<Unit, u32>;

/// Integer counts of one stream whose units fall in three classes under
/// `a_only + both ≤ budget_a`, `b_only + both ≤ budget_b`.
fn split_counts(units: &[(Unit, f64)], class: impl Fn(&Unit) -> u8, budget_a: i64, budget_b: i64) -> Option<Counts> {
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (i, (u, _)) in units.iter().enumerate() {
        idx[class(u) as usize].push(i);
    }
    let losses = |c: usize| idx[c].iter().map(|&i| units[i].1).collect::<Vec<f64>>();
    let split = best_split(&losses(0), &losses(1), &losses(2), budget_a, budget_b)?;
    let mut out = Counts::new();
    for (c, vals) in [split.a_only, split.b_only, split.both].into_iter().enumerate() {
        for (&i, v) in idx[c].iter().zip(vals) {
            out.insert(units[i].0, v);
        }
    }
    Some(out)
}

fn pair_total<T: Copy + Into<f64>>(counts: &BTreeMap<Unit, T>, pairs: &[(NodeId, LinkId)]) -> f64 {
    counts
        .iter()
        .filter(|(u, _)| pairs.contains(&(u.origin, u.link)))
        .map(|(_, &v)| v.into())
        .sum()
}

/// Split each eligible unit's count into an early part, filling the window
/// in eligibility order.
fn early_fill<T: Copy + Into<f64>>(
    counts: &BTreeMap<Unit, T>,
    eligible: &[(NodeId, LinkId)],
    window: f64,
) -> BTreeMap<Unit, f64> {
    let mut left = window;
    let mut out = BTreeMap::new();
    for &(o, l) in eligible {
        for (u, &v) in counts.range(
            Unit {
                origin: o,
                link: l,
                packet: 0,
            }..=Unit {
                origin: o,
                link: l,
                packet: u32::MAX,
            },
        ) {
            let e = v.into().min(left).max(0.0);
            left -= e;
            out.insert(*u, e);
        }
    }
    out
}

fn deferred_case(tentative: &Counts, group: &Group, eligible: &[(NodeId, LinkId)], a: u32) -> String {
    let a = a as f64;
    let first_hop: Vec<(NodeId, LinkId)> = eligible
        .iter()
        .copied()
        .filter(|&(o, l)| group.next_hop(o).link == l)
        .collect();
    let label = if eligible.first().is_some_and(|p| pair_total(tentative, &[*p]) >= a) {
        "c1"
    } else if first_hop.iter().any(|p| pair_total(tentative, &[*p]) >= a) {
        "c2"
    } else if !first_hop.is_empty() && pair_total(tentative, &first_hop) >= a {
        "c3"
    } else if !eligible.is_empty() && pair_total(tentative, eligible) >= a {
        "c4"
    } else {
        "c5"
    };
    label.to_string()
}

struct Stage {
    counts: Counts,
    window: u32,
    feasible: bool,
    case_label: Option<String>,
    predicted: Option<String>,
}

fn solve_leading(group: &Group, plan: &GroupPlan, topology: &Topology, t: i64) -> Result<Stage, SolveError> {
    let units = group_units(group, topology);
    match &plan.kind {
        StreamKind::Overlap { leaves, eligible } => {
            let window_pairs = plan.window_pairs(group);
            let counts = split_counts(
                &units,
                |u| {
                    let p = (u.origin, u.link);
                    if eligible.contains(&p) {
                        0
                    } else if window_pairs.contains(&p) {
                        1
                    } else {
                        2
                    }
                },
                t,
                t,
            );
            let feasible = counts.is_some();
            let counts = counts.unwrap_or_else(|| units.iter().map(|u| (u.0, 0)).collect());
            let h = pair_total(&counts, &window_pairs);
            let e = pair_total(&counts, eligible);
            let (label, predicted) = if leaves.len() == 1 {
                let head = group.next_hop(leaves[0]).loss;
                let tail = eligible.iter().map(|&(o, l)| group.hop(o, l).loss).fold(0.0, f64::max);
                let label = if e >= h { "case1" } else { "case2" };
                let predicted = if tail >= head { "case1" } else { "case2" };
                (label.to_string(), Some(predicted.to_string()))
            } else {
                let label = if e <= h { "caseA" } else { "caseB" };
                (label.to_string(), None)
            };
            Ok(Stage {
                counts,
                window: h as u32,
                feasible,
                case_label: Some(label),
                predicted,
            })
        }
        _ => {
            let chain = group_chain(group, topology, t as f64);
            let relaxed = solve_group_relaxed(&chain)?;
            let ci = round_allocation(&chain, &relaxed, t);
            Ok(Stage {
                counts: ci.slots,
                window: 0,
                feasible: ci.feasible,
                case_label: None,
                predicted: None,
            })
        }
    }
}

fn solve_deferred(
    group: &Group,
    eligible: &[(NodeId, LinkId)],
    a: u32,
    topology: &Topology,
    t: i64,
) -> Result<Stage, SolveError> {
    let units = group_units(group, topology);
    let counts = split_counts(
        &units,
        |u| if eligible.contains(&(u.origin, u.link)) { 0 } else { 2 },
        t,
        t - a as i64,
    );
    let chain = group_chain(group, topology, t as f64);
    let tentative = round_allocation(&chain, &solve_group_relaxed(&chain)?, t);
    let feasible = counts.is_some();
    Ok(Stage {
        counts: counts.unwrap_or_else(|| units.iter().map(|u| (u.0, 0)).collect()),
        window: a,
        feasible,
        case_label: Some(deferred_case(&tentative.slots, group, eligible, a)),
        predicted: None,
    })
}

/// Relaxed counterpart of the whole pattern: one variable per
/// (origin, link), every stream constraint of the integer problem.
fn relaxed_program(
    model: &PathModel,
    plans: &[GroupPlan],
    topology: &Topology,
    t: f64,
) -> (RelaxedProgram, BTreeMap<(NodeId, LinkId), usize>) {
    let mut prog = RelaxedProgram::default();
    let mut index = BTreeMap::new();
    for plan in plans {
        let g = model.group(plan.label);
        for (o, l) in g.pairs() {
            let v = prog.add_var(o, l, g.hop(o, l).loss, topology.rate(o) as f64);
            index.insert((o, l), v);
        }
    }
    let vars = |pairs: &[(NodeId, LinkId)]| pairs.iter().map(|p| index[p]).collect::<Vec<usize>>();
    for plan in plans {
        let g = model.group(plan.label);
        let all = g.pairs();
        let without = |skip: &[(NodeId, LinkId)]| all.iter().copied().filter(|p| !skip.contains(p)).collect::<Vec<_>>();
        match &plan.kind {
            StreamKind::Plain => prog.add_constraint(format!("{}:all", plan.label), vars(&all), t),
            StreamKind::Overlap { eligible, .. } => {
                let window = plan.window_pairs(g);
                prog.add_constraint(format!("{}:after-window", plan.label), vars(&without(&window)), t);
                prog.add_constraint(format!("{}:not-early", plan.label), vars(&without(eligible)), t);
            }
            StreamKind::Deferred { eligible, sources } => {
                prog.add_constraint(format!("{}:all", plan.label), vars(&all), t);
                for &(p, until) in sources {
                    let pplan = plans.iter().find(|x| x.label == p).expect("source plan");
                    let mut members = vars(&without(eligible));
                    members.extend(vars(&position_pairs(model.group(p), pplan, until)));
                    prog.add_constraint(format!("{}:after-{}", plan.label, p), members, t);
                }
            }
        }
    }
    (prog, index)
}

fn window_of(
    model: &PathModel,
    plans: &[GroupPlan],
    plan: &GroupPlan,
    pos: impl Fn(&[(NodeId, LinkId)]) -> f64,
) -> f64 {
    match &plan.kind {
        StreamKind::Plain => 0.0,
        StreamKind::Overlap { .. } => pos(&plan.window_pairs(model.group(plan.label))),
        StreamKind::Deferred { sources, .. } => sources
            .iter()
            .map(|&(p, until)| {
                let pplan = plans.iter().find(|x| x.label == p).expect("source plan");
                pos(&position_pairs(model.group(p), pplan, until))
            })
            .fold(0.0, f64::max),
    }
}

/// Solve one (model, pattern) at cycle length `t`.
pub fn solve_pattern(
    topology: &Topology,
    model: &PathModel,
    pattern: &PatternSpec,
    conflicts: &ConflictSet,
    t: u32,
) -> Result<PatternSolution, SolveError> {
    let ti = t as i64;
    let plans = plan_pattern(model, pattern, conflicts);

    // prioritized and independent streams first, then windows, then deferred
    let mut stages: BTreeMap<GroupLabel, Stage> = BTreeMap::new();
    for plan in plans.iter().filter(|p| p.role != Role::Deferred) {
        stages.insert(plan.label, solve_leading(model.group(plan.label), plan, topology, ti)?);
    }
    for plan in plans.iter().filter(|p| p.role == Role::Deferred) {
        let StreamKind::Deferred { eligible, sources } = &plan.kind else {
            unreachable!("deferred role has deferred stream")
        };
        let mut a = 0.0f64;
        let mut upstream_ok = true;
        for &(p, _) in sources {
            upstream_ok &= stages[&p].feasible;
        }
        a = a.max(window_of(model, &plans, plan, |pairs| {
            let owner = model.group_of(pairs[0].0).expect("member");
            pair_total(&stages[&owner].counts, pairs)
        }));
        let mut stage = solve_deferred(model.group(plan.label), eligible, a as u32, topology, ti)?;
        stage.feasible &= upstream_ok;
        stages.insert(plan.label, stage);
    }

    let mut entries = BTreeMap::new();
    let mut outcomes = Vec::new();
    let mut feasible = true;
    for plan in &plans {
        let stage = &stages[&plan.label];
        feasible &= stage.feasible;
        let early = early_fill(&stage.counts, plan.eligible(), stage.window as f64);
        for (u, &s) in &stage.counts {
            let e = early.get(u).map(|&e| e as u32);
            let key = |early| SlotKey {
                origin: u.origin,
                link: u.link,
                packet: u.packet,
                early,
            };
            entries.insert(key(false), s - e.unwrap_or(0));
            if let Some(e) = e {
                entries.insert(key(true), e);
            }
        }
        outcomes.push(GroupOutcome {
            label: plan.label,
            role: plan.role,
            kind: plan.kind.clone(),
            window: stage.window,
            window_real: 0.0,
            case_label: stage.case_label.clone(),
            predicted_case: stage.predicted.clone(),
            feasible: stage.feasible,
        });
    }
    let (per_node, com_product) = com_probability(&entries, topology);
    let allocation = SlotAllocation {
        model: model.key(),
        pattern_id: pattern.id,
        entries,
        feasible,
        com_product,
        per_node,
    };

    // relaxed bound
    let (prog, index) = relaxed_program(model, &plans, topology, t as f64);
    let sol = prog.solve()?;
    let mut real: BTreeMap<Unit, f64> = BTreeMap::new();
    for plan in &plans {
        for (u, _) in group_units(model.group(plan.label), topology) {
            real.insert(u, sol.values[index[&(u.origin, u.link)]]);
        }
    }
    let mut tub = BTreeMap::new();
    for (plan, outcome) in plans.iter().zip(outcomes.iter_mut()) {
        let w = window_of(model, &plans, plan, |pairs| pair_total(&real, pairs));
        outcome.window_real = w;
        let group_real: BTreeMap<Unit, f64> = real
            .iter()
            .filter(|(u, _)| model.group_of(u.origin) == Some(plan.label))
            .map(|(u, v)| (*u, *v))
            .collect();
        let early = early_fill(&group_real, plan.eligible(), w);
        for (u, &s) in &group_real {
            let e = early.get(u).copied();
            let key = |early| SlotKey {
                origin: u.origin,
                link: u.link,
                packet: u.packet,
                early,
            };
            tub.insert(key(false), s - e.unwrap_or(0.0));
            if let Some(e) = e {
                tub.insert(key(true), e);
            }
        }
    }

    let labels: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.case_label.as_ref().map(|c| format!("{}:{}", o.label, c)))
        .collect();
    Ok(PatternSolution {
        model: model.key(),
        model_name: model.name.clone(),
        no_sep_branch: model.no_sep_branch,
        pattern: pattern.clone(),
        cycle_slots: t,
        tub_product: sol.product(),
        tub,
        allocation,
        groups: outcomes,
        case_label: if labels.is_empty() {
            "plain".into()
        } else {
            labels.join(",")
        },
    })
}

/// Every pattern of one model.
pub fn solve_model(
    topology: &Topology,
    model: &PathModel,
    conflicts: &ConflictSet,
    t: u32,
) -> Result<Vec<PatternSolution>, SolveError> {
    patterns_for(model, conflicts)
        .iter()
        .map(|p| solve_pattern(topology, model, p, conflicts, t))
        .collect()
}

/// Solve every (model, pattern) and rank by COM, then TUB, then model key.
pub fn optimize(topology: &Topology, t: u32, fixed_z: bool) -> Result<Vec<PatternSolution>, SolveError> {
    let conflicts = derive_conflicts(topology);
    let jobs: Vec<(PathModel, PatternSpec)> = enumerate_path_models(topology, fixed_z)
        .into_iter()
        .flat_map(|m| patterns_for(&m, &conflicts).into_iter().map(move |p| (m.clone(), p)))
        .collect();
    let mut out = jobs
        .par_iter()
        .map(|(m, p)| solve_pattern(topology, m, p, &conflicts, t))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| {
        b.com_product()
            .total_cmp(&a.com_product())
            .then(b.tub_product.total_cmp(&a.tub_product))
            .then_with(|| a.model.cmp(&b.model))
            .then(a.pattern.id.cmp(&b.pattern.id))
    });
    Ok(out)
}

/// Pairs early-eligible in some pattern of the model.
pub fn early_pairs(model: &PathModel, conflicts: &ConflictSet) -> BTreeSet<(NodeId, LinkId)> {
    patterns_for(model, conflicts)
        .iter()
        .flat_map(|p| plan_pattern(model, p, conflicts))
        .flat_map(|plan| plan.eligible().to_vec())
        .collect()
}
