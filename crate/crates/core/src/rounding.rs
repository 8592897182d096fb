//! Integer slot counts from relaxed solutions.
//!
//! The objective `Σ ln(1 - q_u^{s_u})` is separable and concave in each
//! per-packet unit, so a greedy fill plus pairwise exchange reaches the
//! integer optimum under a single budget. Two overlapping budgets are
//! handled by enumerating the total of the shared units.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::relax::{ln_survive, GroupChain, RelaxedSolution};
use crate::topology::{LinkId, NodeId};

/// Gain of raising a unit from `s` to `s + 1` slots.
fn gain(q: f64, s: u32) -> f64 {
    let s = s as f64;
    ln_survive(q, s + 1.0) - ln_survive(q, s)
}

/// Log of the product `Π (1 - q_u^{s_u})`.
pub fn log_value(losses: &[f64], counts: &[u32]) -> f64 {
    losses.iter().zip(counts).map(|(&q, &s)| ln_survive(q, s as f64)).sum()
}

fn argmax_gain(losses: &[f64], counts: &[u32]) -> usize {
    let mut best = 0;
    let mut best_g = f64::NEG_INFINITY;
    for (u, (&q, &s)) in losses.iter().zip(counts).enumerate() {
        let g = gain(q, s);
        if g > best_g {
            best_g = g;
            best = u;
        }
    }
    best
}

/// Unit whose removal costs least, among units above one slot.
fn argmin_loss(losses: &[f64], counts: &[u32], skip: Option<usize>) -> Option<usize> {
    let mut best = None;
    let mut best_l = f64::INFINITY;
    for (u, (&q, &s)) in losses.iter().zip(counts).enumerate() {
        if s <= 1 || Some(u) == skip {
            continue;
        }
        let l = gain(q, s - 1);
        if l < best_l {
            best_l = l;
            best = Some(u);
        }
    }
    best
}

/// Best counts (each ≥ 1) summing exactly to `budget`, starting from an
/// optional seed. `None` when the budget cannot give every unit one slot.
/// Ties go to the earliest unit.
pub fn best_integer(losses: &[f64], budget: i64, seed: Option<&[u32]>) -> Option<Vec<u32>> {
    let n = losses.len() as i64;
    if budget < n {
        return None;
    }
    if n == 0 {
        return Some(Vec::new());
    }
    let mut counts: Vec<u32> = match seed {
        Some(s) => s.iter().map(|&c| c.max(1)).collect(),
        None => vec![1; losses.len()],
    };
    let mut total: i64 = counts.iter().map(|&c| c as i64).sum();
    while total > budget {
        let u = argmin_loss(losses, &counts, None).expect("some unit above one slot");
        counts[u] -= 1;
        total -= 1;
    }
    while total < budget {
        let u = argmax_gain(losses, &counts);
        counts[u] += 1;
        total += 1;
    }
    // Exchange until no single move improves; exact for separable concave terms.
    loop {
        let up = argmax_gain(losses, &counts);
        let Some(down) = argmin_loss(losses, &counts, Some(up)) else {
            break;
        };
        let g = gain(losses[up], counts[up]);
        let l = gain(losses[down], counts[down] - 1);
        if g - l > 1e-15 {
            counts[up] += 1;
            counts[down] -= 1;
        } else {
            break;
        }
    }
    Some(counts)
}

/// Optimal log-values of a unit class for every total from `n` to `max_total`.
fn value_profile(losses: &[f64], max_total: i64) -> Vec<f64> {
    let n = losses.len() as i64;
    if max_total < n {
        return Vec::new();
    }
    let mut counts = vec![1u32; losses.len()];
    let mut v = log_value(losses, &counts);
    let mut out = vec![v];
    if losses.is_empty() {
        out.resize((max_total + 1) as usize, 0.0);
        return out;
    }
    for _ in n..max_total {
        let u = argmax_gain(losses, &counts);
        v += gain(losses[u], counts[u]);
        counts[u] += 1;
        out.push(v);
    }
    out
}

/// Counts for three unit classes under two budgets:
/// `a_only + both ≤ budget_a` and `b_only + both ≤ budget_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub a_only: Vec<u32>,
    pub b_only: Vec<u32>,
    pub both: Vec<u32>,
}

pub fn best_split(a_only: &[f64], b_only: &[f64], both: &[f64], budget_a: i64, budget_b: i64) -> Option<Split> {
    let (na, nb, nm) = (a_only.len() as i64, b_only.len() as i64, both.len() as i64);
    let m_max = (budget_a - na).min(budget_b - nb);
    if m_max < nm {
        return None;
    }
    let pa = value_profile(a_only, budget_a - nm);
    let pb = value_profile(b_only, budget_b - nm);
    let pm = value_profile(both, m_max);
    let at = |p: &[f64], n: i64, t: i64| if n == 0 { 0.0 } else { p[(t - n) as usize] };
    let mut best_m = nm;
    let mut best_v = f64::NEG_INFINITY;
    for m in nm..=m_max {
        let v = at(&pm, nm, m) + at(&pa, na, budget_a - m) + at(&pb, nb, budget_b - m);
        if v > best_v + 1e-15 {
            best_v = v;
            best_m = m;
        }
    }
    let fill = |losses: &[f64], t: i64| {
        if losses.is_empty() {
            Vec::new()
        } else {
            best_integer(losses, t, None).expect("feasible by construction")
        }
    };
    Some(Split {
        a_only: fill(a_only, budget_a - best_m),
        b_only: fill(b_only, budget_b - best_m),
        both: fill(both, best_m),
    })
}

/// One packet's slot count on one route link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Unit {
    pub origin: NodeId,
    pub link: LinkId,
    pub packet: u32,
}

/// Per-packet units of a chain: origins in chain order, route order, packet.
pub fn chain_units(chain: &GroupChain) -> Vec<(Unit, f64)> {
    let mut out = Vec::new();
    for o in &chain.origins {
        for &(link, q) in &o.route {
            for packet in 0..o.rate {
                out.push((
                    Unit {
                        origin: o.node,
                        link,
                        packet,
                    },
                    q,
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainInteger {
    pub slots: BTreeMap<Unit, u32>,
    /// False when the budget is below one slot per unit; slots are then all 0.
    pub feasible: bool,
    pub log_value: f64,
}

/// Integer counts summing exactly to `budget`, seeded from the floors of the
/// relaxed solution.
pub fn round_allocation(chain: &GroupChain, relaxed: &RelaxedSolution, budget: i64) -> ChainInteger {
    let units = chain_units(chain);
    let losses: Vec<f64> = units.iter().map(|u| u.1).collect();
    let seed: Vec<u32> = units
        .iter()
        .map(|(u, _)| {
            relaxed
                .slots
                .get(&(u.origin, u.link))
                .map_or(1, |s| s.floor().max(0.0) as u32)
        })
        .collect();
    match best_integer(&losses, budget, Some(&seed)) {
        Some(counts) => ChainInteger {
            log_value: log_value(&losses, &counts),
            slots: units.iter().map(|u| u.0).zip(counts).collect(),
            feasible: true,
        },
        None => ChainInteger {
            slots: units.iter().map(|u| (u.0, 0)).collect(),
            feasible: false,
            log_value: f64::NEG_INFINITY,
        },
    }
}
