//! Monte Carlo replay of a timeline over independent lossy links.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::SimError;
use crate::timeline::Timeline;
use crate::topology::{NodeId, Topology};

pub const RNG_NAME: &str = "ChaCha8 (per-trial stream)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRate {
    pub delivered: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub trials: u64,
    pub seed: u64,
    pub rng: String,
    pub reuse: bool,
    pub per_node: BTreeMap<NodeId, NodeRate>,
    pub all_delivered: u64,
    pub all_rate: f64,
}

struct Tx {
    tx: usize,
    rx: usize,
    packet: usize,
    success: f64,
    /// Packets queued later on the same transmitter and link, in order.
    later: Vec<usize>,
}

struct Compiled {
    slots: Vec<Vec<Tx>>,
    nodes: usize,
    packets: usize,
    /// Index of each packet's origin node.
    owner: Vec<usize>,
    gateway: Vec<bool>,
    origins: Vec<NodeId>,
    /// Index into `origins` of each packet.
    packet_origin: Vec<usize>,
}

fn compile(tl: &Timeline, topology: &Topology) -> Result<Compiled, SimError> {
    let mut node_idx: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut gateway = Vec::new();
    for n in topology.nodes().chain(topology.gateways().iter().copied()) {
        node_idx.insert(n, gateway.len());
        gateway.push(topology.is_gateway(n));
    }
    // every packet of every node, so silent nodes report a rate of 0
    let origins: Vec<NodeId> = topology.nodes().collect();
    let mut packet_idx: BTreeMap<(NodeId, u32), usize> = BTreeMap::new();
    let mut owner = Vec::new();
    let mut packet_origin = Vec::new();
    for (oi, &o) in origins.iter().enumerate() {
        for k in 0..topology.rate(o) {
            packet_idx.insert((o, k), owner.len());
            owner.push(node_idx[&o]);
            packet_origin.push(oi);
        }
    }
    let mut slots = Vec::with_capacity(tl.len());
    for (i, slot) in tl.slots.iter().enumerate() {
        let mut out = Vec::with_capacity(slot.len());
        for e in slot {
            if !packet_idx.contains_key(&(e.origin, e.packet)) {
                return Err(SimError::InvalidTimeline(format!("unknown packet in slot {i}: {e}")));
            }
            if !topology.links().any(|l| l.id == e.link) {
                return Err(SimError::InvalidTimeline(format!(
                    "unknown link {} in slot {i}",
                    e.link
                )));
            }
            let link = topology.link(e.link);
            if !((link.a == e.tx && link.b == e.rx) || (link.b == e.tx && link.a == e.rx)) {
                return Err(SimError::InvalidTimeline(format!("{e} does not match link {}", e.link)));
            }
            let mut later = Vec::new();
            for s in &tl.slots[i + 1..] {
                for f in s {
                    let p = packet_idx[&(f.origin, f.packet)];
                    if f.tx == e.tx && f.link == e.link && !later.contains(&p) {
                        later.push(p);
                    }
                }
            }
            out.push(Tx {
                tx: node_idx[&e.tx],
                rx: node_idx[&e.rx],
                packet: packet_idx[&(e.origin, e.packet)],
                success: 1.0 - link.loss,
                later,
            });
        }
        slots.push(out);
    }
    Ok(Compiled {
        slots,
        nodes: gateway.len(),
        packets: packet_idx.len(),
        owner,
        gateway,
        origins,
        packet_origin,
    })
}

/// Packets that reached a gateway in one trial.
fn run_trial(c: &Compiled, rng: &mut ChaCha8Rng, reuse: bool) -> Vec<bool> {
    let at = |node: usize, packet: usize| node * c.packets + packet;
    let mut held = vec![false; c.nodes * c.packets];
    for p in 0..c.packets {
        held[at(c.owner[p], p)] = true;
    }
    let mut arrivals: Vec<usize> = Vec::new();
    for slot in &c.slots {
        arrivals.clear();
        for t in slot {
            let mut p = Some(t.packet);
            if !held[at(t.tx, t.packet)] {
                p = if reuse {
                    t.later
                        .iter()
                        .copied()
                        .find(|&q| held[at(t.tx, q)] && !held[at(t.rx, q)])
                } else {
                    None
                };
            }
            // one draw per scheduled transmission keeps streams aligned across modes
            let ok = rng.random::<f64>() < t.success;
            if let (Some(p), true) = (p, ok) {
                arrivals.push(at(t.rx, p));
            }
        }
        for &a in &arrivals {
            held[a] = true;
        }
    }
    let mut delivered = vec![false; c.packets];
    for n in (0..c.nodes).filter(|&n| c.gateway[n]) {
        for (p, d) in delivered.iter_mut().enumerate() {
            *d |= held[at(n, p)];
        }
    }
    delivered
}

/// Replay `trials` independent cycles. Trial `i` draws from stream `i` of a
/// generator seeded with `seed`, so results do not depend on thread count.
pub fn simulate(
    tl: &Timeline,
    topology: &Topology,
    trials: u64,
    seed: u64,
    reuse: bool,
) -> Result<SimReport, SimError> {
    if trials == 0 {
        return Err(SimError::InvalidTimeline("trials must be at least 1".into()));
    }
    let c = compile(tl, topology)?;
    let n_orig = c.origins.len();
    let (counts, all) = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial);
            let delivered = run_trial(&c, &mut rng, reuse);
            let mut ok = vec![true; n_orig];
            for (p, &d) in delivered.iter().enumerate() {
                ok[c.packet_origin[p]] &= d;
            }
            let all = ok.iter().all(|&x| x);
            (ok.into_iter().map(u64::from).collect::<Vec<u64>>(), u64::from(all))
        })
        .reduce(
            || (vec![0; n_orig], 0),
            |(mut a, x), (b, y)| {
                for (i, v) in b.into_iter().enumerate() {
                    a[i] += v;
                }
                (a, x + y)
            },
        );
    let per_node = c
        .origins
        .iter()
        .zip(counts)
        .map(|(&o, d)| {
            (
                o,
                NodeRate {
                    delivered: d,
                    rate: d as f64 / trials as f64,
                },
            )
        })
        .collect();
    Ok(SimReport {
        trials,
        seed,
        rng: RNG_NAME.into(),
        reuse,
        per_node,
        all_delivered: all,
        all_rate: all as f64 / trials as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCheck {
    pub node: NodeId,
    pub empirical: f64,
    pub analytic: f64,
    pub sigma: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub nodes: Vec<NodeCheck>,
    pub pass: bool,
}

fn check(node: NodeId, empirical: f64, analytic: f64, trials: u64) -> NodeCheck {
    let sigma = (analytic * (1.0 - analytic) / trials as f64).sqrt();
    let dev = (empirical - analytic).abs();
    // the empirical rate moves in steps of 1/trials: allow half a step
    // (continuity correction), which matters when the analytic value is near 0 or 1
    let tol = 3.0 * sigma + 0.5 / trials as f64 + 1e-12;
    NodeCheck {
        node,
        empirical,
        analytic,
        sigma,
        z: if sigma > 0.0 { dev / sigma } else { 0.0 },
        pass: dev <= tol,
    }
}

/// Flag nodes whose empirical rate is more than 3σ, plus half a count, from the analytic value.
pub fn compare(report: &SimReport, analytic: &BTreeMap<NodeId, f64>) -> Result<Comparison, SimError> {
    if !report.per_node.keys().eq(analytic.keys()) {
        return Err(SimError::NodeSetMismatch);
    }
    let nodes: Vec<NodeCheck> = report
        .per_node
        .iter()
        .map(|(&n, r)| check(n, r.rate, analytic[&n], report.trials))
        .collect();
    let pass = nodes.iter().all(|c| c.pass);
    Ok(Comparison { nodes, pass })
}

/// Same test for the all-delivered rate against the analytic product.
pub fn compare_overall(report: &SimReport, product: f64) -> NodeCheck {
    check(NodeId(0), report.all_rate, product, report.trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::solve_model;
    use crate::paths::enumerate_path_models;
    use crate::timeline::{build_timeline, Entry};
    use crate::topology::tests::{example_config, CASE1};
    use crate::topology::{derive_conflicts, validate_topology, LinkId};

    fn one_link(q: f64) -> (Topology, Timeline) {
        let mut cfg = example_config(CASE1);
        cfg.links[0].loss = q;
        let topo = validate_topology(&cfg).unwrap();
        let e = Entry {
            tx: NodeId(1),
            rx: NodeId(101),
            link: LinkId(1),
            origin: NodeId(1),
            packet: 0,
        };
        (
            topo,
            Timeline {
                slots: vec![vec![e]; 2],
            },
        )
    }

    #[test]
    fn bernoulli_two_slots() {
        let (topo, tl) = one_link(0.3);
        let r = simulate(&tl, &topo, 100_000, 7, false).unwrap();
        let sigma = (0.91f64 * 0.09 / 1e5).sqrt();
        assert!((r.per_node[&NodeId(1)].rate - 0.91).abs() <= 3.0 * sigma);
        let mut bad: BTreeMap<NodeId, f64> = (1..=8).map(|n| (NodeId(n), 0.0)).collect();
        bad.insert(NodeId(1), 0.5);
        assert!(!compare(&r, &bad).unwrap().pass);
        let other: BTreeMap<NodeId, f64> = [(NodeId(1), 0.91)].into();
        let mut full = other.clone();
        for n in 2..=8 {
            full.insert(NodeId(n), 0.0);
        }
        // nodes without slots are never delivered
        assert!(compare(&r, &full).unwrap().pass);
        assert_eq!(compare(&r, &other), Err(SimError::NodeSetMismatch));
    }

    #[test]
    fn near_perfect_link() {
        let (topo, tl) = one_link(1e-9);
        let r = simulate(&tl, &topo, 10_000, 1, false).unwrap();
        assert_eq!(r.per_node[&NodeId(1)].rate, 1.0);
        assert_eq!(r.per_node[&NodeId(2)].rate, 0.0);
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let (topo, tl) = one_link(0.4);
        let a = simulate(&tl, &topo, 1, 99, false).unwrap();
        assert_eq!(a, simulate(&tl, &topo, 1, 99, false).unwrap());
        let b = simulate(&tl, &topo, 5000, 3, true).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| simulate(&tl, &topo, 5000, 3, true).unwrap());
        assert_eq!(b, c);
    }

    #[test]
    fn invalid_link_rejected() {
        let (topo, mut tl) = one_link(0.3);
        tl.slots[0][0].rx = NodeId(2);
        assert!(matches!(
            simulate(&tl, &topo, 10, 1, false),
            Err(SimError::InvalidTimeline(_))
        ));
    }

    #[test]
    fn solved_pattern_agrees_and_reuse_helps() {
        let topo = validate_topology(&example_config(CASE1)).unwrap();
        let cs = derive_conflicts(&topo);
        let model = enumerate_path_models(&topo, true).remove(0);
        let sol = solve_model(&topo, &model, &cs, 30).unwrap().remove(0);
        let tl = build_timeline(&model, &sol, &cs, 30).unwrap();
        let plain = simulate(&tl, &topo, 100_000, 11, false).unwrap();
        let cmp = compare(&plain, &sol.allocation.per_node).unwrap();
        assert!(cmp.pass, "{cmp:?}");
        assert!(compare_overall(&plain, sol.com_product()).pass);
        for r in plain.per_node.values() {
            assert!(plain.all_delivered <= r.delivered);
        }
        let reuse = simulate(&tl, &topo, 100_000, 11, true).unwrap();
        for (n, r) in &reuse.per_node {
            let s = (r.rate * (1.0 - r.rate) / 1e5).sqrt().max(1e-6);
            assert!(r.rate >= plain.per_node[n].rate - 4.0 * s);
        }
    }
}
