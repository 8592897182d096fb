//! Real-valued relaxation of the slot-allocation problem.
//!
//! With `M = Π_i Π_{j∈route(i)} (1 - q_j^{s_ij})^{r_i}` and linear slot
//! budgets, stationarity of the Lagrangian gives every slot count in closed
//! form as `ffun(q_j, y)` for an adjunct `y` per active budget. A single
//! budget is solved by bisection on `y`; several coupled budgets by
//! coordinate-wise bisection on the dual multipliers followed by a Newton
//! polish on the active set.

// negated comparisons below also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::SolveError;
use crate::topology::{LinkId, NodeId};

const RESIDUAL_TOL: f64 = 1e-9;

fn check_loss(q: f64) -> Result<(), SolveError> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(SolveError::DomainError(format!("loss rate {q} outside (0,1)")))
    }
}

/// `G(q, x) = -q^x ln q / (1 - q^x)`: marginal log-survival per slot.
pub fn gfun(q: f64, x: f64) -> Result<f64, SolveError> {
    check_loss(q)?;
    if !(x > 0.0) {
        return Err(SolveError::DomainError(format!("slot count {x} must be positive")));
    }
    Ok(g_unchecked(q, x))
}

/// `F(q, y) = -ln(1 - y ln q) / ln q`, the inverse of `G(q, ·) = 1/y`.
pub fn ffun(q: f64, y: f64) -> Result<f64, SolveError> {
    check_loss(q)?;
    if !(y >= 0.0) {
        return Err(SolveError::DomainError(format!("adjunct {y} must be non-negative")));
    }
    Ok(f_unchecked(q, y))
}

pub(crate) fn g_unchecked(q: f64, x: f64) -> f64 {
    let lq = q.ln();
    -lq / (-x * lq).exp_m1()
}

pub(crate) fn f_unchecked(q: f64, y: f64) -> f64 {
    let lq = q.ln();
    -(-y * lq).ln_1p() / lq
}

/// `ln(1 - q^s)`; `-inf` at `s = 0`.
pub fn ln_survive(q: f64, s: f64) -> f64 {
    (-(s * q.ln()).exp()).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainOrigin {
    pub node: NodeId,
    pub rate: u32,
    /// Links toward the gateway with their loss rates.
    pub route: Vec<(LinkId, f64)>,
}

/// Origins draining through one shared path (or in-tree) under one budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupChain {
    /// Most-upstream first.
    pub origins: Vec<ChainOrigin>,
    pub budget: f64,
}

impl GroupChain {
    /// Routes must form an in-tree: once two routes share a link they share
    /// everything after it, and a link has one loss rate everywhere.
    pub fn validate(&self) -> Result<(), SolveError> {
        let mut next: BTreeMap<LinkId, Option<LinkId>> = BTreeMap::new();
        let mut loss: BTreeMap<LinkId, f64> = BTreeMap::new();
        for o in &self.origins {
            if o.rate == 0 || o.route.is_empty() {
                return Err(SolveError::DomainError(format!(
                    "origin {} has no rate or route",
                    o.node
                )));
            }
            for (i, &(link, q)) in o.route.iter().enumerate() {
                check_loss(q)?;
                if *loss.entry(link).or_insert(q) != q {
                    return Err(SolveError::DomainError(format!("link {link} has two loss rates")));
                }
                let succ = o.route.get(i + 1).map(|p| p.0);
                if *next.entry(link).or_insert(succ) != succ {
                    return Err(SolveError::DomainError(format!("routes diverge after link {link}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-link coefficient of the budget equation: Σ r_i over origins using it.
pub fn budget_terms(chain: &GroupChain) -> Vec<(LinkId, u32)> {
    let mut terms: BTreeMap<LinkId, u32> = BTreeMap::new();
    for o in &chain.origins {
        for &(link, _) in &o.route {
            *terms.entry(link).or_default() += o.rate;
        }
    }
    terms.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxedSolution {
    /// `s_{i,j}` per (origin, link), identical across an origin's packets.
    pub slots: BTreeMap<(NodeId, LinkId), f64>,
    pub adjunct: f64,
    pub tub_product: f64,
    pub residual: f64,
}

/// Find the largest-precision `y` in `[lo, hi]` with `f(y) = 0` for an increasing `f`.
fn bisect_increasing(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    for _ in 0..2000 {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(hi).abs() < f(lo).abs() {
        hi
    } else {
        lo
    }
}

/// Solve one chain under its single budget.
pub fn solve_group_relaxed(chain: &GroupChain) -> Result<RelaxedSolution, SolveError> {
    chain.validate()?;
    if !(chain.budget > 0.0) {
        return Err(SolveError::DomainError(format!(
            "budget {} must be positive",
            chain.budget
        )));
    }
    let loss: BTreeMap<LinkId, f64> = chain.origins.iter().flat_map(|o| o.route.iter().copied()).collect();
    let terms: Vec<(f64, f64)> = budget_terms(chain)
        .into_iter()
        .map(|(l, c)| (loss[&l], c as f64))
        .collect();
    let excess = |y: f64| terms.iter().map(|&(q, c)| c * f_unchecked(q, y)).sum::<f64>() - chain.budget;

    // excess(0) = -budget < 0 and excess grows without bound.
    let mut hi = 1.0;
    while excess(hi) < 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(SolveError::ConvergenceError {
                residual: f64::INFINITY,
            });
        }
    }
    let y = bisect_increasing(0.0, hi, excess);
    let residual = excess(y).abs();
    if residual > RESIDUAL_TOL {
        return Err(SolveError::ConvergenceError { residual });
    }

    let mut slots = BTreeMap::new();
    let mut log_m = 0.0;
    for o in &chain.origins {
        for &(link, q) in &o.route {
            let s = f_unchecked(q, y);
            slots.insert((o.node, link), s);
            log_m += o.rate as f64 * ln_survive(q, s);
        }
    }
    Ok(RelaxedSolution {
        slots,
        adjunct: y,
        tub_product: log_m.exp(),
        residual,
    })
}

/// One relaxed slot count with its loss and weight (packets per cycle).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramVar {
    pub origin: NodeId,
    pub link: LinkId,
    pub loss: f64,
    pub weight: f64,
}

/// `Σ_{v ∈ members} weight_v · s_v ≤ budget`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramConstraint {
    pub label: String,
    pub members: Vec<usize>,
    pub budget: f64,
}

/// Separable concave program `max Σ w ln(1 - q^s)` under several budgets.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RelaxedProgram {
    pub vars: Vec<ProgramVar>,
    pub constraints: Vec<ProgramConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramSolution {
    pub values: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// Slack per constraint (`budget - usage`), non-negative up to tolerance.
    pub slack: Vec<f64>,
    pub log_objective: f64,
}

impl ProgramSolution {
    pub fn product(&self) -> f64 {
        self.log_objective.exp()
    }
}

impl RelaxedProgram {
    pub fn add_var(&mut self, origin: NodeId, link: LinkId, loss: f64, weight: f64) -> usize {
        self.vars.push(ProgramVar {
            origin,
            link,
            loss,
            weight,
        });
        self.vars.len() - 1
    }

    pub fn add_constraint(&mut self, label: impl Into<String>, members: Vec<usize>, budget: f64) {
        self.constraints.push(ProgramConstraint {
            label: label.into(),
            members,
            budget,
        });
    }

    fn memberships(&self) -> Vec<Vec<usize>> {
        let mut by_var = vec![Vec::new(); self.vars.len()];
        for (k, c) in self.constraints.iter().enumerate() {
            for &v in &c.members {
                by_var[v].push(k);
            }
        }
        by_var
    }

    fn values_at(&self, lambda: &[f64], by_var: &[Vec<usize>]) -> Vec<f64> {
        self.vars
            .iter()
            .zip(by_var)
            .map(|(v, ks)| {
                let mu: f64 = ks.iter().map(|&k| lambda[k]).sum();
                if mu > 0.0 {
                    f_unchecked(v.loss, 1.0 / mu)
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    fn slack_of(&self, k: usize, values: &[f64]) -> f64 {
        let c = &self.constraints[k];
        c.budget - c.members.iter().map(|&v| self.vars[v].weight * values[v]).sum::<f64>()
    }

    /// Maximize the program via its dual.
    pub fn solve(&self) -> Result<ProgramSolution, SolveError> {
        let by_var = self.memberships();
        for (v, ks) in by_var.iter().enumerate() {
            check_loss(self.vars[v].loss)?;
            if ks.is_empty() {
                return Err(SolveError::DomainError(format!("variable {v} is unconstrained")));
            }
        }
        for c in &self.constraints {
            if !c.members.is_empty() && !(c.budget > 0.0) {
                return Err(SolveError::InfeasibleBudget {
                    budget: c.budget.floor() as i64,
                    required: 1,
                });
            }
        }
        let m = self.constraints.len();
        let mut lambda = vec![0.0; m];

        // Gauss-Seidel on the multipliers: each step makes one budget tight
        // (or releases it when slack at zero multiplier).
        for _sweep in 0..20_000 {
            let mut change: f64 = 0.0;
            for k in 0..m {
                let old = lambda[k];
                let slack_at = |lk: f64, lambda: &mut Vec<f64>| {
                    lambda[k] = lk;
                    let vals = self.values_at(lambda, &by_var);
                    self.slack_of(k, &vals)
                };
                let mut work = lambda.clone();
                let at_zero = slack_at(0.0, &mut work);
                let new = if at_zero >= 0.0 {
                    0.0
                } else {
                    let mut hi = old.max(1e-3);
                    while slack_at(hi, &mut work) < 0.0 {
                        hi *= 2.0;
                    }
                    let lo = 0.0;
                    let mut w2 = lambda.clone();
                    bisect_increasing(lo, hi, |lk| slack_at(lk, &mut w2))
                };
                lambda[k] = new;
                let scale = old.abs().max(new.abs()).max(1e-300);
                change = change.max((new - old).abs() / scale);
            }
            if change < 1e-13 {
                break;
            }
        }

        self.newton_polish(&mut lambda, &by_var);

        let values = self.values_at(&lambda, &by_var);
        let slack: Vec<f64> = (0..m).map(|k| self.slack_of(k, &values)).collect();
        let worst = (0..m)
            .map(|k| {
                if lambda[k] > 0.0 {
                    slack[k].abs()
                } else {
                    (-slack[k]).max(0.0)
                }
            })
            .fold(0.0, f64::max);
        if !(worst <= RESIDUAL_TOL) {
            return Err(SolveError::ConvergenceError { residual: worst });
        }
        let log_objective = self
            .vars
            .iter()
            .zip(&values)
            .map(|(v, &s)| v.weight * ln_survive(v.loss, s))
            .sum();
        Ok(ProgramSolution {
            values,
            multipliers: lambda,
            slack,
            log_objective,
        })
    }

    fn newton_polish(&self, lambda: &mut [f64], by_var: &[Vec<usize>]) {
        let active: Vec<usize> = (0..lambda.len()).filter(|&k| lambda[k] > 0.0).collect();
        if active.is_empty() {
            return;
        }
        for _ in 0..30 {
            let values = self.values_at(lambda, by_var);
            let r = DVector::from_iterator(active.len(), active.iter().map(|&k| self.slack_of(k, &values)));
            if r.amax() <= 1e-13 {
                break;
            }
            // d slack_k / d lambda_l = -Σ_{v∈k∩l} w_v ds_v/dmu_v, ds/dmu = -1/(mu (mu - ln q)).
            let mut jac = DMatrix::<f64>::zeros(active.len(), active.len());
            for (v, ks) in by_var.iter().enumerate() {
                let mu: f64 = ks.iter().map(|&k| lambda[k]).sum();
                let d = self.vars[v].weight / (mu * (mu - self.vars[v].loss.ln()));
                for (a, &ka) in active.iter().enumerate() {
                    if !ks.contains(&ka) {
                        continue;
                    }
                    for (b, &kb) in active.iter().enumerate() {
                        if ks.contains(&kb) {
                            jac[(a, b)] += d;
                        }
                    }
                }
            }
            let Some(step) = jac.lu().solve(&(-&r)) else { break };
            let mut t = 1.0;
            let base: Vec<f64> = lambda.to_vec();
            loop {
                for (a, &k) in active.iter().enumerate() {
                    lambda[k] = base[k] + t * step[a];
                }
                let ok = active.iter().all(|&k| lambda[k] > 0.0);
                if ok {
                    let vals = self.values_at(lambda, by_var);
                    let rn = active
                        .iter()
                        .map(|&k| self.slack_of(k, &vals).abs())
                        .fold(0.0, f64::max);
                    if rn < r.amax() {
                        break;
                    }
                }
                t /= 2.0;
                if t < 1e-12 {
                    lambda.copy_from_slice(&base);
                    return;
                }
            }
        }
    }
}
