use thiserror::Error;

use crate::topology::{LinkId, NodeId};

/// Structural problems found while validating a topology description.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("cycle_slots must be at least 1")]
    ZeroCycle,
    #[error("expected exactly 3 gateways, found {0}")]
    GatewayCountNot3(usize),
    #[error("id {0} is declared more than once")]
    DuplicateId(u32),
    #[error("node {0} has generation rate 0")]
    ZeroRate(NodeId),
    #[error("link {link} references unknown endpoint {endpoint}")]
    UnknownEndpoint { link: LinkId, endpoint: u32 },
    #[error("proximity pair references unknown id {0}")]
    UnknownProximityId(u32),
    #[error("link {link} has loss rate {loss}, expected 0 < q < 1")]
    LossOutOfRange { link: LinkId, loss: f64 },
    #[error("link {0} endpoints are not declared within radio proximity")]
    LinkNotInProximity(LinkId),
    #[error("node/link graph is not a tree: {0}")]
    NotATree(String),
    #[error("no node has degree 3")]
    NoDegree3Node,
    #[error("node {node} has degree {degree}; relay nodes must have degree 2 except the central node")]
    BadDegree { node: NodeId, degree: usize },
    #[error("gateway {0} must be a leaf attached to exactly one link")]
    GatewayNotLeaf(NodeId),
}

/// Errors from the real-valued relaxation and the F/G helpers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("argument out of domain: {0}")]
    DomainError(String),
    #[error("relaxed solve did not converge (residual {residual:e})")]
    ConvergenceError { residual: f64 },
    #[error("budget {budget} cannot give every route hop a slot ({required} needed)")]
    InfeasibleBudget { budget: i64, required: i64 },
}

/// Violations found while building or checking a slot timeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("schedule needs {needed} slots but the cycle has {cycle}")]
    DoesNotFit { needed: usize, cycle: usize },
    #[error("causality violated at slot {slot}: {detail}")]
    CausalityViolation { slot: usize, detail: String },
    #[error("conflicting transmissions share slot {slot}: {detail}")]
    ConflictViolation { slot: usize, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid timeline: {0}")]
    InvalidTimeline(String),
    #[error("node sets differ between report and analytic values")]
    NodeSetMismatch,
}
