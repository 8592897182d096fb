//! Tabular output: slot tables, ranked summaries, simulation checks.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use crate::allocator::{early_pairs, PatternSolution, SlotKey};
use crate::paths::PathModel;
use crate::sim::{Comparison, NodeCheck, SimReport};
use crate::topology::{ConflictSet, LinkId, NodeId, Topology};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:.4}"),
            Cell::Text(v) => v.clone(),
            Cell::Bool(v) => v.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

macro_rules! int_cell {
    ($($t:ty),*) => {$(
        impl From<$t> for Cell {
            fn from(v: $t) -> Self {
                Cell::Int(v as i64)
            }
        }
    )*};
}
int_cell!(u8, u32, u64, usize, i64);

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Reals with four decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::csv)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Full precision.
    pub fn to_json(&self) -> Value {
        json!({ "columns": self.columns, "rows": self.rows })
    }
}

/// One column of a slot table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Column {
    pub origin: NodeId,
    pub link: LinkId,
    pub packet: Option<u32>,
    pub early: bool,
}

impl Column {
    pub fn name(&self) -> String {
        let tick = if self.early { "'" } else { "" };
        match self.packet {
            Some(k) => format!("s{tick}[{},{},{}]", self.origin, self.link, k + 1),
            None => format!("s{tick}[{},{}]", self.origin, self.link),
        }
    }

    fn key(&self) -> SlotKey {
        SlotKey {
            origin: self.origin,
            link: self.link,
            packet: self.packet.unwrap_or(0),
            early: self.early,
        }
    }
}

/// Every (origin, link) use of the model by origin then link id, with an
/// early column for pairs early-eligible in some pattern. Origins sending
/// several packets get one column per packet.
pub fn slot_columns(model: &PathModel, topology: &Topology, conflicts: &ConflictSet) -> Vec<Column> {
    let early = early_pairs(model, conflicts);
    let mut pairs: Vec<(NodeId, LinkId)> = model.groups.iter().flat_map(|g| g.pairs()).collect();
    pairs.sort();
    let mut out = Vec::new();
    for (origin, link) in pairs {
        let rate = topology.rate(origin);
        for k in 0..rate {
            let packet = (rate > 1).then_some(k);
            out.push(Column {
                origin,
                link,
                packet,
                early: false,
            });
            if early.contains(&(origin, link)) {
                out.push(Column {
                    origin,
                    link,
                    packet,
                    early: true,
                });
            }
        }
    }
    out
}

/// TUB and COM rows for each solution of one model.
pub fn slot_table(columns: &[Column], solutions: &[PatternSolution]) -> Table {
    let mut t = Table {
        columns: ["pattern", "row"]
            .iter()
            .map(|s| s.to_string())
            .chain(columns.iter().map(Column::name))
            .collect(),
        rows: Vec::new(),
    };
    for sol in solutions {
        let mut tub: Vec<Cell> = vec![sol.pattern.id.into(), "TUB".into()];
        tub.extend(
            columns
                .iter()
                .map(|c| Cell::Real(sol.tub.get(&c.key()).copied().unwrap_or(0.0))),
        );
        t.push(tub);
        let mut com: Vec<Cell> = vec![sol.pattern.id.into(), "COM".into()];
        com.extend(
            columns
                .iter()
                .map(|c| Cell::Int(sol.allocation.entries.get(&c.key()).copied().unwrap_or(0) as i64)),
        );
        t.push(com);
    }
    t
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "case",
    "cycle_slots",
    "rank",
    "model",
    "no_sep_branch",
    "pattern",
    "label",
    "tub",
    "com",
    "feasible",
];

/// Ranked solutions, one row each, tagged with a case name.
pub fn summary_rows(table: &mut Table, case: &str, ranked: &[PatternSolution]) {
    for (i, s) in ranked.iter().enumerate() {
        table.push(vec![
            case.into(),
            s.cycle_slots.into(),
            (i + 1).into(),
            s.model_name.clone().into(),
            s.no_sep_branch.0.into(),
            s.pattern.id.into(),
            s.case_label.clone().into(),
            s.tub_product.into(),
            s.com_product().into(),
            s.allocation.feasible.into(),
        ]);
    }
}

pub fn summary_table(case: &str, ranked: &[PatternSolution]) -> Table {
    let mut t = Table::new(&SUMMARY_COLUMNS);
    summary_rows(&mut t, case, ranked);
    t
}

pub fn per_node_table(sol: &PatternSolution, topology: &Topology) -> Table {
    let mut t = Table::new(&["node", "rate", "com"]);
    for (n, m) in &sol.allocation.per_node {
        t.push(vec![n.0.into(), topology.rate(*n).into(), (*m).into()]);
    }
    t
}

pub fn enumerate_table(models: &[(PathModel, usize)]) -> Table {
    let mut t = Table::new(&["model", "no_sep_branch", "type", "patterns", "x", "y", "z"]);
    for (m, patterns) in models {
        let members = |i: usize| {
            m.groups[i]
                .nodes
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        t.push(vec![
            m.name.clone().into(),
            m.no_sep_branch.0.into(),
            m.model_type.number().into(),
            (*patterns).into(),
            members(0).into(),
            members(1).into(),
            members(2).into(),
        ]);
    }
    t
}

pub fn simulation_table(report: &SimReport, cmp: &Comparison, overall: &NodeCheck) -> Table {
    let mut t = Table::new(&["node", "delivered", "empirical", "analytic", "sigma", "z", "pass"]);
    let delivered: BTreeMap<NodeId, u64> = report.per_node.iter().map(|(n, r)| (*n, r.delivered)).collect();
    for c in &cmp.nodes {
        t.push(vec![
            c.node.0.to_string().into(),
            delivered[&c.node].into(),
            c.empirical.into(),
            c.analytic.into(),
            c.sigma.into(),
            c.z.into(),
            c.pass.into(),
        ]);
    }
    t.push(vec![
        "all".into(),
        report.all_delivered.into(),
        overall.empirical.into(),
        overall.analytic.into(),
        overall.sigma.into(),
        overall.z.into(),
        overall.pass.into(),
    ]);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::solve_model;
    use crate::paths::enumerate_path_models;
    use crate::topology::tests::{example_config, CASE1};
    use crate::topology::{derive_conflicts, validate_topology};

    #[test]
    fn three_two_three_has_reference_columns() {
        let topo = validate_topology(&example_config(CASE1)).unwrap();
        let cs = derive_conflicts(&topo);
        let model = enumerate_path_models(&topo, true).remove(0);
        let cols = slot_columns(&model, &topo, &cs);
        let names: Vec<String> = cols.iter().map(Column::name).collect();
        assert_eq!(
            names,
            [
                "s[1,1]", "s'[1,1]", "s[2,1]", "s'[2,1]", "s[2,2]", "s'[2,2]", "s[3,1]", "s[3,2]", "s[3,3]", "s[4,8]",
                "s[4,9]", "s[4,10]", "s[5,6]", "s[5,7]", "s[6,7]", "s'[6,7]", "s[7,9]", "s'[7,9]", "s[7,10]",
                "s'[7,10]", "s[8,10]", "s'[8,10]"
            ]
        );
        let sols = solve_model(&topo, &model, &cs, 30).unwrap();
        let t = slot_table(&cols, &sols);
        assert_eq!(t.rows.len(), 4);
        let csv = t.to_csv();
        assert!(csv.starts_with("pattern,row,\"s[1,1]\",\"s'[1,1]\""));
        assert!(csv.lines().nth(1).unwrap().starts_with("1,TUB,5.5001,0.0000,"));
    }

    #[test]
    fn multi_packet_columns() {
        let mut cfg = example_config(CASE1);
        cfg.nodes[0].rate = 2;
        let topo = validate_topology(&cfg).unwrap();
        let cs = derive_conflicts(&topo);
        let model = enumerate_path_models(&topo, true).remove(0);
        let names: Vec<String> = slot_columns(&model, &topo, &cs).iter().map(Column::name).collect();
        assert_eq!(&names[..4], ["s[1,1,1]", "s'[1,1,1]", "s[1,1,2]", "s'[1,1,2]"]);
    }

    #[test]
    fn csv_and_json_carry_same_values() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1u32.into(), 0.123456789.into()]);
        assert_eq!(t.to_csv(), "a,b\n1,0.1235\n");
        assert_eq!(t.to_json()["rows"][0][1], json!(0.123456789));
    }
}
