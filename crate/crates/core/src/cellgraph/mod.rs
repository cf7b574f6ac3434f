//! Cell templates, architecture encodings and the stacked network.

mod arch;
mod network;

pub use arch::{
    derive_discrete, edge_strength, ArchParams, CellGenotype, DiscreteArch, EdgeChoice, NodeGenotype,
    ARCH_SCHEMA_VERSION,
};
pub(crate) use arch::top_predecessors;
pub use network::{
    mixed_edge_forward, BuiltCell, BuiltEdge, CellSpec, MixWeights, Network, NetworkPlan,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opset::{OpKind, CELL_OPS, CONNECTION_OPS};

/// Which architecture slice a cell reads. All cells of one kind share logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CellKind {
    Normal(usize),
    Reduction,
    Connection,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellKind::Normal(level) => write!(f, "normal_{level}"),
            CellKind::Reduction => f.write_str("reduction"),
            CellKind::Connection => f.write_str("connection"),
        }
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduction" => Ok(CellKind::Reduction),
            "connection" => Ok(CellKind::Connection),
            _ => s
                .strip_prefix("normal_")
                .and_then(|l| l.parse().ok())
                .map(CellKind::Normal)
                .ok_or_else(|| Error::Config(format!("unknown cell kind `{s}`"))),
        }
    }
}

impl From<CellKind> for String {
    fn from(k: CellKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for CellKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// DAG shape of one cell: input nodes, intermediates, one output node that
/// concatenates the intermediates, and a candidate edge `(i, j)` for every
/// `i < j` with `j` intermediate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub n_nodes: usize,
    pub n_inputs: usize,
    pub op_set: Vec<OpKind>,
}

impl CellTemplate {
    pub fn cell(n_nodes: usize, op_set: Vec<OpKind>) -> Result<Self> {
        let t = Self { n_nodes, n_inputs: 2, op_set };
        t.validate()?;
        Ok(t)
    }

    pub fn connection(op_set: Vec<OpKind>) -> Result<Self> {
        let t = Self { n_nodes: 3, n_inputs: 1, op_set };
        t.validate()?;
        Ok(t)
    }

    pub fn default_cell() -> Self {
        Self::cell(7, CELL_OPS.to_vec()).unwrap()
    }

    pub fn default_connection() -> Self {
        Self::connection(CONNECTION_OPS.to_vec()).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < self.n_inputs + 2 {
            return Err(Error::Config(format!(
                "a cell with {} input node(s) needs at least {} nodes, got {}",
                self.n_inputs,
                self.n_inputs + 2,
                self.n_nodes
            )));
        }
        if self.op_set.is_empty() {
            return Err(Error::Config("empty operation set".into()));
        }
        let mut seen = self.op_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.op_set.len() {
            return Err(Error::Config("duplicate operation in set".into()));
        }
        let conn = self.n_inputs == 1;
        if let Some(bad) = self.op_set.iter().find(|k| k.is_connection() != conn) {
            return Err(Error::Config(format!(
                "operation `{bad}` not allowed in a {} template",
                if conn { "connection" } else { "cell" }
            )));
        }
        if self.op_set.iter().all(|&k| k == OpKind::Zero) {
            return Err(Error::Config("operation set needs a non-zero operation".into()));
        }
        Ok(())
    }

    pub fn intermediates(&self) -> std::ops::Range<usize> {
        self.n_inputs..self.n_nodes - 1
    }

    pub fn n_intermediates(&self) -> usize {
        self.n_nodes - 1 - self.n_inputs
    }

    /// Candidate edges ordered by target node, then source node.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.intermediates()
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges().iter().position(|&e| e == (from, to))
    }

    pub fn zero_index(&self) -> Option<usize> {
        self.op_set.iter().position(|&k| k == OpKind::Zero)
    }

    pub fn op_index(&self, kind: OpKind) -> Option<usize> {
        self.op_set.iter().position(|&k| k == kind)
    }

    /// Number of predecessors kept for intermediate node `j` at derivation.
    pub fn keep(&self, j: usize) -> usize {
        j.min(2)
    }
}

/// Templates for every cell kind of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub cell: CellTemplate,
    pub connection: CellTemplate,
}

impl SearchSpace {
    pub fn template(&self, kind: CellKind) -> &CellTemplate {
        match kind {
            CellKind::Connection => &self.connection,
            _ => &self.cell,
        }
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            cell: CellTemplate::default_cell(),
            connection: CellTemplate::default_connection(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_shape() {
        let t = CellTemplate::default_cell();
        assert_eq!(t.n_nodes, 7);
        assert_eq!(t.intermediates(), 2..6);
        assert_eq!(t.n_edges(), 14);
        assert_eq!(t.edges()[0], (0, 2));
        assert_eq!(t.edge_index(3, 5), Some(2 + 3 + 4 + 3));
        assert_eq!(t.zero_index(), Some(0));
        let c = CellTemplate::default_connection();
        assert_eq!(c.edges(), vec![(0, 1)]);
        assert_eq!(c.keep(1), 1);
        assert_eq!(c.zero_index(), None);
    }

    #[test]
    fn template_validation() {
        assert!(CellTemplate::cell(3, CELL_OPS.to_vec()).is_err());
        assert!(CellTemplate::cell(4, vec![OpKind::Zero]).is_err());
        assert!(CellTemplate::cell(4, vec![OpKind::DilConv3]).is_err());
        assert!(CellTemplate::connection(vec![OpKind::Zero]).is_err());
        assert!(CellTemplate::cell(4, vec![OpKind::Identity, OpKind::Identity]).is_err());
    }

    #[test]
    fn kind_names() {
        for k in [CellKind::Normal(2), CellKind::Reduction, CellKind::Connection] {
            assert_eq!(k.to_string().parse::<CellKind>().unwrap(), k);
        }
        assert!("normal_x".parse::<CellKind>().is_err());
        assert!(CellKind::Normal(5) < CellKind::Reduction);
    }
}
