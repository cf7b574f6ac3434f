use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CellKind, CellTemplate, SearchSpace};
use crate::error::{Error, Result};
use crate::opset::OpKind;
use crate::scalar::{softmax, Scalar};

/// Architecture logits: one vector per `(kind, edge)`, of length `|op_set|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams<T = f64> {
    slots: BTreeMap<CellKind, Vec<Vec<T>>>,
}

impl<T: Scalar> ArchParams<T> {
    /// All-zero logits for every kind in `kinds`.
    pub fn zeros(space: &SearchSpace, kinds: &[CellKind]) -> Self {
        let slots = kinds
            .iter()
            .map(|&k| {
                let t = space.template(k);
                (k, vec![vec![T::zero(); t.op_set.len()]; t.n_edges()])
            })
            .collect();
        Self { slots }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng>(space: &SearchSpace, kinds: &[CellKind], scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(space, kinds);
        for v in p.values_mut() {
            *v = T::c(if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 });
        }
        p
    }

    pub fn kinds(&self) -> impl Iterator<Item = CellKind> + '_ {
        self.slots.keys().copied()
    }

    pub fn contains(&self, kind: CellKind) -> bool {
        self.slots.contains_key(&kind)
    }

    pub fn edges(&self, kind: CellKind) -> &[Vec<T>] {
        self.slots.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge(&self, kind: CellKind, edge: usize) -> &[T] {
        &self.slots[&kind][edge]
    }

    pub fn edge_mut(&mut self, kind: CellKind, edge: usize) -> &mut Vec<T> {
        self.slots.get_mut(&kind).expect("kind present")[edge].as_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellKind, usize, &[T])> {
        self.slots
            .iter()
            .flat_map(|(&k, es)| es.iter().enumerate().map(move |(e, v)| (k, e, v.as_slice())))
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.slots.values().flatten().flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.slots.values_mut().flatten().flatten()
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.values().copied().collect()
    }

    /// Overwrites all logits, in `to_flat` order.
    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.len(), "flat length mismatch");
        for (d, s) in self.values_mut().zip(flat) {
            *d = *s;
        }
    }

    /// Same layout, every logit zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.values_mut().for_each(|v| *v = T::zero());
        z
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|((k1, a), (k2, b))| {
                k1 == k2 && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
            })
    }

    pub fn sq_distance(&self, other: &Self) -> T {
        self.values()
            .zip(other.values())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
    }

    pub fn cast<U: Scalar>(&self) -> ArchParams<U> {
        ArchParams {
            slots: self
                .slots
                .iter()
                .map(|(&k, es)| {
                    let es = es
                        .iter()
                        .map(|v| v.iter().map(|x| U::c(x.to_f64().unwrap())).collect())
                        .collect();
                    (k, es)
                })
                .collect(),
        }
    }

    /// Checks that every kind/edge matches the templates of `space`.
    pub fn check_layout(&self, space: &SearchSpace) -> Result<()> {
        for (&k, es) in &self.slots {
            let t = space.template(k);
            if es.len() != t.n_edges() || es.iter().any(|v| v.len() != t.op_set.len()) {
                return Err(Error::Config(format!(
                    "architecture logits for `{k}` do not match a {}-node template with {} ops",
                    t.n_nodes,
                    t.op_set.len()
                )));
            }
        }
        Ok(())
    }
}

/// Largest softmax weight among non-zero operations of one edge.
pub fn edge_strength<T: Scalar>(logits: &[T], zero_index: Option<usize>) -> T {
    softmax(logits)
        .into_iter()
        .enumerate()
        .filter(|&(o, _)| Some(o) != zero_index)
        .map(|(_, w)| w)
        .fold(T::neg_infinity(), T::max)
}

/// Indices of the `keep` strongest predecessors of node `j` (sorted by index).
pub(crate) fn top_predecessors<T: Scalar>(t: &CellTemplate, logits: &[Vec<T>], j: usize) -> Vec<usize> {
    let zero = t.zero_index();
    let mut cands: Vec<(usize, T)> = (0..j)
        .map(|i| {
            let e = t.edge_index(i, j).expect("edge exists");
            (i, edge_strength(&logits[e], zero))
        })
        .collect();
    // Stable sort keeps the smaller predecessor first on ties.
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep: Vec<usize> = cands.into_iter().take(t.keep(j)).map(|(i, _)| i).collect();
    keep.sort_unstable();
    keep
}

/// Index of the largest non-zero logit; ties go to the smaller index.
pub(crate) fn best_nonzero_op<T: Scalar>(logits: &[T], zero_index: Option<usize>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (o, &v) in logits.iter().enumerate() {
        if Some(o) == zero_index {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((o, v));
        }
    }
    best.expect("template has a non-zero op").0
}

/// Discretizes logits: the two strongest predecessors per intermediate node,
/// then the best non-zero operation on each kept edge.
pub fn derive_discrete<T: Scalar>(theta: &ArchParams<T>, space: &SearchSpace) -> DiscreteArch {
    let mut cells = BTreeMap::new();
    for kind in theta.kinds() {
        let t = space.template(kind);
        let logits = theta.edges(kind);
        let nodes = t
            .intermediates()
            .map(|j| {
                let inputs = top_predecessors(t, logits, j)
                    .into_iter()
                    .map(|i| {
                        let e = t.edge_index(i, j).unwrap();
                        let o = best_nonzero_op(&logits[e], t.zero_index());
                        EdgeChoice { from: i, op: t.op_set[o] }
                    })
                    .collect();
                NodeGenotype { node: j, inputs }
            })
            .collect();
        cells.insert(kind, CellGenotype { nodes });
    }
    DiscreteArch { cells }
}

pub const ARCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeChoice {
    pub from: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGenotype {
    pub node: usize,
    pub inputs: Vec<EdgeChoice>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype {
    pub nodes: Vec<NodeGenotype>,
}

/// A derived architecture: for every cell kind, the chosen predecessors and
/// operation of each intermediate node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiscreteArch {
    pub cells: BTreeMap<CellKind, CellGenotype>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDocument {
    schema_version: u32,
    cells: BTreeMap<CellKind, CellGenotype>,
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

impl DiscreteArch {
    /// Structural checks that hold for any architecture.
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(schema("cells", "no cell kinds"));
        }
        for (kind, cell) in &self.cells {
            let conn = *kind == CellKind::Connection;
            let first = if conn { 1 } else { 2 };
            let base = format!("cells.{kind}.nodes");
            if cell.nodes.is_empty() {
                return Err(schema(&base, "cell has no intermediate nodes"));
            }
            for (n, node) in cell.nodes.iter().enumerate() {
                let path = format!("{base}[{n}]");
                if node.node != first + n {
                    return Err(schema(
                        format!("{path}.node"),
                        format!("expected node {}, found {}", first + n, node.node),
                    ));
                }
                let want = node.node.min(2);
                if node.inputs.len() != want {
                    return Err(schema(
                        format!("{path}.inputs"),
                        format!("expected {want} predecessors, found {}", node.inputs.len()),
                    ));
                }
                for (e, edge) in node.inputs.iter().enumerate() {
                    let p = format!("{path}.inputs[{e}]");
                    if edge.from >= node.node {
                        return Err(schema(format!("{p}.from"), "predecessor must precede the node"));
                    }
                    if e > 0 && node.inputs[e - 1].from >= edge.from {
                        return Err(schema(format!("{p}.from"), "predecessors must be strictly increasing"));
                    }
                    if edge.op == OpKind::Zero {
                        return Err(schema(format!("{p}.op"), "zero is never a chosen operation"));
                    }
                    if edge.op.is_connection() != conn {
                        return Err(schema(
                            format!("{p}.op"),
                            format!("`{}` not valid in a {kind} cell", edge.op),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks that this architecture fits the templates of `space` and
    /// covers exactly `kinds`.
    pub fn validate_for(&self, space: &SearchSpace, kinds: &[CellKind]) -> Result<()> {
        self.validate()?;
        let have: Vec<CellKind> = self.cells.keys().copied().collect();
        if have != kinds {
            return Err(schema(
                "cells",
                format!(
                    "expected kinds [{}], found [{}]",
                    join(kinds.iter()),
                    join(have.iter())
                ),
            ));
        }
        for (kind, cell) in &self.cells {
            let t = space.template(*kind);
            if cell.nodes.len() != t.n_intermediates() {
                return Err(schema(
                    format!("cells.{kind}.nodes"),
                    format!("expected {} intermediate nodes, found {}", t.n_intermediates(), cell.nodes.len()),
                ));
            }
            for (n, node) in cell.nodes.iter().enumerate() {
                for (e, edge) in node.inputs.iter().enumerate() {
                    if t.op_index(edge.op).is_none() {
                        return Err(schema(
                            format!("cells.{kind}.nodes[{n}].inputs[{e}].op"),
                            format!("`{}` is not in the search space", edge.op),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let doc = ArchDocument {
            schema_version: ARCH_SCHEMA_VERSION,
            cells: self.cells.clone(),
        };
        let value = serde_json::to_value(&doc).expect("arch serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| schema("$", format!("malformed JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == ARCH_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(schema("schema_version", format!("unsupported version {v}"))),
            None => return Err(schema("schema_version", "missing or not an integer")),
        }
        let doc: ArchDocument =
            serde_json::from_value(value).map_err(|e| schema("$", e.to_string()))?;
        let arch = DiscreteArch { cells: doc.cells };
        arch.validate()?;
        Ok(arch)
    }

    /// Short content hash of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Graphviz rendering, one cluster per cell kind. Operation edges carry a
    /// `label`; the dashed edges into the output node do not.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph arch {\n  rankdir=LR;\n  node [shape=box];\n");
        for (kind, cell) in &self.cells {
            let conn = *kind == CellKind::Connection;
            let name = |i: usize| -> String {
                match (conn, i) {
                    (true, 0) => "c_{in}".into(),
                    (false, 0) => "c_{k-2}".into(),
                    (false, 1) => "c_{k-1}".into(),
                    _ => (i - if conn { 1 } else { 2 }).to_string(),
                }
            };
            let id = |label: &str| format!("\"{kind}/{label}\"");
            let out = if conn { "c_{out}" } else { "c_{k}" };
            let _ = writeln!(s, "  subgraph \"cluster_{kind}\" {{\n    label=\"{kind}\";");
            let n_inputs = if conn { 1 } else { 2 };
            for i in 0..n_inputs {
                let _ = writeln!(s, "    {} [label=\"{}\", style=filled];", id(&name(i)), name(i));
            }
            for node in &cell.nodes {
                let _ = writeln!(s, "    {} [label=\"{}\"];", id(&name(node.node)), name(node.node));
            }
            let _ = writeln!(s, "    {} [label=\"{out}\", style=filled];", id(out));
            for node in &cell.nodes {
                for e in &node.inputs {
                    let _ = writeln!(
                        s,
                        "    {} -> {} [label=\"{}\"];",
                        id(&name(e.from)),
                        id(&name(node.node)),
                        e.op
                    );
                }
            }
            for node in &cell.nodes {
                let _ = writeln!(s, "    {} -> {} [style=dashed];", id(&name(node.node)), id(out));
            }
            s.push_str("  }\n");
        }
        s.push_str("}\n");
        s
    }

    /// Logits that select this architecture: `magnitude` on each chosen
    /// operation, and on `Zero` for every edge that was not chosen. Fails when
    /// the template cannot express a dropped edge.
    pub fn saturated_logits<T: Scalar>(&self, space: &SearchSpace, magnitude: f64) -> Result<ArchParams<T>> {
        let kinds: Vec<CellKind> = self.cells.keys().copied().collect();
        self.validate_for(space, &kinds)?;
        let mut theta = ArchParams::<T>::zeros(space, &kinds);
        for (&kind, cell) in &self.cells {
            let t = space.template(kind);
            for node in &cell.nodes {
                for i in 0..node.node {
                    let e = t.edge_index(i, node.node).unwrap();
                    let chosen = node.inputs.iter().find(|c| c.from == i);
                    let slot = match (chosen, t.zero_index()) {
                        (Some(c), _) => t.op_index(c.op).unwrap(),
                        (None, Some(z)) => z,
                        // a dropped edge is weaker only if its softmax can be flatter
                        (None, None) if t.op_set.len() == 1 => {
                            return Err(Error::Config(format!(
                                "the {kind} op set has one operation and no zero, so logits cannot drop an edge"
                            )))
                        }
                        (None, None) => continue,
                    };
                    theta.edge_mut(kind, e)[slot] = T::c(magnitude);
                }
            }
        }
        Ok(theta)
    }
}

fn join<'a>(it: impl Iterator<Item = &'a CellKind>) -> String {
    it.map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
}
