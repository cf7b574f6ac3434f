//! Expected and exact resource cost of architectures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cellgraph::{top_predecessors, ArchParams, CellKind, DiscreteArch, NetworkPlan, SearchSpace};
use crate::error::{Error, Result};
use crate::opset::{self, OpContext, OpKind};
use crate::scalar::{softmax, Scalar};

/// Number of cost metrics.
pub const M: usize = 2;
pub const METRICS: [&str; M] = ["params", "flops"];

/// Costs of every candidate operation on one edge of one cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostEntry {
    pub cell: usize,
    pub kind: CellKind,
    /// Edge index within the kind's template (selects the logits).
    pub slot: usize,
    /// `u[o][m]`: cost of operation `o` under metric `m`.
    pub u: Vec<[u64; M]>,
}

/// Per-edge cost vectors for a whole network plan, plus the fixed stem and
/// classifier costs. Built from shapes only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostTable {
    pub fixed: [u64; M],
    pub entries: Vec<CostEntry>,
}

fn op_costs(ops: &[OpKind], ctx: &OpContext) -> Vec<[u64; M]> {
    ops.iter()
        .map(|&k| [opset::param_count(k, ctx), opset::flop_count(k, ctx)])
        .collect()
}

impl CostTable {
    pub fn new(plan: &NetworkPlan) -> Result<Self> {
        plan.validate()?;
        let space = plan.space()?;
        let mut entries = Vec::new();
        for spec in plan.layout() {
            for input in 0..2 {
                entries.push(CostEntry {
                    cell: spec.index,
                    kind: CellKind::Connection,
                    slot: 0,
                    u: op_costs(&space.connection.op_set, &spec.connection_context(input)),
                });
            }
            for (slot, (from, _)) in space.cell.edges().into_iter().enumerate() {
                entries.push(CostEntry {
                    cell: spec.index,
                    kind: spec.kind,
                    slot,
                    u: op_costs(&space.cell.op_set, &spec.edge_context(from)),
                });
            }
        }
        Ok(Self {
            fixed: plan.fixed_costs(),
            entries,
        })
    }

    /// Hex digest of the table contents.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("table serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Cost of a discrete architecture, summed over every materialized edge.
    pub fn exact(&self, arch: &DiscreteArch, space: &SearchSpace) -> Result<[u64; M]> {
        let mut total = self.fixed;
        for e in &self.entries {
            let cell = arch
                .cells
                .get(&e.kind)
                .ok_or_else(|| Error::Config(format!("architecture has no `{}` cell", e.kind)))?;
            let t = space.template(e.kind);
            let (from, to) = t.edges()[e.slot];
            let node = &cell.nodes[to - t.n_inputs];
            if let Some(choice) = node.inputs.iter().find(|c| c.from == from) {
                let o = t.op_index(choice.op).ok_or_else(|| {
                    Error::Config(format!("`{}` is not in the {} op set", choice.op, e.kind))
                })?;
                for m in 0..M {
                    total[m] += e.u[o][m];
                }
            }
        }
        Ok(total)
    }

    /// Smallest and largest per-edge cost summed over all edges; bounds any
    /// full-DAG expected cost.
    pub fn full_dag_range(&self) -> ([u64; M], [u64; M]) {
        let (mut lo, mut hi) = (self.fixed, self.fixed);
        for e in &self.entries {
            for m in 0..M {
                lo[m] += e.u.iter().map(|u| u[m]).min().unwrap_or(0);
                hi[m] += e.u.iter().map(|u| u[m]).max().unwrap_or(0);
            }
        }
        (lo, hi)
    }
}

/// Cost of the discrete architecture `arch` instantiated with `plan`.
pub fn exact_cost(arch: &DiscreteArch, plan: &NetworkPlan) -> Result<[u64; M]> {
    let space = plan.space()?;
    arch.validate_for(&space, &plan.kinds())?;
    CostTable::new(plan)?.exact(arch, &space)
}

/// Which edges enter the expected cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostScope {
    FullDag,
    #[default]
    TopK,
}

impl std::str::FromStr for CostScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fulldag" => Ok(CostScope::FullDag),
            "topk" => Ok(CostScope::TopK),
            _ => Err(Error::Config(format!("unknown scope `{s}` (expected topk or fulldag)"))),
        }
    }
}

/// Edge mask resolved from a scope: `active[kind][slot]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeMask {
    active: BTreeMap<CellKind, Vec<bool>>,
}

impl ScopeMask {
    /// Resolves `scope` at the current logits. Under `TopK` each node keeps
    /// its strongest predecessors; the mask is then held fixed by callers.
    pub fn resolve<T: Scalar>(scope: CostScope, theta: &ArchParams<T>, space: &SearchSpace) -> Result<Self> {
        let mut active = BTreeMap::new();
        for kind in theta.kinds() {
            let t = space.template(kind);
            let mut mask = vec![scope == CostScope::FullDag; t.n_edges()];
            if scope == CostScope::TopK {
                let logits = theta.edges(kind);
                if logits.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "edge strengths of `{kind}` are undefined for non-finite logits"
                    )));
                }
                for j in t.intermediates() {
                    for i in top_predecessors(t, logits, j) {
                        mask[t.edge_index(i, j).unwrap()] = true;
                    }
                }
            }
            active.insert(kind, mask);
        }
        Ok(Self { active })
    }

    pub fn is_active(&self, kind: CellKind, slot: usize) -> bool {
        self.active.get(&kind).and_then(|v| v.get(slot)).copied().unwrap_or(false)
    }
}

fn to_t<T: Scalar>(u: u64) -> T {
    T::c(u as f64)
}

fn check_entry<T: Scalar>(theta: &ArchParams<T>, e: &CostEntry) -> Result<()> {
    if !theta.contains(e.kind) || e.slot >= theta.edges(e.kind).len() {
        return Err(Error::Config(format!("logits missing for {} edge {}", e.kind, e.slot)));
    }
    if theta.edge(e.kind, e.slot).len() != e.u.len() {
        return Err(Error::Config(format!(
            "{} edge {}: {} logits for {} cost rows",
            e.kind,
            e.slot,
            theta.edge(e.kind, e.slot).len(),
            e.u.len()
        )));
    }
    Ok(())
}

/// `Phi^m = fixed^m + sum over in-scope edges of u^m . softmax(theta_edge)`.
pub fn expected_cost_masked<T: Scalar>(theta: &ArchParams<T>, table: &CostTable, mask: &ScopeMask) -> Result<[T; M]> {
    let mut phi = table.fixed.map(to_t::<T>);
    for e in &table.entries {
        if !mask.is_active(e.kind, e.slot) {
            continue;
        }
        check_entry(theta, e)?;
        let f = softmax(theta.edge(e.kind, e.slot));
        for (m, p) in phi.iter_mut().enumerate() {
            *p += f.iter().zip(&e.u).fold(T::zero(), |acc, (&w, u)| acc + w * to_t::<T>(u[m]));
        }
    }
    Ok(phi)
}

/// Expected cost with the scope resolved at `theta` itself.
pub fn expected_cost<T: Scalar>(theta: &ArchParams<T>, table: &CostTable, space: &SearchSpace, scope: CostScope) -> Result<[T; M]> {
    let mask = ScopeMask::resolve(scope, theta, space)?;
    expected_cost_masked(theta, table, &mask)
}

/// `sum_m weights[m] * dPhi^m/dtheta` with the mask held fixed. Per edge,
/// `dPhi/dtheta_o = F_o (u_o - u . F)`.
pub fn cost_vjp<T: Scalar>(theta: &ArchParams<T>, table: &CostTable, mask: &ScopeMask, weights: [T; M]) -> Result<ArchParams<T>> {
    let mut grad = theta.zeros_like();
    for e in &table.entries {
        if !mask.is_active(e.kind, e.slot) {
            continue;
        }
        check_entry(theta, e)?;
        let f = softmax(theta.edge(e.kind, e.slot));
        let u: Vec<T> = e
            .u
            .iter()
            .map(|row| (0..M).fold(T::zero(), |acc, m| acc + weights[m] * to_t::<T>(row[m])))
            .collect();
        let mean = f.iter().zip(&u).fold(T::zero(), |acc, (&w, &c)| acc + w * c);
        for ((g, &fo), &uo) in grad.edge_mut(e.kind, e.slot).iter_mut().zip(&f).zip(&u) {
            *g += fo * (uo - mean);
        }
    }
    Ok(grad)
}

/// Gradient of each metric separately, scope resolved at `theta`.
pub fn cost_gradient<T: Scalar>(theta: &ArchParams<T>, table: &CostTable, space: &SearchSpace, scope: CostScope) -> Result<[ArchParams<T>; M]> {
    let mask = ScopeMask::resolve(scope, theta, space)?;
    let mut out = Vec::with_capacity(M);
    for m in 0..M {
        let mut w = [T::zero(); M];
        w[m] = T::one();
        out.push(cost_vjp(theta, table, &mask, w)?);
    }
    Ok(out.try_into().expect("M gradients"))
}

/// Lower and upper bounds per metric. An infinite upper bound is written as
/// `null` in JSON.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintBox {
    pub lower: [f64; M],
    pub upper: [f64; M],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxDoc {
    lower: [Option<f64>; M],
    upper: [Option<f64>; M],
}

impl Serialize for ConstraintBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let enc = |v: f64| v.is_finite().then_some(v);
        BoxDoc {
            lower: self.lower.map(Some),
            upper: self.upper.map(enc),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConstraintBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = BoxDoc::deserialize(d)?;
        Ok(Self {
            lower: doc.lower.map(|v| v.unwrap_or(0.0)),
            upper: doc.upper.map(|v| v.unwrap_or(f64::INFINITY)),
        })
    }
}

impl Default for ConstraintBox {
    fn default() -> Self {
        Self::unbounded()
    }
}

impl ConstraintBox {
    pub fn new(lower: [f64; M], upper: [f64; M]) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[0, inf)` on every metric.
    pub fn unbounded() -> Self {
        Self {
            lower: [0.0; M],
            upper: [f64::INFINITY; M],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in 0..M {
            let (l, h) = (self.lower[m], self.upper[m]);
            if !(l >= 0.0 && l.is_finite() && h >= l) {
                return Err(Error::Config(format!(
                    "constraints.{}: need 0 <= lower <= upper, got [{l}, {h}]",
                    METRICS[m]
                )));
            }
        }
        Ok(())
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|&l| l == 0.0) && self.upper.iter().all(|h| h.is_infinite())
    }

    /// Componentwise `(max(C_L - phi, 0), max(phi - C_H, 0))`.
    pub fn violation<T: Scalar>(&self, phi: &[T; M]) -> ([T; M], [T; M]) {
        let mut lo = [T::zero(); M];
        let mut hi = [T::zero(); M];
        for m in 0..M {
            lo[m] = (T::c(self.lower[m]) - phi[m]).max(T::zero());
            if self.upper[m].is_finite() {
                hi[m] = (phi[m] - T::c(self.upper[m])).max(T::zero());
            }
        }
        (lo, hi)
    }

    /// Inside the box up to a relative slack `eps` on each bound.
    pub fn is_feasible<T: Scalar>(&self, phi: &[T; M], eps: f64) -> bool {
        (0..M).all(|m| {
            let p = phi[m].to_f64().unwrap_or(f64::NAN);
            let (l, h) = (self.lower[m], self.upper[m]);
            p >= l - eps * l.abs() && (h.is_infinite() || p <= h + eps * h.abs())
        })
    }
}

/// Free-function form of [`ConstraintBox::violation`].
pub fn violation<T: Scalar>(phi: &[T; M], b: &ConstraintBox) -> ([T; M], [T; M]) {
    b.violation(phi)
}

/// CSV with one row per metric: expected, exact, bounds and violation.
pub fn cost_report_csv(phi: Option<[f64; M]>, exact: Option<[u64; M]>, b: &ConstraintBox) -> String {
    let mut s = String::from("metric,expected,exact,c_low,c_high,violation\n");
    let (lo, hi) = match phi {
        Some(p) => b.violation(&p),
        None => ([0.0; M], [0.0; M]),
    };
    let exact_viol = exact.map(|e| b.violation(&e.map(|v| v as f64)));
    for m in 0..M {
        let expected = phi.map(|p| p[m].to_string()).unwrap_or_default();
        let ex = exact.map(|e| e[m].to_string()).unwrap_or_default();
        let viol = match (phi, exact_viol) {
            (Some(_), _) => lo[m] + hi[m],
            (None, Some((l, h))) => l[m] + h[m],
            (None, None) => 0.0,
        };
        let high = if b.upper[m].is_finite() { b.upper[m].to_string() } else { "inf".into() };
        let _ = writeln!(s, "{},{expected},{ex},{},{high},{viol}", METRICS[m], b.lower[m]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgraph::{derive_discrete, CellTemplate, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One reduction cell with a single intermediate node.
    fn single_edge_table(u: Vec<[u64; M]>) -> (ArchParams<f64>, CostTable) {
        let n = u.len();
        let ops = [OpKind::Zero, OpKind::Identity, OpKind::SepConv3, OpKind::MaxPool3];
        let space = SearchSpace {
            cell: CellTemplate::cell(4, ops[..n].to_vec()).unwrap(),
            connection: CellTemplate::default_connection(),
        };
        let theta = ArchParams::zeros(&space, &[CellKind::Reduction]);
        let table = CostTable {
            fixed: [0; M],
            entries: vec![CostEntry { cell: 0, kind: CellKind::Reduction, slot: 0, u }],
        };
        (theta, table)
    }

    fn full_mask(theta: &ArchParams<f64>) -> ScopeMask {
        let active = theta.kinds().map(|k| (k, vec![true; theta.edges(k).len()])).collect();
        ScopeMask { active }
    }

    #[test]
    fn uniform_single_edge() {
        let (theta, table) = single_edge_table(vec![[0, 0], [0, 0], [9216, 9216]]);
        let phi = expected_cost_masked(&theta, &table, &full_mask(&theta)).unwrap();
        assert!((phi[1] - 3072.0).abs() < 1e-9);
        let g = cost_vjp(&theta, &table, &full_mask(&theta), [0.0, 1.0]).unwrap();
        let d = g.edge(CellKind::Reduction, 0);
        assert!((d[2] - 2048.0).abs() < 1e-9);
        assert!((d[0] + 1024.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_oracle() {
        let (mut theta, table) = single_edge_table(vec![[0, 0], [0, 0], [9216, 9216]]);
        let mask = full_mask(&theta);
        let h = 1e-4;
        let g = cost_vjp(&theta, &table, &mask, [0.0, 1.0]).unwrap();
        for o in 0..3 {
            theta.edge_mut(CellKind::Reduction, 0)[o] += h;
            let p = expected_cost_masked(&theta, &table, &mask).unwrap()[1];
            theta.edge_mut(CellKind::Reduction, 0)[o] -= 2.0 * h;
            let q = expected_cost_masked(&theta, &table, &mask).unwrap()[1];
            theta.edge_mut(CellKind::Reduction, 0)[o] += h;
            let fd = (p - q) / (2.0 * h);
            let a = g.edge(CellKind::Reduction, 0)[o];
            assert!((a - fd).abs() / a.abs().max(1e-3) < 1e-6, "{a} vs {fd}");
        }
    }

    #[test]
    fn constant_costs_have_zero_gradient() {
        let (mut theta, table) = single_edge_table(vec![[7, 7], [7, 7], [7, 7]]);
        theta.edge_mut(CellKind::Reduction, 0).copy_from_slice(&[0.3, -1.2, 2.0]);
        let g = cost_vjp(&theta, &table, &full_mask(&theta), [1.0, 1.0]).unwrap();
        assert!(g.values().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn saturated_selects_row() {
        let (mut theta, table) = single_edge_table(vec![[0, 0], [5, 50], [9216, 9216]]);
        theta.edge_mut(CellKind::Reduction, 0).copy_from_slice(&[0.0, 40.0, 0.0]);
        let phi = expected_cost_masked(&theta, &table, &full_mask(&theta)).unwrap();
        assert!((phi[0] - 5.0).abs() / 5.0 < 1e-9);
        assert!((phi[1] - 50.0).abs() / 50.0 < 1e-9);
    }

    #[test]
    fn violation_cases() {
        let b = ConstraintBox::new([10.0, 0.0], [20.0, f64::INFINITY]).unwrap();
        assert_eq!(b.violation(&[15.0, 1e12]), ([0.0, 0.0], [0.0, 0.0]));
        assert_eq!(b.violation(&[25.0, 0.0]), ([0.0, 0.0], [5.0, 0.0]));
        assert_eq!(b.violation(&[10.0, 0.0]), ([0.0, 0.0], [0.0, 0.0]));
        assert_eq!(b.violation(&[4.0, 0.0]), ([6.0, 0.0], [0.0, 0.0]));
        assert!(b.is_feasible(&[10.0, 0.0], 1e-6));
        assert!(!b.is_feasible(&[20.1, 0.0], 1e-6));
        assert!(ConstraintBox::new([5.0, 0.0], [4.0, 1.0]).is_err());
    }

    #[test]
    fn box_json_uses_null_for_infinity() {
        let b = ConstraintBox::new([1.0, 0.0], [2.0, f64::INFINITY]).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"lower":[1.0,0.0],"upper":[2.0,null]}"#);
        let back: ConstraintBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }

    fn micro_plan() -> NetworkPlan {
        NetworkPlan {
            n_cells: 3,
            init_channels: 4,
            levels: 1,
            n_nodes: 5,
            image_size: 8,
            cell_ops: vec![OpKind::Zero, OpKind::Identity, OpKind::SepConv3, OpKind::MaxPool3],
            connection_ops: vec![OpKind::DilConv3, OpKind::GroupConv1x1G1, OpKind::GroupConv1x1G2],
            ..NetworkPlan::default()
        }
    }

    #[test]
    fn exact_cost_matches_built_network() {
        let plan = micro_plan();
        let space = plan.space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let theta = ArchParams::<f64>::random(&space, &plan.kinds(), 2.0, &mut rng);
            let arch = derive_discrete(&theta, &space);
            let net = Network::discrete(&plan, &arch, &mut rng).unwrap();
            let cost = exact_cost(&arch, &plan).unwrap();
            assert_eq!(cost[0], net.store().scalar_count() as u64);
        }
    }

    #[test]
    fn table_is_theta_free() {
        let plan = micro_plan();
        let table = CostTable::new(&plan).unwrap();
        let before = table.fingerprint();
        let space = plan.space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = ArchParams::<f64>::random(&space, &plan.kinds(), 1.0, &mut rng);
        let _ = expected_cost(&theta, &table, &space, CostScope::TopK).unwrap();
        assert_eq!(table.fingerprint(), before);
        assert_eq!(CostTable::new(&plan).unwrap().fingerprint(), before);
    }

    #[test]
    fn topk_rejects_non_finite() {
        let plan = micro_plan();
        let space = plan.space().unwrap();
        let mut theta = ArchParams::<f64>::zeros(&space, &plan.kinds());
        theta.edge_mut(CellKind::Reduction, 0)[1] = f64::NAN;
        let table = CostTable::new(&plan).unwrap();
        assert!(expected_cost(&theta, &table, &space, CostScope::TopK).is_err());
    }

    #[test]
    fn f32_matches_f64() {
        let plan = micro_plan();
        let space = plan.space().unwrap();
        let table = CostTable::new(&plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = ArchParams::<f64>::random(&space, &plan.kinds(), 1.0, &mut rng);
        let a = expected_cost(&theta, &table, &space, CostScope::FullDag).unwrap();
        let b = expected_cost(&theta.cast::<f32>(), &table, &space, CostScope::FullDag).unwrap();
        for m in 0..M {
            assert!((a[m] - b[m] as f64).abs() / a[m] < 1e-5);
        }
    }
}
