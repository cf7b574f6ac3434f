use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ArchParams, CellKind, CellTemplate, DiscreteArch, SearchSpace};
use crate::error::{Error, Result};
use crate::opset::{self, OpContext, OpInstance, OpKind, BN_EPS, CELL_OPS, CONNECTION_OPS};
use crate::tensor::{ConvAttrs, Graph, ParamId, ParamStore, Tensor, Var};

/// Shape of the stacked network: stem, `n_cells` cells with reductions at a
/// third and two thirds of the depth, and a pooled linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkPlan {
    pub n_cells: usize,
    pub init_channels: usize,
    /// Number of normal-cell levels with independent logits.
    pub levels: usize,
    pub n_nodes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub cell_ops: Vec<OpKind>,
    pub connection_ops: Vec<OpKind>,
}

impl Default for NetworkPlan {
    fn default() -> Self {
        Self {
            n_cells: 8,
            init_channels: 16,
            levels: 3,
            n_nodes: 7,
            in_channels: 3,
            image_size: 16,
            n_classes: 4,
            cell_ops: CELL_OPS.to_vec(),
            connection_ops: CONNECTION_OPS.to_vec(),
        }
    }
}

/// Everything needed to build or cost one cell of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub index: usize,
    pub kind: CellKind,
    pub reduction_prev: bool,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Spatial size of the previous cell's output (and of preprocessed inputs).
    pub hw_in: usize,
    pub hw_prev_prev: usize,
    /// Per-node channel count inside the cell.
    pub channels: usize,
    pub n_intermediates: usize,
}

impl CellSpec {
    pub fn is_reduction(&self) -> bool {
        self.kind == CellKind::Reduction
    }

    pub fn hw_out(&self) -> usize {
        if self.is_reduction() {
            (self.hw_in - 1) / 2 + 1
        } else {
            self.hw_in
        }
    }

    pub fn c_out(&self) -> usize {
        self.channels * self.n_intermediates
    }

    /// Context of the operations on edge `(from, _)`.
    pub fn edge_context(&self, from: usize) -> OpContext {
        let c = self.channels;
        if self.is_reduction() && from < 2 {
            OpContext::new(c, c, self.hw_in, self.hw_in, 2)
        } else {
            let hw = self.hw_out();
            OpContext::new(c, c, hw, hw, 1)
        }
    }

    /// Context of the connection cell feeding input node `input` (0 or 1).
    pub fn connection_context(&self, input: usize) -> OpContext {
        if input == 0 {
            let stride = if self.reduction_prev { 2 } else { 1 };
            OpContext::new(self.c_prev_prev, self.channels, self.hw_prev_prev, self.hw_prev_prev, stride)
        } else {
            OpContext::new(self.c_prev, self.channels, self.hw_in, self.hw_in, 1)
        }
    }
}

impl NetworkPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cells == 0 {
            return bad("plan.n_cells must be positive".into());
        }
        if self.init_channels == 0 || self.in_channels == 0 || self.image_size == 0 {
            return bad("plan channel and image sizes must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("plan.n_classes must be at least 2".into());
        }
        if self.levels == 0 {
            return bad("plan.levels must be positive".into());
        }
        self.space()?;
        for (i, spec) in self.layout().iter().enumerate() {
            let t = self.cell_template()?;
            for from in 0..t.n_nodes - 1 {
                for &k in &self.cell_ops {
                    opset::check_compatible(k, &spec.edge_context(from))
                        .map_err(|e| Error::Config(format!("cell {i}: {e}")))?;
                }
            }
            for input in 0..2 {
                for &k in &self.connection_ops {
                    opset::check_compatible(k, &spec.connection_context(input))
                        .map_err(|e| Error::Config(format!("cell {i} connection {input}: {e}")))?;
                }
            }
        }
        Ok(())
    }

    fn cell_template(&self) -> Result<CellTemplate> {
        CellTemplate::cell(self.n_nodes, self.cell_ops.clone())
    }

    pub fn space(&self) -> Result<SearchSpace> {
        Ok(SearchSpace {
            cell: self.cell_template()?,
            connection: CellTemplate::connection(self.connection_ops.clone())?,
        })
    }

    /// Cell indices holding reduction cells.
    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut r = vec![self.n_cells / 3, 2 * self.n_cells / 3];
        r.dedup();
        r
    }

    /// Kind of cell `i`; normal cells are split into `levels` contiguous
    /// groups of (nearly) equal size in depth order.
    pub fn kind_of(&self, i: usize) -> CellKind {
        let red = self.reduction_positions();
        if red.contains(&i) {
            return CellKind::Reduction;
        }
        let n_normal = self.n_cells - red.len();
        let rank = (0..i).filter(|c| !red.contains(c)).count();
        CellKind::Normal(rank * self.levels / n_normal)
    }

    /// Every kind with at least one cell, in canonical order.
    pub fn kinds(&self) -> Vec<CellKind> {
        let mut k: Vec<CellKind> = (0..self.n_cells).map(|i| self.kind_of(i)).collect();
        k.push(CellKind::Connection);
        k.sort();
        k.dedup();
        k
    }

    pub fn n_intermediates(&self) -> usize {
        self.n_nodes.saturating_sub(3)
    }

    pub fn layout(&self) -> Vec<CellSpec> {
        let n_inter = self.n_intermediates();
        let mut c = self.init_channels;
        let (mut c_pp, mut c_p) = (self.init_channels, self.init_channels);
        let (mut hw_pp, mut hw_p) = (self.image_size, self.image_size);
        let mut reduction_prev = false;
        let mut out = Vec::with_capacity(self.n_cells);
        for i in 0..self.n_cells {
            let kind = self.kind_of(i);
            if kind == CellKind::Reduction {
                c *= 2;
            }
            let spec = CellSpec {
                index: i,
                kind,
                reduction_prev,
                c_prev_prev: c_pp,
                c_prev: c_p,
                hw_in: hw_p,
                hw_prev_prev: hw_pp,
                channels: c,
                n_intermediates: n_inter,
            };
            out.push(spec);
            (c_pp, c_p) = (c_p, spec.c_out());
            (hw_pp, hw_p) = (hw_p, spec.hw_out());
            reduction_prev = spec.is_reduction();
        }
        out
    }

    /// Channels entering the classifier.
    pub fn final_channels(&self) -> usize {
        self.layout().last().map_or(self.init_channels, CellSpec::c_out)
    }

    pub fn final_hw(&self) -> usize {
        self.layout().last().map_or(self.image_size, CellSpec::hw_out)
    }

    /// Parameters and FLOPs of the stem and classifier, which do not depend
    /// on the architecture.
    pub fn fixed_costs(&self) -> [u64; 2] {
        let (ci, c, s) = (self.in_channels as u64, self.init_channels as u64, self.image_size as u64);
        let (cf, hf, k) = (self.final_channels() as u64, self.final_hw() as u64, self.n_classes as u64);
        let params = 9 * ci * c + 2 * c + cf * k + k;
        let flops = 9 * ci * c * s * s + cf * hf * hf + cf * k;
        [params, flops]
    }
}

/// Softmax weights for every `(kind, edge)`, as graph variables.
#[derive(Debug, Clone)]
pub struct MixWeights {
    pub theta: BTreeMap<CellKind, Vec<Var>>,
    pub weights: BTreeMap<CellKind, Vec<Var>>,
}

impl MixWeights {
    /// Puts the logits on `g` (as leaves) and records their softmax.
    pub fn bind(g: &mut Graph, theta: &ArchParams<f64>, requires_grad: bool) -> Self {
        let mut t = BTreeMap::new();
        let mut w = BTreeMap::new();
        for kind in theta.kinds() {
            let (tv, wv): (Vec<Var>, Vec<Var>) = theta
                .edges(kind)
                .iter()
                .map(|v| {
                    let leaf = g.leaf(Tensor::from_vec(v.clone()), requires_grad);
                    (leaf, g.softmax(leaf))
                })
                .unzip();
            t.insert(kind, tv);
            w.insert(kind, wv);
        }
        Self { theta: t, weights: w }
    }

    fn get(&self, kind: CellKind, edge: usize) -> Result<Var> {
        self.weights
            .get(&kind)
            .and_then(|v| v.get(edge))
            .copied()
            .ok_or_else(|| Error::Config(format!("no architecture logits for {kind} edge {edge}")))
    }

    /// Gradient of the last backward pass with respect to the logits, laid
    /// out like `like`. Kinds that received no gradient are zero.
    pub fn theta_grad(&self, g: &Graph, like: &ArchParams<f64>) -> ArchParams<f64> {
        let mut out = like.zeros_like();
        for (&kind, vars) in &self.theta {
            for (e, &v) in vars.iter().enumerate() {
                if let Some(gr) = g.grad(v) {
                    out.edge_mut(kind, e).copy_from_slice(gr);
                }
            }
        }
        out
    }
}

/// `sum_o softmax(theta)_o * op_o(x)` with the weights already on the tape.
pub fn mixed_edge_forward(g: &mut Graph, vars: &[Var], weights: Var, ops: &[OpInstance], x: Var) -> Result<Var> {
    if g.value(weights).numel() != ops.len() {
        return Err(Error::Shape {
            op: "mixed_edge",
            detail: format!("{} weights for {} operations", g.value(weights).numel(), ops.len()),
        });
    }
    let n = g.shape(x).first().copied().unwrap_or(0);
    let expected = ops[0].out_shape(n);
    let mut outs = Vec::with_capacity(ops.len());
    for op in ops {
        if op.out_shape(n) != expected {
            return Err(Error::Shape {
                op: "mixed_edge",
                detail: format!("{} yields {:?}, expected {expected:?}", op.kind, op.out_shape(n)),
            });
        }
        outs.push(match op.kind {
            OpKind::Zero => None,
            _ => Some(op.apply(g, vars, x)?),
        });
    }
    if outs.iter().all(Option::is_none) {
        return Ok(g.zeros(&expected));
    }
    g.weighted_sum(&outs, weights)
}

/// One edge of a built cell: all candidates in the supernet, a single
/// operation in a discrete network.
#[derive(Debug, Clone)]
pub struct BuiltEdge {
    pub from: usize,
    pub to: usize,
    /// Edge index in the cell template; selects the logits.
    pub slot: usize,
    pub ops: Vec<OpInstance>,
}

#[derive(Debug, Clone)]
pub struct BuiltCell {
    pub spec: CellSpec,
    pub pre: [BuiltEdge; 2],
    pub edges: Vec<BuiltEdge>,
}

#[derive(Debug, Clone)]
struct Stem {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Classifier {
    weight: ParamId,
    bias: ParamId,
}

/// A stacked network, either the mixed supernet or a discrete architecture.
#[derive(Debug, Clone)]
pub struct Network {
    plan: NetworkPlan,
    space: SearchSpace,
    store: ParamStore,
    stem: Stem,
    cells: Vec<BuiltCell>,
    classifier: Classifier,
    discrete: bool,
}

impl Network {
    /// Supernet with every candidate operation on every edge.
    pub fn supernet<R: Rng>(plan: &NetworkPlan, rng: &mut R) -> Result<Self> {
        plan.validate()?;
        let space = plan.space()?;
        Self::assemble(plan, space, None, rng)
    }

    /// Network holding only the operations chosen by `arch`.
    pub fn discrete<R: Rng>(plan: &NetworkPlan, arch: &DiscreteArch, rng: &mut R) -> Result<Self> {
        plan.validate()?;
        let space = plan.space()?;
        arch.validate_for(&space, &plan.kinds())?;
        Self::assemble(plan, space, Some(arch), rng)
    }

    fn assemble<R: Rng>(plan: &NetworkPlan, space: SearchSpace, arch: Option<&DiscreteArch>, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let c = plan.init_channels;
        let fan_in = (plan.in_channels * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..c * plan.in_channels * 9).map(|_| rng.gen_range(-bound..bound)).collect();
        let stem = Stem {
            conv: store.register("stem.conv.weight", Tensor::new(vec![c, plan.in_channels, 3, 3], w)?)?,
            gamma: store.register("stem.bn.gamma", Tensor::full(&[c], 1.0))?,
            beta: store.register("stem.bn.beta", Tensor::zeros(&[c]))?,
        };

        let mut cells = Vec::with_capacity(plan.n_cells);
        for spec in plan.layout() {
            let i = spec.index;
            let conn_ops = match arch {
                None => space.connection.op_set.clone(),
                Some(a) => vec![a.cells[&CellKind::Connection].nodes[0].inputs[0].op],
            };
            let mut pre = Vec::with_capacity(2);
            for input in 0..2 {
                let ctx = spec.connection_context(input);
                let prefix = format!("cell{i}.pre{input}");
                let ops = conn_ops
                    .iter()
                    .map(|&k| opset::build(k, ctx, &mut store, &prefix, rng))
                    .collect::<Result<Vec<_>>>()?;
                pre.push(BuiltEdge { from: 0, to: 1, slot: 0, ops });
            }
            let mut edges = Vec::new();
            let t = &space.cell;
            for (slot, (from, to)) in t.edges().into_iter().enumerate() {
                let kinds = match arch {
                    None => t.op_set.clone(),
                    Some(a) => {
                        let node = &a.cells[&spec.kind].nodes[to - t.n_inputs];
                        match node.inputs.iter().find(|e| e.from == from) {
                            Some(e) => vec![e.op],
                            None => continue,
                        }
                    }
                };
                let ctx = spec.edge_context(from);
                let prefix = format!("cell{i}.edge({from},{to})");
                let ops = kinds
                    .iter()
                    .map(|&k| opset::build(k, ctx, &mut store, &prefix, rng))
                    .collect::<Result<Vec<_>>>()?;
                edges.push(BuiltEdge { from, to, slot, ops });
            }
            let pre: [BuiltEdge; 2] = pre.try_into().expect("two connection cells");
            cells.push(BuiltCell { spec, pre, edges });
        }

        let (cf, k) = (plan.final_channels(), plan.n_classes);
        let bound = 1.0 / (cf as f64).sqrt();
        let w: Vec<f64> = (0..k * cf).map(|_| rng.gen_range(-bound..bound)).collect();
        let classifier = Classifier {
            weight: store.register("classifier.weight", Tensor::new(vec![k, cf], w)?)?,
            bias: store.register("classifier.bias", Tensor::zeros(&[k]))?,
        };
        Ok(Self {
            plan: plan.clone(),
            space,
            store,
            stem,
            cells,
            classifier,
            discrete: arch.is_some(),
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn cells(&self) -> &[BuiltCell] {
        &self.cells
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    /// Class logits for the images `x` of shape `(n, in_channels, s, s)`.
    /// A supernet needs `mix`; a discrete network ignores it.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], mix: Option<&MixWeights>, x: Var) -> Result<Var> {
        let cells = self.features(g, vars, mix, x)?;
        let last = *cells.last().expect("plan has cells");
        let pooled = g.global_avg_pool(last)?;
        g.linear(pooled, vars[self.classifier.weight.0], Some(vars[self.classifier.bias.0]))
    }

    /// Output of every cell, in depth order.
    pub fn features(&self, g: &mut Graph, vars: &[Var], mix: Option<&MixWeights>, x: Var) -> Result<Vec<Var>> {
        if !self.discrete && mix.is_none() {
            return Err(Error::Config("supernet forward needs mixture weights".into()));
        }
        let p = &self.plan;
        let s = p.image_size;
        let want = [p.in_channels, s, s];
        if g.shape(x).len() != 4 || g.shape(x)[1..] != want {
            return Err(Error::Shape {
                op: "network",
                detail: format!("expected (n, {}, {s}, {s}) images, got {:?}", p.in_channels, g.shape(x)),
            });
        }
        let h = g.conv2d(x, vars[self.stem.conv.0], ConvAttrs::same(3, 1, 1, 1))?;
        let stem = g.batch_norm(h, vars[self.stem.gamma.0], vars[self.stem.beta.0], BN_EPS)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut outs = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let out = self.cell_forward(g, vars, mix, cell, s0, s1)?;
            outs.push(out);
            (s0, s1) = (s1, out);
        }
        Ok(outs)
    }

    fn edge_forward(&self, g: &mut Graph, vars: &[Var], mix: Option<&MixWeights>, kind: CellKind, edge: &BuiltEdge, x: Var) -> Result<Var> {
        if self.discrete {
            edge.ops[0].apply(g, vars, x)
        } else {
            let w = mix.expect("checked in forward").get(kind, edge.slot)?;
            mixed_edge_forward(g, vars, w, &edge.ops, x)
        }
    }

    fn cell_forward(&self, g: &mut Graph, vars: &[Var], mix: Option<&MixWeights>, cell: &BuiltCell, s0: Var, s1: Var) -> Result<Var> {
        let ctx = |e: Error, what: String| match e {
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("cell {} {what}: {detail}", cell.spec.index),
            },
            other => other,
        };
        let a = self
            .edge_forward(g, vars, mix, CellKind::Connection, &cell.pre[0], s0)
            .map_err(|e| ctx(e, "connection 0".into()))?;
        let b = self
            .edge_forward(g, vars, mix, CellKind::Connection, &cell.pre[1], s1)
            .map_err(|e| ctx(e, "connection 1".into()))?;
        let t = &self.space.cell;
        let mut states = vec![a, b];
        for j in t.intermediates() {
            let mut acc: Option<Var> = None;
            for edge in cell.edges.iter().filter(|e| e.to == j) {
                let y = self
                    .edge_forward(g, vars, mix, cell.spec.kind, edge, states[edge.from])
                    .map_err(|e| ctx(e, format!("node {j} edge from {}", edge.from)))?;
                acc = Some(match acc {
                    None => y,
                    Some(prev) => g.add(prev, y).map_err(|e| ctx(e, format!("node {j}")))?,
                });
            }
            let node = match acc {
                Some(v) => v,
                None => {
                    let hw = cell.spec.hw_out();
                    let n = g.shape(a)[0];
                    g.zeros(&[n, cell.spec.channels, hw, hw])
                }
            };
            states.push(node);
        }
        g.concat(&states[t.n_inputs..])
    }

    /// Softmax weights used by the edges of cell `index`, per template slot.
    pub fn cell_mixture(&self, theta: &ArchParams<f64>, index: usize) -> Vec<Vec<f64>> {
        let kind = self.cells[index].spec.kind;
        theta.edges(kind).iter().map(|v| crate::scalar::softmax(v)).collect()
    }
}
