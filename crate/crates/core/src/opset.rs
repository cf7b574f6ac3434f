//! Candidate operations, their builders, and their analytic costs.
//!
//! Cost conventions (normative for the whole crate):
//! - parameters: a `k x k` convolution with `g` groups holds `k^2 * c_in * c_out / g`
//!   weights and no bias; every batch-norm holds `2 * c` affine weights;
//!   pooling, identity and zero hold none.
//! - FLOPs are multiply-accumulates for a single image: a convolution costs
//!   `k^2 * (c_in / g) * c_out * h_out * w_out`, a `k x k` pool costs
//!   `k^2 * c * h_out * w_out`; ReLU, batch-norm, additions and identity are free.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvAttrs, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5,
    #[serde(rename = "dil_sep_conv_3x3")]
    DilSepConv3,
    #[serde(rename = "dil_sep_conv_5x5")]
    DilSepConv5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3,
    #[serde(rename = "group_conv_1x1_g1")]
    GroupConv1x1G1,
    #[serde(rename = "group_conv_1x1_g2")]
    GroupConv1x1G2,
    #[serde(rename = "group_conv_1x1_g4")]
    GroupConv1x1G4,
}

/// Operations available on normal and reduction cell edges.
pub const CELL_OPS: [OpKind; 8] = [
    OpKind::Zero,
    OpKind::MaxPool3,
    OpKind::AvgPool3,
    OpKind::Identity,
    OpKind::SepConv3,
    OpKind::SepConv5,
    OpKind::DilSepConv3,
    OpKind::DilSepConv5,
];

/// Operations available on the single edge of a connection cell.
pub const CONNECTION_OPS: [OpKind; 4] = [
    OpKind::DilConv3,
    OpKind::GroupConv1x1G1,
    OpKind::GroupConv1x1G2,
    OpKind::GroupConv1x1G4,
];

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Zero,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
        OpKind::Identity,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilSepConv3,
        OpKind::DilSepConv5,
        OpKind::DilConv3,
        OpKind::GroupConv1x1G1,
        OpKind::GroupConv1x1G2,
        OpKind::GroupConv1x1G4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::MaxPool3 => "max_pool_3x3",
            OpKind::AvgPool3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::SepConv3 => "sep_conv_3x3",
            OpKind::SepConv5 => "sep_conv_5x5",
            OpKind::DilSepConv3 => "dil_sep_conv_3x3",
            OpKind::DilSepConv5 => "dil_sep_conv_5x5",
            OpKind::DilConv3 => "dil_conv_3x3",
            OpKind::GroupConv1x1G1 => "group_conv_1x1_g1",
            OpKind::GroupConv1x1G2 => "group_conv_1x1_g2",
            OpKind::GroupConv1x1G4 => "group_conv_1x1_g4",
        }
    }

    pub fn is_connection(self) -> bool {
        CONNECTION_OPS.contains(&self)
    }

    fn groups(self) -> usize {
        match self {
            OpKind::GroupConv1x1G2 => 2,
            OpKind::GroupConv1x1G4 => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// Shape context an operation is instantiated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpContext {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub stride: usize,
}

impl OpContext {
    pub fn new(c_in: usize, c_out: usize, h_in: usize, w_in: usize, stride: usize) -> Self {
        Self { c_in, c_out, h_in, w_in, stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.h_in == 0 || self.w_in == 0 {
            return Err(Error::InvalidContext(format!("{self:?}: dimensions must be positive")));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidContext(format!("{self:?}: stride must be 1 or 2")));
        }
        Ok(())
    }

    pub fn h_out(&self) -> usize {
        (self.h_in - 1) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in - 1) / self.stride + 1
    }

    fn out_area(&self) -> u64 {
        (self.h_out() * self.w_out()) as u64
    }

    /// True when `Identity` is a pass-through rather than a factorized reduce.
    pub fn is_passthrough(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

/// Checks that `kind` can be built in `ctx`.
pub fn check_compatible(kind: OpKind, ctx: &OpContext) -> Result<()> {
    ctx.validate()?;
    let bad = |why: &str| Err(Error::InvalidContext(format!("{kind} in {ctx:?}: {why}")));
    match kind {
        OpKind::MaxPool3 | OpKind::AvgPool3 if ctx.c_in != ctx.c_out => {
            bad("pooling cannot change the channel count")
        }
        OpKind::Identity if !ctx.is_passthrough() && !ctx.c_out.is_multiple_of(2) => {
            bad("factorized reduce needs an even output channel count")
        }
        OpKind::GroupConv1x1G1 | OpKind::GroupConv1x1G2 | OpKind::GroupConv1x1G4 => {
            let g = kind.groups();
            if !ctx.c_in.is_multiple_of(g) || !ctx.c_out.is_multiple_of(g) {
                bad(&format!("channels not divisible by groups={g}"))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

/// Exact number of scalar weights of `kind` built in `ctx`.
pub fn param_count(kind: OpKind, ctx: &OpContext) -> u64 {
    let (ci, co) = (ctx.c_in as u64, ctx.c_out as u64);
    let sep = |k: u64| (k * k * ci + ci * ci + 2 * ci) + (k * k * ci + ci * co + 2 * co);
    let dil_sep = |k: u64| k * k * ci + ci * co + 2 * co;
    match kind {
        OpKind::Zero | OpKind::MaxPool3 | OpKind::AvgPool3 => 0,
        OpKind::Identity if ctx.is_passthrough() => 0,
        OpKind::Identity => ci * co + 2 * co,
        OpKind::SepConv3 => sep(3),
        OpKind::SepConv5 => sep(5),
        OpKind::DilSepConv3 => dil_sep(3),
        OpKind::DilSepConv5 => dil_sep(5),
        OpKind::DilConv3 => 9 * ci * co + 2 * co,
        OpKind::GroupConv1x1G1 | OpKind::GroupConv1x1G2 | OpKind::GroupConv1x1G4 => {
            ci * co / kind.groups() as u64 + 2 * co
        }
    }
}

/// Multiply-accumulate count of `kind` on one image in `ctx`.
pub fn flop_count(kind: OpKind, ctx: &OpContext) -> u64 {
    let (ci, co) = (ctx.c_in as u64, ctx.c_out as u64);
    let a = ctx.out_area();
    let sep = |k: u64| (k * k * ci + ci * ci + k * k * ci + ci * co) * a;
    let dil_sep = |k: u64| (k * k * ci + ci * co) * a;
    match kind {
        OpKind::Zero => 0,
        OpKind::MaxPool3 | OpKind::AvgPool3 => 9 * ci * a,
        OpKind::Identity if ctx.is_passthrough() => 0,
        OpKind::Identity => ci * co * a,
        OpKind::SepConv3 => sep(3),
        OpKind::SepConv5 => sep(5),
        OpKind::DilSepConv3 => dil_sep(3),
        OpKind::DilSepConv5 => dil_sep(5),
        OpKind::DilConv3 => 9 * ci * co * a,
        OpKind::GroupConv1x1G1 | OpKind::GroupConv1x1G2 | OpKind::GroupConv1x1G4 => {
            ci / kind.groups() as u64 * co * a
        }
    }
}

/// ReLU, one or more convolutions, then batch-norm.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    pub convs: Vec<(ParamId, ConvAttrs)>,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ReluConvBn {
    fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = g.relu(x);
        for &(w, a) in &self.convs {
            h = g.conv2d(h, vars[w.0], a)?;
        }
        g.batch_norm(h, vars[self.gamma.0], vars[self.beta.0], BN_EPS)
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum OpBody {
    Zero,
    Identity,
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Stack(Vec<ReluConvBn>),
    FactorizedReduce { w1: ParamId, w2: ParamId, gamma: ParamId, beta: ParamId },
    Shuffled { block: ReluConvBn, groups: usize },
}

/// A built operation: kind, context and the parameters it owns.
#[derive(Debug, Clone)]
pub struct OpInstance {
    pub kind: OpKind,
    pub ctx: OpContext,
    pub body: OpBody,
    pub params: Vec<ParamId>,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
    params: Vec<ParamId>,
}

impl<R: Rng> Builder<'_, R> {
    /// Kaiming-uniform (fan-in, ReLU gain) conv weight.
    fn conv(&mut self, name: &str, c_out: usize, c_in_per_group: usize, k: usize) -> Result<ParamId> {
        let fan_in = (c_in_per_group * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in_per_group * k * k;
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(vec![c_out, c_in_per_group, k, k], data)?;
        self.add(name, t)
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
        let gamma = self.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
        let beta = self.add(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
        Ok((gamma, beta))
    }

    fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let id = self.store.register(format!("{}.{name}", self.prefix), t)?;
        self.params.push(id);
        Ok(id)
    }

    fn sep_block(&mut self, tag: &str, c_in: usize, c_out: usize, k: usize, stride: usize, dil: usize) -> Result<ReluConvBn> {
        let dw = self.conv(&format!("dw{tag}.weight"), c_in, 1, k)?;
        let pw = self.conv(&format!("pw{tag}.weight"), c_out, c_in, 1)?;
        let (gamma, beta) = self.bn(&format!("bn{tag}"), c_out)?;
        Ok(ReluConvBn {
            convs: vec![
                (dw, ConvAttrs::same(k, stride, dil, c_in)),
                (pw, ConvAttrs::default()),
            ],
            gamma,
            beta,
        })
    }
}

/// Builds `kind` in `ctx`, registering its weights in `store` under
/// `prefix.<op name>.*`.
pub fn build<R: Rng>(
    kind: OpKind,
    ctx: OpContext,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<OpInstance> {
    check_compatible(kind, &ctx)?;
    let mut b = Builder {
        store,
        rng,
        prefix: format!("{prefix}.{}", kind.name()),
        params: Vec::new(),
    };
    let (ci, co, s) = (ctx.c_in, ctx.c_out, ctx.stride);
    let body = match kind {
        OpKind::Zero => OpBody::Zero,
        OpKind::MaxPool3 => OpBody::MaxPool { stride: s },
        OpKind::AvgPool3 => OpBody::AvgPool { stride: s },
        OpKind::Identity if ctx.is_passthrough() => OpBody::Identity,
        OpKind::Identity => {
            let w1 = b.conv("conv1.weight", co / 2, ci, 1)?;
            let w2 = b.conv("conv2.weight", co / 2, ci, 1)?;
            let (gamma, beta) = b.bn("bn", co)?;
            OpBody::FactorizedReduce { w1, w2, gamma, beta }
        }
        OpKind::SepConv3 | OpKind::SepConv5 => {
            let k = if kind == OpKind::SepConv3 { 3 } else { 5 };
            let first = b.sep_block("1", ci, ci, k, s, 1)?;
            let second = b.sep_block("2", ci, co, k, 1, 1)?;
            OpBody::Stack(vec![first, second])
        }
        OpKind::DilSepConv3 | OpKind::DilSepConv5 => {
            let k = if kind == OpKind::DilSepConv3 { 3 } else { 5 };
            OpBody::Stack(vec![b.sep_block("1", ci, co, k, s, 2)?])
        }
        OpKind::DilConv3 => {
            let w = b.conv("conv.weight", co, ci, 3)?;
            let (gamma, beta) = b.bn("bn", co)?;
            OpBody::Stack(vec![ReluConvBn {
                convs: vec![(w, ConvAttrs::same(3, s, 2, 1))],
                gamma,
                beta,
            }])
        }
        OpKind::GroupConv1x1G1 | OpKind::GroupConv1x1G2 | OpKind::GroupConv1x1G4 => {
            let groups = kind.groups();
            let w = b.conv("conv.weight", co, ci / groups, 1)?;
            let (gamma, beta) = b.bn("bn", co)?;
            let block = ReluConvBn {
                convs: vec![(w, ConvAttrs { stride: s, padding: 0, dilation: 1, groups })],
                gamma,
                beta,
            };
            if groups > 1 {
                OpBody::Shuffled { block, groups }
            } else {
                OpBody::Stack(vec![block])
            }
        }
    };
    Ok(OpInstance {
        kind,
        ctx,
        body,
        params: b.params,
    })
}

impl OpInstance {
    /// Output shape for a batch of `n` images.
    pub fn out_shape(&self, n: usize) -> [usize; 4] {
        [n, self.ctx.c_out, self.ctx.h_out(), self.ctx.w_out()]
    }

    pub fn scalar_count(&self, store: &ParamStore) -> usize {
        self.params.iter().map(|&p| store.get(p).tensor.numel()).sum()
    }

    /// Forward pass. `vars` maps every `ParamId` of the owning store to its
    /// bound graph variable.
    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let [n, c, h, w] = g.value(x).dims4("op.apply")?;
        if (c, h, w) != (self.ctx.c_in, self.ctx.h_in, self.ctx.w_in) {
            return Err(Error::Shape {
                op: "op.apply",
                detail: format!(
                    "{} expects ({}, {}, {}), got ({c}, {h}, {w})",
                    self.kind, self.ctx.c_in, self.ctx.h_in, self.ctx.w_in
                ),
            });
        }
        match &self.body {
            OpBody::Zero => Ok(g.zeros(&self.out_shape(n))),
            OpBody::Identity => Ok(x),
            OpBody::MaxPool { stride } => g.max_pool(x, 3, *stride, 1),
            OpBody::AvgPool { stride } => g.avg_pool(x, 3, *stride, 1),
            OpBody::Stack(blocks) => {
                let mut h = x;
                for blk in blocks {
                    h = blk.apply(g, vars, h)?;
                }
                Ok(h)
            }
            OpBody::FactorizedReduce { w1, w2, gamma, beta } => {
                let a = ConvAttrs { stride: 2, ..ConvAttrs::default() };
                let r = g.relu(x);
                let y1 = g.conv2d(r, vars[w1.0], a)?;
                let shifted = g.shift(r)?;
                let y2 = g.conv2d(shifted, vars[w2.0], a)?;
                let cat = g.concat(&[y1, y2])?;
                g.batch_norm(cat, vars[gamma.0], vars[beta.0], BN_EPS)
            }
            OpBody::Shuffled { block, groups } => {
                let h = block.apply(g, vars, x)?;
                g.channel_shuffle(h, *groups)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(c: usize, hw: usize, s: usize) -> OpContext {
        OpContext::new(c, c, hw, hw, s)
    }

    #[test]
    fn set_sizes() {
        assert_eq!(CELL_OPS.len(), 8);
        assert_eq!(CONNECTION_OPS.len(), 4);
        assert!(!CONNECTION_OPS.contains(&OpKind::Zero));
        assert!(CELL_OPS.iter().all(|k| !k.is_connection()));
    }

    #[test]
    fn documented_counts() {
        assert_eq!(param_count(OpKind::Zero, &ctx(16, 8, 1)), 0);
        assert_eq!(param_count(OpKind::GroupConv1x1G1, &ctx(16, 8, 1)), 288);
        assert_eq!(param_count(OpKind::SepConv3, &ctx(16, 8, 1)), 864);
        assert_eq!(flop_count(OpKind::Identity, &ctx(4, 8, 1)), 0);
        assert_eq!(flop_count(OpKind::DilConv3, &ctx(4, 8, 1)), 9216);
        assert_eq!(flop_count(OpKind::MaxPool3, &ctx(4, 8, 1)), 2304);
    }

    #[test]
    fn built_weights_match_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in OpKind::ALL {
            for c in [ctx(8, 6, 1), ctx(8, 6, 2), OpContext::new(16, 8, 4, 4, 1)] {
                if check_compatible(kind, &c).is_err() {
                    continue;
                }
                let mut store = ParamStore::new();
                let op = build(kind, c, &mut store, "t", &mut rng).unwrap();
                assert_eq!(op.scalar_count(&store) as u64, param_count(kind, &c), "{kind} {c:?}");
                assert_eq!(store.scalar_count(), op.scalar_count(&store));
            }
        }
    }

    #[test]
    fn sep_conv_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = build(OpKind::SepConv3, ctx(16, 8, 1), &mut store, "e", &mut rng).unwrap();
        let OpBody::Stack(blocks) = &op.body else { panic!() };
        assert_eq!(blocks.len(), 2);
        for blk in blocks {
            assert_eq!(blk.convs.len(), 2);
            assert_eq!(blk.convs[0].1.groups, 16);
        }
        assert!(store.lookup("e.sep_conv_3x3.dw1.weight").is_some());
    }

    #[test]
    fn grouped_conv_shuffles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = build(OpKind::GroupConv1x1G2, ctx(8, 4, 1), &mut store, "c", &mut rng).unwrap();
        assert!(matches!(op.body, OpBody::Shuffled { groups: 2, .. }));
        let err = build(OpKind::GroupConv1x1G4, OpContext::new(6, 8, 4, 4, 1), &mut store, "d", &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn zero_and_identity_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 6 * 6).map(|i| (i as f64).sin()).collect();
        let x = g.constant(Tensor::new(vec![2, 4, 6, 6], data.clone()).unwrap());
        let id = build(OpKind::Identity, ctx(4, 6, 1), &mut store, "a", &mut rng).unwrap();
        let y = id.apply(&mut g, &[], x).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let z = build(OpKind::Zero, ctx(4, 6, 2), &mut store, "b", &mut rng).unwrap();
        let y = z.apply(&mut g, &[], x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in OpKind::ALL {
            for s in [1, 2] {
                let c = OpContext::new(8, 8, 6, 6, s);
                let mut store = ParamStore::new();
                let op = build(kind, c, &mut store, "t", &mut rng).unwrap();
                let mut g = Graph::new();
                let vars = store.bind(&mut g, false);
                let x = g.constant(Tensor::full(&[2, 8, 6, 6], 0.5));
                let y = op.apply(&mut g, &vars, x).unwrap();
                assert_eq!(g.shape(y), &op.out_shape(2), "{kind} stride {s}");
            }
        }
    }

    #[test]
    fn apply_rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = build(OpKind::MaxPool3, ctx(4, 6, 1), &mut store, "a", &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 6, 6]));
        assert!(op.apply(&mut g, &[], x).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}
