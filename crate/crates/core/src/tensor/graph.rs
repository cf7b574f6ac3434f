use std::str::FromStr;

use super::conv::{self, ConvAttrs};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives understood by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    Relu,
    BatchNorm,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Concat,
    Add,
    Mul,
    Scale,
    WeightedSum,
    Linear,
    Softmax,
    CrossEntropy,
    Sum,
    ChannelShuffle,
    Shift,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::Conv2d,
        Primitive::Relu,
        Primitive::BatchNorm,
        Primitive::MaxPool,
        Primitive::AvgPool,
        Primitive::GlobalAvgPool,
        Primitive::Concat,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::WeightedSum,
        Primitive::Linear,
        Primitive::Softmax,
        Primitive::CrossEntropy,
        Primitive::Sum,
        Primitive::ChannelShuffle,
        Primitive::Shift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::Relu => "relu",
            Primitive::BatchNorm => "batch_norm",
            Primitive::MaxPool => "max_pool",
            Primitive::AvgPool => "avg_pool",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Concat => "concat",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::Linear => "linear",
            Primitive::Softmax => "softmax",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::Sum => "sum",
            Primitive::ChannelShuffle => "channel_shuffle",
            Primitive::Shift => "shift",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

/// Attribute bag for [`Graph::apply`]; each primitive reads what it needs.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub conv: Option<ConvAttrs>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub eps: Option<f64>,
    pub groups: Option<usize>,
    pub scalar: Option<f64>,
    pub labels: Option<Vec<usize>>,
}

fn need<T: Clone>(v: &Option<T>, op: &'static str, attr: &'static str) -> Result<T> {
    v.clone().ok_or(Error::MissingAttr { op, attr })
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, a: ConvAttrs },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    WeightedSum { xs: Vec<Option<Var>>, w: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
    ChannelShuffle { x: Var, groups: usize },
    Shift { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Gradient tape. Nodes are appended in execution order, which is always a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    /// Applies a primitive by identifier. Equivalent to calling the typed
    /// method of the same name.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let name = prim.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                shape_err(name, format!("expects {n} inputs, got {}", inputs.len()))
            }
        };
        match prim {
            Primitive::Conv2d => {
                arity(2)?;
                self.conv2d(inputs[0], inputs[1], need(&attrs.conv, name, "conv")?)
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::BatchNorm => {
                arity(3)?;
                self.batch_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5))
            }
            Primitive::MaxPool | Primitive::AvgPool => {
                arity(1)?;
                let k = need(&attrs.kernel, name, "kernel")?;
                let s = need(&attrs.stride, name, "stride")?;
                let p = need(&attrs.padding, name, "padding")?;
                if prim == Primitive::MaxPool {
                    self.max_pool(inputs[0], k, s, p)
                } else {
                    self.avg_pool(inputs[0], k, s, p)
                }
            }
            Primitive::GlobalAvgPool => {
                arity(1)?;
                self.global_avg_pool(inputs[0])
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale => {
                arity(1)?;
                Ok(self.scale(inputs[0], need(&attrs.scalar, name, "scalar")?))
            }
            Primitive::WeightedSum => {
                if inputs.is_empty() {
                    return shape_err(name, "needs a weight vector");
                }
                let (w, xs) = inputs.split_last().unwrap();
                let xs: Vec<Option<Var>> = xs.iter().copied().map(Some).collect();
                self.weighted_sum(&xs, *w)
            }
            Primitive::Linear => match inputs.len() {
                2 => self.linear(inputs[0], inputs[1], None),
                3 => self.linear(inputs[0], inputs[1], Some(inputs[2])),
                n => shape_err(name, format!("expects 2 or 3 inputs, got {n}")),
            },
            Primitive::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            Primitive::CrossEntropy => {
                arity(1)?;
                self.cross_entropy(inputs[0], &need(&attrs.labels, name, "labels")?)
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            Primitive::ChannelShuffle => {
                arity(1)?;
                self.channel_shuffle(inputs[0], need(&attrs.groups, name, "groups")?)
            }
            Primitive::Shift => {
                arity(1)?;
                self.shift(inputs[0])
            }
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, a: ConvAttrs) -> Result<Var> {
        let y = conv::forward(self.value(x), self.value(w), a)?;
        Ok(self.record(y, &[x, w], Op::Conv { x, w, a }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let y = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.record(y, &[x], Op::Relu { x })
    }

    /// Batch normalization with per-batch statistics over `(n, h, w)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("batch_norm", format!("affine parameters must have {c} entries"));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let mut mean = 0.0;
            for b in 0..n {
                mean += xd[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for b in 0..n {
                var += xd[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= m;
            let is = 1.0 / (var + eps).sqrt();
            invstd[ch] = is;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let y = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(y, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, xhat, invstd }))
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        x: Var,
        k: usize,
        s: usize,
        p: usize,
    ) -> Result<([usize; 4], usize, usize)> {
        let d = self.value(x).dims4(op)?;
        if k == 0 || s == 0 || p >= k {
            return shape_err(op, format!("invalid kernel {k}, stride {s}, padding {p}"));
        }
        let a = ConvAttrs { stride: s, padding: p, dilation: 1, groups: 1 };
        match (a.out_size(d[2], k), a.out_size(d[3], k)) {
            (Some(ho), Some(wo)) => Ok((d, ho, wo)),
            _ => shape_err(op, format!("kernel {k} larger than padded input {}x{}", d[2], d[3])),
        }
    }

    pub fn max_pool(&mut self, x: Var, k: usize, s: usize, p: usize) -> Result<Var> {
        let ([n, c, h, w], ho, wo) = self.pool_geometry("max_pool", x, k, s, p)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for ki in 0..k {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best || at == usize::MAX {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let y = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.record(y, &[x], Op::MaxPool { x, argmax }))
    }

    /// Average pooling that divides by the number of in-bounds taps.
    pub fn avg_pool(&mut self, x: Var, k: usize, s: usize, p: usize) -> Result<Var> {
        let ([n, c, h, w], ho, wo) = self.pool_geometry("avg_pool", x, k, s, p)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut acc, mut cnt) = (0.0, 0usize);
                    for (iy, ix) in pool_taps(oy, ox, k, s, p, h, w) {
                        acc += xd[base + iy * w + ix];
                        cnt += 1;
                    }
                    out[(plane * ho + oy) * wo + ox] = acc / cnt as f64;
                }
            }
        }
        let y = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.record(y, &[x], Op::AvgPool { x, kernel: k, stride: s, padding: p }))
    }

    /// `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c)
            .map(|pl| xd[pl * hw..(pl + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let y = Tensor::new(vec![n, c], out)?;
        Ok(self.record(y, &[x], Op::GlobalAvgPool { x }))
    }

    /// Concatenation along the channel axis of 4-d tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let [n, _, h, w] = self.value(xs[0]).dims4("concat")?;
        let mut total = 0;
        for &x in xs {
            let [n2, c2, h2, w2] = self.value(x).dims4("concat")?;
            if (n2, h2, w2) != (n, h, w) {
                return shape_err(
                    "concat",
                    format!("input {:?} incompatible with (n={n}, h={h}, w={w})", self.shape(x)),
                );
            }
            total += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let y = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.record(y, xs, Op::Concat { xs: xs.to_vec() }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let y = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(y, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let y = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(y, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let y = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect()).unwrap();
        self.record(y, &[x], Op::Scale { x, c })
    }

    /// `sum_i w[i] * xs[i]`, where a `None` input stands for an all-zero
    /// tensor (it still owns a slot in `w`).
    pub fn weighted_sum(&mut self, xs: &[Option<Var>], w: Var) -> Result<Var> {
        if self.value(w).numel() != xs.len() {
            return shape_err(
                "weighted_sum",
                format!("{} weights for {} inputs", self.value(w).numel(), xs.len()),
            );
        }
        let Some(first) = xs.iter().flatten().next().copied() else {
            return shape_err("weighted_sum", "every input is zero; output shape unknown");
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for (i, x) in xs.iter().enumerate() {
            let Some(x) = *x else { continue };
            if self.shape(x) != shape.as_slice() {
                return shape_err(
                    "weighted_sum",
                    format!("input {i} has shape {:?}, expected {shape:?}", self.shape(x)),
                );
            }
            let wi = self.value(w).data()[i];
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += wi * v;
            }
        }
        let y = Tensor::new(shape, out)?;
        let mut inputs: Vec<Var> = xs.iter().flatten().copied().collect();
        inputs.push(w);
        Ok(self.record(y, &inputs, Op::WeightedSum { xs: xs.to_vec(), w }))
    }

    /// `x (n, d)`, `w (k, d)`, optional `b (k)` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            &[n, d] => (n, d),
            s => return shape_err("linear", format!("input must be (n, d), got {s:?}")),
        };
        let k = match self.shape(w) {
            &[k, d2] if d2 == d => k,
            s => return shape_err("linear", format!("weight must be (k, {d}), got {s:?}")),
        };
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return shape_err("linear", format!("bias must be ({k}), got {:?}", self.shape(b)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut s = 0.0;
                for t in 0..d {
                    s += xd[i * d + t] * wd[j * d + t];
                }
                out[i * k + j] = s;
            }
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for i in 0..n {
                for j in 0..k {
                    out[i * k + j] += bd[j];
                }
            }
            inputs.push(b);
        }
        let y = Tensor::new(vec![n, k], out)?;
        Ok(self.record(y, &inputs, Op::Linear { x, w, b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let y = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.record(y, &[x], Op::Softmax { x })
    }

    /// Mean softmax cross-entropy of `logits (n, k)` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            &[n, k] => (n, k),
            s => return shape_err("cross_entropy", format!("logits must be (n, k), got {s:?}")),
        };
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err("cross_entropy", format!("label {bad} out of range for {k} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let lse = log_sum_exp(row);
            loss += lse - row[l];
            softmax_in_place(row);
        }
        let y = Tensor::scalar(loss / n as f64);
        Ok(self.record(
            y,
            &[logits],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Interleaves `groups` channel blocks: channel `i * m + j` moves to
    /// `j * groups + i`, where `m = c / groups`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("channel_shuffle")?;
        if groups == 0 || c % groups != 0 {
            return shape_err("channel_shuffle", format!("{c} channels not divisible by {groups}"));
        }
        let m = c / groups;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for i in 0..groups {
                for j in 0..m {
                    let src = (b * c + i * m + j) * hw;
                    let dst = (b * c + j * groups + i) * hw;
                    out[dst..dst + hw].copy_from_slice(&xd[src..src + hw]);
                }
            }
        }
        let y = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(y, &[x], Op::ChannelShuffle { x, groups }))
    }

    /// `y[.., r, c] = x[.., r + 1, c + 1]`, zero past the border.
    pub fn shift(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("shift")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for pl in 0..n * c {
            for r in 0..h.saturating_sub(1) {
                for col in 0..w.saturating_sub(1) {
                    out[(pl * h + r) * w + col] = xd[(pl * h + r + 1) * w + col + 1];
                }
            }
        }
        let y = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(y, &[x], Op::Shift { x }))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse pass from a scalar `loss`. Gradients of leaves are kept and
    /// readable through [`Graph::grad`]; intermediate buffers are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[idx].grad.take() else { continue };
            self.backward_node(idx, &dy)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, dy: &[f64]) -> Result<()> {
        // The op is moved out temporarily so saved buffers can be borrowed
        // while gradients are accumulated into other nodes.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backward_op(idx, &op, dy);
        self.nodes[idx].op = op;
        result
    }

    fn backward_op(&mut self, idx: usize, op: &Op, dy: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, a } => {
                let (dx, dw) = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    *a,
                    dy,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(*x, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(*w, &dw);
                }
            }
            Op::Relu { x } => {
                let g = zip_map(self.value(*x).data(), dy, |v, d| if v > 0.0 { d } else { 0.0 });
                self.accumulate(*x, &g);
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd } => {
                let [n, c, h, w] = self.value(*x).dims4("batch_norm")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gd = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for ch in 0..c {
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            sdy += dy[i];
                            sdyx += dy[i] * xhat[i];
                        }
                    }
                    dgamma[ch] = sdyx;
                    dbeta[ch] = sdy;
                    let k = gd[ch] * invstd[ch] / m;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = k * (m * dy[i] - sdy - xhat[i] * sdyx);
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[o];
                }
                self.accumulate(*x, &dx);
            }
            Op::AvgPool { x, kernel, stride, padding } => {
                let [n, c, h, w] = self.value(*x).dims4("avg_pool")?;
                let [_, _, ho, wo] = self.value(Var(idx)).dims4("avg_pool")?;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let taps: Vec<_> = pool_taps(oy, ox, *kernel, *stride, *padding, h, w).collect();
                            let g = dy[(plane * ho + oy) * wo + ox] / taps.len() as f64;
                            for (iy, ix) in taps {
                                dx[base + iy * w + ix] += g;
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.value(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for pl in 0..n * c {
                    let g = dy[pl] / hw as f64;
                    dx[pl * hw..(pl + 1) * hw].iter_mut().for_each(|v| *v = g);
                }
                self.accumulate(*x, &dx);
            }
            Op::Concat { xs } => {
                let [n, total, h, w] = self.value(Var(idx)).dims4("concat")?;
                let hw = h * w;
                let mut c0 = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.needs(x) {
                        let mut g = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            g.extend_from_slice(&dy[(b * total + c0) * hw..(b * total + c0 + c) * hw]);
                        }
                        self.accumulate(x, &g);
                    }
                    c0 += c;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Mul { a, b } => {
                let ga = zip_map(dy, self.value(*b).data(), |d, v| d * v);
                let gb = zip_map(dy, self.value(*a).data(), |d, v| d * v);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Scale { x, c } => {
                let g: Vec<f64> = dy.iter().map(|d| d * c).collect();
                self.accumulate(*x, &g);
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.value(*w).data().to_vec();
                let mut dw = vec![0.0; wv.len()];
                for (i, x) in xs.iter().enumerate() {
                    let Some(x) = *x else { continue };
                    if self.needs(*w) {
                        dw[i] = self.value(x).data().iter().zip(dy).map(|(a, b)| a * b).sum();
                    }
                    if self.needs(x) {
                        let g: Vec<f64> = dy.iter().map(|d| d * wv[i]).collect();
                        self.accumulate(x, &g);
                    }
                }
                self.accumulate(*w, &dw);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                if self.needs(*x) {
                    let wd = self.value(*w).data();
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let g = dy[i * k + j];
                            for t in 0..d {
                                dx[i * d + t] += g * wd[j * d + t];
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.needs(*w) {
                    let xd = self.value(*x).data();
                    let mut dw = vec![0.0; k * d];
                    for i in 0..n {
                        for j in 0..k {
                            let g = dy[i * k + j];
                            for t in 0..d {
                                dw[j * d + t] += g * xd[i * d + t];
                            }
                        }
                    }
                    self.accumulate(*w, &dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for j in 0..k {
                            db[j] += dy[i * k + j];
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Softmax { x } => {
                let yv = self.value(Var(idx));
                let k = *yv.shape().last().unwrap();
                let mut dx = vec![0.0; dy.len()];
                for ((yr, dr), out) in yv.data().chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        out[i] = yr[i] * (dr[i] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= scale;
                }
                self.accumulate(*logits, &g);
            }
            Op::Sum { x } => {
                let g = vec![dy[0]; self.value(*x).numel()];
                self.accumulate(*x, &g);
            }
            Op::ChannelShuffle { x, groups } => {
                let [n, c, h, w] = self.value(*x).dims4("channel_shuffle")?;
                let m = c / groups;
                let hw = h * w;
                let mut dx = vec![0.0; dy.len()];
                for b in 0..n {
                    for i in 0..*groups {
                        for j in 0..m {
                            let src = (b * c + i * m + j) * hw;
                            let dst = (b * c + j * groups + i) * hw;
                            dx[src..src + hw].copy_from_slice(&dy[dst..dst + hw]);
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Shift { x } => {
                let [n, c, h, w] = self.value(*x).dims4("shift")?;
                let mut dx = vec![0.0; dy.len()];
                for pl in 0..n * c {
                    for r in 0..h.saturating_sub(1) {
                        for col in 0..w.saturating_sub(1) {
                            dx[(pl * h + r + 1) * w + col + 1] = dy[(pl * h + r) * w + col];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn pool_taps(
    oy: usize,
    ox: usize,
    k: usize,
    s: usize,
    p: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let y0 = (oy * s) as isize - p as isize;
    let x0 = (ox * s) as isize - p as isize;
    (0..k as isize).flat_map(move |ki| {
        (0..k as isize).filter_map(move |kj| {
            let (iy, ix) = (y0 + ki, x0 + kj);
            (iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize).then_some((iy as usize, ix as usize))
        })
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
