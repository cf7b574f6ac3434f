#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnas::cellgraph::{ArchParams, NetworkPlan};
use rcnas::costmodel::{cost_gradient, expected_cost_masked, CostScope, CostTable, ScopeMask};
use rcnas::opset::OpKind;
use rcnas::tensor::{grad_check, ConvAttrs, Graph, Primitive, Tensor, Var, GRAD_CHECK_FLOOR};
use rcnas::Result;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-5;
pub const CASES: u64 = 10;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so no coordinate sits on a ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.01 apart, so every pooling window has a clear winner.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let data = idx.iter().map(|&i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Largest relative gradient error over all inputs of one seeded case.
pub fn primitive_case(p: Primitive, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, s) = (2, 4, 5);
    let x4 = uniform(&mut rng, &[n, c, s, s], -1.0, 1.0);
    let mut worst = 0.0f64;
    let mut check = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>, at: &Tensor| -> Result<()> {
        let r = grad_check(f, at, H, TOL)?;
        worst = worst.max(r.max_rel_error());
        Ok(())
    };
    match p {
        Primitive::Conv2d => {
            let variants = [ConvAttrs::same(3, 1, 1, 1), ConvAttrs::same(3, 2, 1, 1), ConvAttrs::same(3, 1, 2, 2), ConvAttrs::same(1, 1, 1, 4)];
            let a = variants[seed as usize % variants.len()];
            let k = if a.padding == 0 { 1 } else { 3 };
            let w = uniform(&mut rng, &[4, c / a.groups, k, k], -0.5, 0.5);
            let wc = w.clone();
            check(&|g, x| { let wv = g.constant(wc.clone()); let y = g.conv2d(x, wv, a)?; probe(g, y, seed) }, &x4)?;
            let xc = x4.clone();
            check(&|g, wv| { let x = g.constant(xc.clone()); let y = g.conv2d(x, wv, a)?; probe(g, y, seed) }, &w)?;
        }
        Primitive::Relu => {
            let x = off_kink(&mut rng, &[n, c, s, s]);
            check(&|g, x| { let y = g.relu(x); probe(g, y, seed) }, &x)?;
        }
        Primitive::BatchNorm => {
            let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
            let beta = uniform(&mut rng, &[c], -0.5, 0.5);
            let (gc, bc, xc) = (gamma.clone(), beta.clone(), x4.clone());
            check(&|g, x| { let (a, b) = (g.constant(gc.clone()), g.constant(bc.clone())); let y = g.batch_norm(x, a, b, 1e-5)?; probe(g, y, seed) }, &x4)?;
            check(&|g, a| { let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone())); let y = g.batch_norm(x, a, b, 1e-5)?; probe(g, y, seed) }, &gamma)?;
            check(&|g, b| { let (x, a) = (g.constant(xc.clone()), g.constant(gc.clone())); let y = g.batch_norm(x, a, b, 1e-5)?; probe(g, y, seed) }, &beta)?;
        }
        Primitive::MaxPool => {
            let x = spread(&mut rng, &[n, c, s, s]);
            let stride = 1 + seed as usize % 2;
            check(&|g, x| { let y = g.max_pool(x, 3, stride, 1)?; probe(g, y, seed) }, &x)?;
        }
        Primitive::AvgPool => {
            let stride = 1 + seed as usize % 2;
            check(&|g, x| { let y = g.avg_pool(x, 3, stride, 1)?; probe(g, y, seed) }, &x4)?;
        }
        Primitive::GlobalAvgPool => {
            check(&|g, x| { let y = g.global_avg_pool(x)?; probe(g, y, seed) }, &x4)?;
        }
        Primitive::Concat => {
            let other = uniform(&mut rng, &[n, 3, s, s], -1.0, 1.0);
            let oc = other.clone();
            check(&|g, x| { let o = g.constant(oc.clone()); let y = g.concat(&[o, x, o])?; probe(g, y, seed) }, &x4)?;
        }
        Primitive::Add | Primitive::Mul => {
            let b = uniform(&mut rng, &[n, c, s, s], -1.0, 1.0);
            let bc = b.clone();
            let mul = p == Primitive::Mul;
            check(&|g, x| {
                let bv = g.constant(bc.clone());
                let y = if mul { g.mul(x, bv)? } else { g.add(x, bv)? };
                // reuse x so both operand slots carry gradient
                let y = if mul { g.mul(y, x)? } else { g.add(y, x)? };
                probe(g, y, seed)
            }, &x4)?;
        }
        Primitive::Scale => {
            let k = rng.gen_range(-2.0..2.0);
            check(&|g, x| { let y = g.scale(x, k); probe(g, y, seed) }, &x4)?;
        }
        Primitive::WeightedSum => {
            let xs: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[n, c, s, s], -1.0, 1.0)).collect();
            let w = uniform(&mut rng, &[4], -1.0, 1.0);
            let (xc, wc) = (xs.clone(), w.clone());
            check(&|g, wv| {
                let vs: Vec<Option<Var>> = vec![Some(g.constant(xc[0].clone())), None, Some(g.constant(xc[1].clone())), Some(g.constant(xc[2].clone()))];
                let y = g.weighted_sum(&vs, wv)?;
                probe(g, y, seed)
            }, &w)?;
            check(&|g, x| {
                let wv = g.constant(wc.clone());
                let vs = vec![Some(x), None, Some(g.constant(xc[1].clone())), Some(x)];
                let y = g.weighted_sum(&vs, wv)?;
                probe(g, y, seed)
            }, &xs[0])?;
        }
        Primitive::Linear => {
            let x = uniform(&mut rng, &[3, 6], -1.0, 1.0);
            let w = uniform(&mut rng, &[5, 6], -1.0, 1.0);
            let b = uniform(&mut rng, &[5], -1.0, 1.0);
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            check(&|g, x| { let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone())); let y = g.linear(x, w, Some(b))?; probe(g, y, seed) }, &x)?;
            check(&|g, w| { let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone())); let y = g.linear(x, w, Some(b))?; probe(g, y, seed) }, &w)?;
            check(&|g, b| { let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone())); let y = g.linear(x, w, Some(b))?; probe(g, y, seed) }, &b)?;
        }
        Primitive::Softmax => {
            let x = uniform(&mut rng, &[6], -3.0, 3.0);
            check(&|g, x| { let y = g.softmax(x); probe(g, y, seed) }, &x)?;
        }
        Primitive::CrossEntropy => {
            let logits = uniform(&mut rng, &[4, 5], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            check(&|g, x| g.cross_entropy(x, &labels), &logits)?;
        }
        Primitive::Sum => {
            check(&|g, x| { let y = g.sum(x); let y = g.mul(y, y)?; Ok(y) }, &x4)?;
        }
        Primitive::ChannelShuffle => {
            let groups = [2, 4][seed as usize % 2];
            check(&|g, x| { let y = g.channel_shuffle(x, groups)?; probe(g, y, seed) }, &x4)?;
        }
        Primitive::Shift => {
            check(&|g, x| { let y = g.shift(x)?; probe(g, y, seed) }, &x4)?;
        }
    }
    Ok(worst)
}

/// Largest relative error between the analytic expected-cost gradient and
/// central differences, over both metrics and both scopes. The edge mask is
/// resolved once at `theta`, and each metric is divided by its value there so
/// the error floor is relative to the cost scale.
pub fn cost_gradient_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = NetworkPlan {
        n_cells: 3,
        init_channels: 4,
        levels: 1,
        n_nodes: 5,
        image_size: 8,
        n_classes: 3,
        cell_ops: vec![OpKind::Zero, OpKind::MaxPool3, OpKind::Identity, OpKind::SepConv3],
        connection_ops: vec![OpKind::GroupConv1x1G1, OpKind::GroupConv1x1G2, OpKind::DilConv3],
        ..NetworkPlan::default()
    };
    let space = plan.space()?;
    let table = CostTable::new(&plan)?;
    let theta = ArchParams::<f64>::random(&space, &plan.kinds(), 2.0, &mut rng);
    let flat = theta.to_flat();
    let mut worst = 0.0f64;
    for scope in [CostScope::FullDag, CostScope::TopK] {
        let mask = ScopeMask::resolve(scope, &theta, &space)?;
        let at = |v: &[f64]| -> Result<[f64; 2]> {
            let mut t = theta.clone();
            t.set_flat(v);
            expected_cost_masked(&t, &table, &mask)
        };
        let base = at(&flat)?;
        let grads = cost_gradient(&theta, &table, &space, scope)?;
        for i in 0..flat.len() {
            let (mut p, mut m) = (flat.clone(), flat.clone());
            p[i] += H;
            m[i] -= H;
            let (fp, fm) = (at(&p)?, at(&m)?);
            for k in 0..2 {
                let s = base[k].abs().max(1.0);
                let num = (fp[k] - fm[k]) / (2.0 * H) / s;
                let ana = grads[k].to_flat()[i] / s;
                worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(GRAD_CHECK_FLOOR));
            }
        }
    }
    Ok(worst)
}
