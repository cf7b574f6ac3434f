//! Projection of architecture logits onto the cost box by descending a
//! penalized distance objective.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{ArchParams, SearchSpace};
use crate::costmodel::{cost_vjp, expected_cost_masked, ConstraintBox, CostScope, CostTable, ScopeMask, M};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Initial penalty weight, shared by the lower and upper hinge terms.
    pub lambda0: f64,
    /// Per-round multiplier applied to the penalty weight.
    pub gamma: f64,
    /// Maximum descent steps per projection.
    pub e_p: usize,
    pub optimizer: AdamConfig,
    /// Relative slack of the feasibility test.
    pub eps: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            gamma: 0.98,
            e_p: 500,
            optimizer: AdamConfig::default(),
            eps: 1e-6,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("projection.{m}")));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0 must be finite and non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.e_p == 0 {
            return bad("e_p must be at least 1");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be non-negative");
        }
        if !(self.optimizer.lr >= 0.0) {
            return bad("optimizer.lr must be non-negative");
        }
        Ok(())
    }
}

/// Penalty weights `(lambda1, lambda2)` for outer round `t`.
pub fn decay_lambda(cfg: &ProjectionConfig, t: usize) -> (f64, f64) {
    let l = cfg.lambda0 * cfg.gamma.powi(t as i32);
    (l, l)
}

fn hinge_terms<T: Scalar>(phi: &[T; M], b: &ConstraintBox) -> (T, T) {
    let (lo, hi) = b.violation(phi);
    let sum = |v: [T; M]| v.iter().fold(T::zero(), |a, &x| a + x);
    (sum(lo), sum(hi))
}

/// `1/2 |anchor - p|^2 + l1 * sum max(C_L - Phi, 0) + l2 * sum max(Phi - C_H, 0)`.
pub fn lagrangian<T: Scalar>(
    theta_p: &ArchParams<T>,
    anchor: &ArchParams<T>,
    b: &ConstraintBox,
    table: &CostTable,
    mask: &ScopeMask,
    lambda: (T, T),
) -> Result<T> {
    let phi = expected_cost_masked(theta_p, table, mask)?;
    let (lo, hi) = hinge_terms(&phi, b);
    Ok(T::c(0.5) * theta_p.sq_distance(anchor) + lambda.0 * lo + lambda.1 * hi)
}

/// Gradient of [`lagrangian`] in `theta_p`; a hinge exactly at its kink
/// contributes zero.
pub fn lagrangian_grad<T: Scalar>(
    theta_p: &ArchParams<T>,
    anchor: &ArchParams<T>,
    b: &ConstraintBox,
    table: &CostTable,
    mask: &ScopeMask,
    lambda: (T, T),
) -> Result<ArchParams<T>> {
    let phi = expected_cost_masked(theta_p, table, mask)?;
    let mut w = [T::zero(); M];
    for m in 0..M {
        if phi[m] < T::c(b.lower[m]) {
            w[m] -= lambda.0;
        }
        if b.upper[m].is_finite() && phi[m] > T::c(b.upper[m]) {
            w[m] += lambda.1;
        }
    }
    let mut g = cost_vjp(theta_p, table, mask, w)?;
    for ((gi, &p), &a) in g.values_mut().zip(theta_p.values()).zip(anchor.values()) {
        *gi += p - a;
    }
    Ok(g)
}

/// One row of the projection trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStep {
    pub iteration: usize,
    pub h: f64,
    pub phi: [f64; M],
    pub lower_violation: [f64; M],
    pub upper_violation: [f64; M],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult<T = f64> {
    pub theta_p: ArchParams<T>,
    /// Descent steps actually taken.
    pub iterations: usize,
    pub phi: [T; M],
    pub feasible: bool,
    pub trajectory: Vec<ProjectionStep>,
}

impl<T: Scalar> ProjectionResult<T> {
    /// Trace as CSV: iteration, h, Φ per metric, violations.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from(
            "iteration,h,phi_params,phi_flops,low_violation_params,low_violation_flops,high_violation_params,high_violation_flops\n",
        );
        for r in &self.trajectory {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.h,
                r.phi[0],
                r.phi[1],
                r.lower_violation[0],
                r.lower_violation[1],
                r.upper_violation[0],
                r.upper_violation[1]
            );
        }
        s
    }
}

fn to_f64<T: Scalar>(v: [T; M]) -> [f64; M] {
    v.map(|x| x.to_f64().unwrap_or(f64::NAN))
}

/// Projects `theta` towards the box. The penalty weights `lambda` are the
/// already-decayed values for this round. The scope mask is resolved once,
/// at `theta`, and held fixed. Stops at the first feasible iterate or after
/// `cfg.e_p` steps.
pub fn project<T: Scalar>(
    theta: &ArchParams<T>,
    b: &ConstraintBox,
    table: &CostTable,
    space: &SearchSpace,
    scope: CostScope,
    cfg: &ProjectionConfig,
    lambda: (f64, f64),
) -> Result<ProjectionResult<T>> {
    cfg.validate()?;
    b.validate()?;
    let mask = ScopeMask::resolve(scope, theta, space)?;
    let lam = (T::c(lambda.0), T::c(lambda.1));
    let mut p = theta.clone();
    let record = |p: &ArchParams<T>, it: usize| -> Result<(ProjectionStep, [T; M])> {
        let phi = expected_cost_masked(p, table, &mask)?;
        let h = lagrangian(p, theta, b, table, &mask, lam)?;
        let (lo, hi) = b.violation(&phi);
        let step = ProjectionStep {
            iteration: it,
            h: h.to_f64().unwrap_or(f64::NAN),
            phi: to_f64(phi),
            lower_violation: to_f64(lo),
            upper_violation: to_f64(hi),
        };
        if !step.h.is_finite() {
            return Err(Error::NonFinite(format!(
                "projection objective at step {it}: h = {}, phi = {:?}",
                step.h, step.phi
            )));
        }
        Ok((step, phi))
    };

    let (first, mut phi) = record(&p, 0)?;
    let mut trajectory = vec![first];
    let mut feasible = b.is_feasible(&phi, cfg.eps);
    // With no penalty the minimizer is the anchor itself.
    let inert = lambda.0 == 0.0 && lambda.1 == 0.0;
    let mut iterations = 0;
    if !feasible && !inert {
        let mut opt = Adam::<T>::new(cfg.optimizer, &[p.len()]);
        let mut flat = p.to_flat();
        while iterations < cfg.e_p {
            let g = lagrangian_grad(&p, theta, b, table, &mask, lam)?;
            opt.step(0, &mut flat, &g.to_flat());
            p.set_flat(&flat);
            iterations += 1;
            let (row, ph) = record(&p, iterations)?;
            trajectory.push(row);
            phi = ph;
            if b.is_feasible(&phi, cfg.eps) {
                feasible = true;
                break;
            }
        }
        if !feasible {
            warn!("projection did not reach the box within {} steps; phi = {:?}", cfg.e_p, to_f64(phi));
        }
    }
    Ok(ProjectionResult {
        theta_p: p,
        iterations,
        phi,
        feasible,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgraph::{CellKind, CellTemplate};
    use crate::costmodel::CostEntry;
    use crate::opset::OpKind;

    /// Single edge with two operations; the metric pair is `(u, u)`.
    fn two_op(u: [u64; 2]) -> (ArchParams<f64>, CostTable, SearchSpace) {
        let space = SearchSpace {
            cell: CellTemplate::cell(4, vec![OpKind::Identity, OpKind::SepConv3]).unwrap(),
            connection: CellTemplate::default_connection(),
        };
        let mut theta = ArchParams::zeros(&space, &[CellKind::Reduction]);
        // keep only one edge in the table so the instance is a single edge
        let table = CostTable {
            fixed: [0; M],
            entries: vec![CostEntry {
                cell: 0,
                kind: CellKind::Reduction,
                slot: 0,
                u: vec![[u[0], u[0]], [u[1], u[1]]],
            }],
        };
        theta.edge_mut(CellKind::Reduction, 0).copy_from_slice(&[0.0, 0.0]);
        (theta, table, space)
    }

    fn full(theta: &ArchParams<f64>, space: &SearchSpace) -> ScopeMask {
        ScopeMask::resolve(CostScope::FullDag, theta, space).unwrap()
    }

    #[test]
    fn lagrangian_cases() {
        let (theta, table, space) = two_op([0, 100]);
        let mask = full(&theta, &space);
        let feasible = ConstraintBox::unbounded();
        assert_eq!(lagrangian(&theta, &theta, &feasible, &table, &mask, (1.0, 1.0)).unwrap(), 0.0);
        let b = ConstraintBox::new([0.0; M], [25.0, f64::INFINITY]).unwrap();
        let h = lagrangian(&theta, &theta, &b, &table, &mask, (0.0, 3.0)).unwrap();
        assert!((h - 3.0 * 25.0).abs() < 1e-12);
        let mut q = theta.clone();
        q.edge_mut(CellKind::Reduction, 0)[0] = 2.0;
        let h = lagrangian(&q, &theta, &b, &table, &mask, (0.0, 0.0)).unwrap();
        assert_eq!(h, 2.0);
    }

    #[test]
    fn decay_schedule() {
        let cfg = ProjectionConfig { lambda0: 10.0, gamma: 0.9, ..Default::default() };
        let (a, b) = decay_lambda(&cfg, 2);
        assert!((a - 8.1).abs() < 1e-12);
        assert_eq!(a, b);
        let flat = ProjectionConfig { lambda0: 2.0, gamma: 1.0, ..Default::default() };
        assert_eq!(decay_lambda(&flat, 100), (2.0, 2.0));
        assert!(decay_lambda(&ProjectionConfig::default(), 5000).0 < 1e-40);
    }

    #[test]
    fn feasible_anchor_is_returned() {
        let (mut theta, table, space) = two_op([0, 100]);
        theta.edge_mut(CellKind::Reduction, 0).copy_from_slice(&[0.3, -0.2]);
        let b = ConstraintBox::new([0.0; M], [90.0, 90.0]).unwrap();
        let r = project(&theta, &b, &table, &space, CostScope::FullDag, &ProjectionConfig::default(), (1.0, 1.0)).unwrap();
        assert!(r.feasible);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.theta_p, theta);
    }

    #[test]
    fn zero_lambda_keeps_theta() {
        let (theta, table, space) = two_op([0, 100]);
        let b = ConstraintBox::new([0.0; M], [25.0, 25.0]).unwrap();
        let r = project(&theta, &b, &table, &space, CostScope::FullDag, &ProjectionConfig::default(), (0.0, 0.0)).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.theta_p, theta);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut theta, table, space) = two_op([10, 100]);
        theta.edge_mut(CellKind::Reduction, 0).copy_from_slice(&[0.4, 0.1]);
        let mut anchor = theta.clone();
        anchor.edge_mut(CellKind::Reduction, 0)[1] = -0.3;
        let mask = full(&theta, &space);
        let b = ConstraintBox::new([60.0, 0.0], [70.0, 30.0]).unwrap();
        let lam = (0.7, 1.3);
        let g = lagrangian_grad(&theta, &anchor, &b, &table, &mask, lam).unwrap();
        let h = 1e-6;
        for o in 0..2 {
            let mut a = theta.clone();
            a.edge_mut(CellKind::Reduction, 0)[o] += h;
            let mut c = theta.clone();
            c.edge_mut(CellKind::Reduction, 0)[o] -= h;
            let fd = (lagrangian(&a, &anchor, &b, &table, &mask, lam).unwrap()
                - lagrangian(&c, &anchor, &b, &table, &mask, lam).unwrap())
                / (2.0 * h);
            let an = g.edge(CellKind::Reduction, 0)[o];
            assert!((an - fd).abs() < 1e-6 * an.abs().max(1.0), "{an} vs {fd}");
        }
    }

    #[test]
    fn projection_reaches_closed_form_gap() {
        let (theta, table, space) = two_op([0, 100]);
        let b = ConstraintBox::new([0.0; M], [25.0, 25.0]).unwrap();
        let cfg = ProjectionConfig { e_p: 5000, ..Default::default() };
        let r = project(&theta, &b, &table, &space, CostScope::FullDag, &cfg, (1.0, 1.0)).unwrap();
        assert!(r.feasible);
        let l = r.theta_p.edge(CellKind::Reduction, 0);
        let w = crate::scalar::softmax(l)[1];
        assert!(w <= 0.25 + 1e-3);
        assert!(l[0] - l[1] >= 3f64.ln() - 1e-5);
        assert_eq!(r.trajectory.len(), r.iterations + 1);
    }

    #[test]
    fn single_precision_tracks_double() {
        let (theta, table, space) = two_op([0, 100]);
        let b = ConstraintBox::new([0.0; M], [40.0, 40.0]).unwrap();
        let cfg = ProjectionConfig { e_p: 5000, ..Default::default() };
        let d = project(&theta, &b, &table, &space, CostScope::FullDag, &cfg, (1.0, 1.0)).unwrap();
        let s = project(&theta.cast::<f32>(), &b, &table, &space, CostScope::FullDag, &cfg, (1.0, 1.0)).unwrap();
        assert!(d.feasible && s.feasible);
        assert!((d.iterations as i64 - s.iterations as i64).abs() <= 2);
        assert!((d.phi[0] - s.phi[0] as f64).abs() < 1e-2);
    }

    #[test]
    fn deterministic() {
        let (theta, table, space) = two_op([0, 100]);
        let b = ConstraintBox::new([0.0; M], [25.0, 25.0]).unwrap();
        let run = || project(&theta, &b, &table, &space, CostScope::FullDag, &ProjectionConfig::default(), (1.0, 1.0)).unwrap();
        assert_eq!(run().theta_p, run().theta_p);
    }
}
