use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradient errors are measured absolutely rather than
/// relatively: `err = |a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Coordinates whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.rel_errors
            .iter()
            .enumerate()
            .filter(|(_, &e)| !(e <= self.tol))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.data()[0])
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let wrap = |e| Error::GradCheck {
            coordinate: i,
            source: Box::new(e),
        };
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(plus).map_err(wrap)?;
        let fm = eval(minus).map_err(wrap)?;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
        .collect();
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &Tensor::scalar(3.0),
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
        assert!(r.passed());
    }

    #[test]
    fn detached_factor_is_caught() {
        // x * stop_gradient(x): the tape sees the second factor as a constant,
        // so its backward rule is wrong for x^2.
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let r = grad_check(
            |g, x| {
                let c = g.constant(g.value(x).clone());
                let y = g.mul(x, c)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures(), vec![0, 1, 2]);
    }

    #[test]
    fn errors_carry_coordinate() {
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let err = grad_check(
            |g, x| {
                if g.value(x).data()[1] > 0.0 {
                    return Err(Error::NonFinite("boom".into()));
                }
                Ok(g.sum(x))
            },
            &x,
            1e-4,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck { coordinate: 1, .. }));
    }
}
