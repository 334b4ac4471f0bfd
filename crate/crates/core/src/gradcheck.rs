//! Finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Coordinate with the worst error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`, everything in
/// 64-bit arithmetic.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// one-element node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let analytic = g.backward(out)?.get_or_zeros(&g, leaf).into_data();

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let (worst, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::build(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0, 6.0]);
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::build(&[2], vec![0.3, -0.7]).unwrap();
        let r = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![0.0, 0.0]);
        assert_eq!(r.numeric, vec![0.0, 0.0]);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn detects_wrong_derivative() {
        let x = Tensor::build(&[2], vec![0.3, 1.1]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.map(x, f64::sin, |v| -v.cos());
                Ok(g.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::build(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.5).is_err());
    }
}
