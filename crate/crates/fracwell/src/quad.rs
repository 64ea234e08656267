//! Quadrature toolbox: Gauss-Legendre and Gauss-Jacobi rules built by
//! Golub-Welsch, a collapsed tensor rule on the reference triangle, and an
//! adaptive Simpson integrator for one-dimensional cross-checks.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quadrature order must be at least 1, got {0}")]
    Order(usize),
    #[error("gauss-jacobi exponent must exceed -1, got {0}")]
    JacobiExponent(f64),
    #[error("adaptive integration failed to reach tolerance {tol} (estimate {estimate})")]
    NoConvergence { tol: f64, estimate: f64 },
    #[error("integration bounds are not ordered: [{0}, {1}]")]
    Bounds(f64, f64),
}

/// One-dimensional quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Nodes and weights from the symmetric tridiagonal Jacobi matrix.
/// `diag`/`off` are the three-term recurrence coefficients, `mu0` the total
/// weight-function mass.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> Rule {
    let n = diag.len();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = diag[i];
    }
    for i in 0..n - 1 {
        t[(i, i + 1)] = off[i];
        t[(i + 1, i)] = off[i];
    }
    let eig = SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Result<Rule, QuadError> {
    if n == 0 {
        return Err(QuadError::Order(n));
    }
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    Ok(golub_welsch(&diag, &off, 2.0))
}

/// Gauss-Legendre rule mapped to [0, 1].
pub fn gauss_legendre_01(n: usize) -> Result<Rule, QuadError> {
    let mut rule = gauss_legendre(n)?;
    for x in &mut rule.nodes {
        *x = 0.5 * (*x + 1.0);
    }
    for w in &mut rule.weights {
        *w *= 0.5;
    }
    Ok(rule)
}

/// Gauss-Jacobi rule for the weighted integral `int_0^1 x^beta f(x) dx`,
/// `beta > -1`. The singular radial factor of the Duffy-transformed element
/// pair integrals is absorbed here, so the integrand handed to the rule is
/// smooth.
pub fn gauss_jacobi_01(n: usize, beta: f64) -> Result<Rule, QuadError> {
    if n == 0 {
        return Err(QuadError::Order(n));
    }
    if beta <= -1.0 {
        return Err(QuadError::JacobiExponent(beta));
    }
    // Weight (1+t)^beta on [-1,1] (alpha = 0), then map t -> x = (1+t)/2.
    let a = 0.0f64;
    let b = beta;
    let n_f = n as f64;
    let _ = n_f;
    let mut diag = Vec::with_capacity(n);
    let mut off2 = Vec::with_capacity(n.saturating_sub(1));
    diag.push((b - a) / (a + b + 2.0));
    for k in 1..n {
        let k = k as f64;
        let denom = (2.0 * k + a + b) * (2.0 * k + a + b + 2.0);
        diag.push((b * b - a * a) / denom);
        let beta_k = if k == 1.0 {
            4.0 * (a + 1.0) * (b + 1.0) / ((a + b + 2.0).powi(2) * (a + b + 3.0))
        } else {
            4.0 * k * (k + a) * (k + b) * (k + a + b)
                / ((2.0 * k + a + b).powi(2) * (2.0 * k + a + b + 1.0) * (2.0 * k + a + b - 1.0))
        };
        off2.push(beta_k.sqrt());
    }
    // mu0 = int_{-1}^{1} (1+t)^b dt = 2^{b+1} / (b+1)   (alpha = 0)
    let mu0 = 2f64.powf(b + 1.0) / (b + 1.0);
    let base = golub_welsch(&diag, &off2, mu0);
    // x = (1+t)/2, and int_0^1 x^b f dx = 2^{-b-1} int (1+t)^b f((1+t)/2) dt.
    let scale = 2f64.powf(-b - 1.0);
    Ok(Rule {
        nodes: base.nodes.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        weights: base.weights.iter().map(|w| w * scale).collect(),
    })
}

/// Quadrature point on the reference triangle {u1 >= 0, u2 >= 0, u1+u2 <= 1}.
#[derive(Debug, Clone, Copy)]
pub struct TrianglePoint {
    pub u1: f64,
    pub u2: f64,
    pub w: f64,
}

/// Tensor Gauss rule collapsed onto the reference triangle; weights sum to
/// the reference area 1/2.
pub fn triangle_rule(n: usize) -> Result<Vec<TrianglePoint>, QuadError> {
    let g = gauss_legendre_01(n)?;
    let mut pts = Vec::with_capacity(n * n);
    for (&q1, &w1) in g.nodes.iter().zip(&g.weights) {
        for (&q2, &w2) in g.nodes.iter().zip(&g.weights) {
            pts.push(TrianglePoint {
                u1: q1,
                u2: q2 * (1.0 - q1),
                w: w1 * w2 * (1.0 - q1),
            });
        }
    }
    Ok(pts)
}

/// Adaptive Simpson integration with an absolute tolerance.
pub fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<f64, QuadError> {
    if !(a <= b) {
        return Err(QuadError::Bounds(a, b));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let (value, converged) = simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth);
    if converged {
        Ok(value)
    } else {
        Err(QuadError::NoConvergence {
            tol,
            estimate: value,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> (f64, bool) {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol || !delta.is_finite() {
        return (left + right + delta / 15.0, delta.is_finite());
    }
    if depth == 0 {
        return (left + right + delta / 15.0, false);
    }
    let (lv, lc) = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1);
    let (rv, rc) = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
    (lv + rv, lc && rc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(6).unwrap();
        // degree 11 is exact for 6 nodes
        for k in 0..=11u32 {
            let exact = if k % 2 == 0 {
                2.0 / (k as f64 + 1.0)
            } else {
                0.0
            };
            let got = rule.apply(|x| x.powi(k as i32));
            assert!(
                (got - exact).abs() < 1e-13,
                "degree {k}: got {got}, want {exact}"
            );
        }
    }

    #[test]
    fn jacobi_matches_monomial_moments() {
        for &beta in &[-0.5, -0.2, 0.0, 0.3, 0.5, 1.0, 1.7] {
            let rule = gauss_jacobi_01(8, beta).unwrap();
            for k in 0..=10u32 {
                let exact = 1.0 / (beta + k as f64 + 1.0);
                let got = rule.apply(|x| x.powi(k as i32));
                assert_relative_eq!(got, exact, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_zero_exponent_is_legendre() {
        let gj = gauss_jacobi_01(5, 0.0).unwrap();
        let gl = gauss_legendre_01(5).unwrap();
        for i in 0..5 {
            assert_relative_eq!(gj.nodes[i], gl.nodes[i], epsilon = 1e-12);
            assert_relative_eq!(gj.weights[i], gl.weights[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn triangle_rule_total_weight_is_half() {
        let pts = triangle_rule(4).unwrap();
        let total: f64 = pts.iter().map(|p| p.w).sum();
        assert_relative_eq!(total, 0.5, epsilon = 1e-14);
        // integrate u1 over the simplex: 1/6
        let m1: f64 = pts.iter().map(|p| p.w * p.u1).sum();
        assert_relative_eq!(m1, 1.0 / 6.0, epsilon = 1e-13);
    }

    #[test]
    fn simpson_on_smooth_integrand() {
        let v = adaptive_simpson(&|x: f64| (3.0 * x).sin(), 0.0, 1.0, 1e-12, 40).unwrap();
        let exact = (1.0 - (3.0f64).cos()) / 3.0;
        assert_relative_eq!(v, exact, epsilon = 1e-11);
    }

    #[test]
    fn simpson_rejects_bad_bounds() {
        assert!(adaptive_simpson(&|x| x, 1.0, 0.0, 1e-10, 10).is_err());
    }

    #[test]
    fn order_zero_rejected() {
        assert!(gauss_legendre(0).is_err());
        assert!(gauss_jacobi_01(0, 0.5).is_err());
        assert!(matches!(
            gauss_jacobi_01(4, -1.0),
            Err(QuadError::JacobiExponent(_))
        ));
    }
}
