//! Weighted sequence norms and operator-norm estimators. Nodal fields are
//! measured in lumped ell^p(m) norms so that every norm here is a quadrature
//! rule for the corresponding Lebesgue norm over bulk + boundary.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NormError {
    #[error("exponent must satisfy p >= 1 (or infinity), got {0}")]
    BadExponent(f64),
    #[error("weight matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("eigensolve failed to converge")]
    EigenFailure,
}

/// ell^p(m) norm; `p = f64::INFINITY` gives the max norm.
pub fn lp_norm(u: &DVector<f64>, m: &DVector<f64>, p: f64) -> f64 {
    if p == f64::INFINITY {
        return u.amax();
    }
    assert!(p >= 1.0, "lp_norm needs p >= 1, got {p}");
    let sum: f64 = u
        .iter()
        .zip(m.iter())
        .map(|(ui, mi)| mi * ui.abs().powf(p))
        .sum();
    sum.powf(1.0 / p)
}

pub fn l2m_inner(u: &DVector<f64>, v: &DVector<f64>, m: &DVector<f64>) -> f64 {
    u.iter()
        .zip(v.iter())
        .zip(m.iter())
        .map(|((ui, vi), mi)| mi * ui * vi)
        .sum()
}

pub fn l2m_norm(u: &DVector<f64>, m: &DVector<f64>) -> f64 {
    l2m_inner(u, u, m).max(0.0).sqrt()
}

pub fn quad_form(a: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    u.dot(&(a * u))
}

/// Conjugate exponent, with 1 and infinity mapped to each other.
pub fn dual_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p == f64::INFINITY {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// Exact ell^1(m) -> ell^1(m) operator norm: max_j sum_i m_i |P_ij| / m_j.
pub fn op_norm_1_to_1(mat: &DMatrix<f64>, m: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..mat.ncols() {
        let col_sum: f64 = (0..mat.nrows()).map(|i| m[i] * mat[(i, j)].abs()).sum();
        worst = worst.max(col_sum / m[j]);
    }
    worst
}

/// Exact ell^inf -> ell^inf operator norm: max absolute row sum.
pub fn op_norm_inf_to_inf(mat: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..mat.nrows() {
        let row_sum: f64 = (0..mat.ncols()).map(|j| mat[(i, j)].abs()).sum();
        worst = worst.max(row_sum);
    }
    worst
}

/// Exact ell^1(m) -> ell^inf operator norm: max_{ij} |P_ij| / m_j
/// (extreme inputs are the scaled coordinate vectors e_j / m_j).
pub fn op_norm_1_to_inf(mat: &DMatrix<f64>, m: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..mat.ncols() {
        for i in 0..mat.nrows() {
            worst = worst.max(mat[(i, j)].abs() / m[j]);
        }
    }
    worst
}

/// Exact ell^2(m) -> ell^2(m) operator norm: largest singular value of the
/// similarity-transformed matrix D^{1/2} P D^{-1/2}.
pub fn op_norm_2_to_2(mat: &DMatrix<f64>, m: &DVector<f64>) -> f64 {
    let n = mat.nrows();
    let mut scaled = mat.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= (m[i] / m[j]).sqrt();
        }
    }
    scaled.singular_values().max()
}

fn dual_vector(y: &DVector<f64>, m: &DVector<f64>, r: f64) -> DVector<f64> {
    // z with <z, y>_m = ||y||_{r,m} and ||z||_{r',m} = 1
    if r == f64::INFINITY {
        let mut best = 0usize;
        for i in 0..y.len() {
            if y[i].abs() > y[best].abs() {
                best = i;
            }
        }
        let mut z = DVector::zeros(y.len());
        z[best] = y[best].signum() / m[best];
        return z;
    }
    let norm = lp_norm(y, m, r);
    if norm == 0.0 {
        return DVector::zeros(y.len());
    }
    DVector::from_fn(y.len(), |i, _| {
        y[i].signum() * (y[i].abs() / norm).powf(r - 1.0)
    })
}

fn q_normalize(g: &DVector<f64>, m: &DVector<f64>, q: f64) -> DVector<f64> {
    // x maximizing <x, g>_m subject to ||x||_{q,m} = 1
    if q == 1.0 {
        let mut best = 0usize;
        for i in 0..g.len() {
            if g[i].abs() > g[best].abs() {
                best = i;
            }
        }
        let mut x = DVector::zeros(g.len());
        x[best] = g[best].signum() / m[best];
        return x;
    }
    let qp = dual_exponent(q);
    let norm = lp_norm(g, m, qp);
    if norm == 0.0 {
        return DVector::zeros(g.len());
    }
    DVector::from_fn(g.len(), |i, _| {
        g[i].signum() * (g[i].abs() / norm).powf(qp - 1.0)
    })
}

/// Lower estimate of the ell^q(m) -> ell^r(m) norm of `mat` by nonlinear
/// power iteration (duality-map ascent) with random restarts. Exact cases
/// (q = r in {1, 2, inf} and q=1, r=inf) have closed forms above; this
/// handles the interpolated pairs such as 2 -> 2p.
pub fn op_norm_q_to_r(
    mat: &DMatrix<f64>,
    m: &DVector<f64>,
    q: f64,
    r: f64,
    restarts: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<f64, NormError> {
    if (q < 1.0 && q != f64::INFINITY) || (r < 1.0 && r != f64::INFINITY) {
        return Err(NormError::BadExponent(q.min(r)));
    }
    let n = mat.ncols();
    let adjoint = |z: &DVector<f64>| -> DVector<f64> {
        // m-adjoint: diag(1/m) P' diag(m)
        let mut w = mat.transpose() * z.component_mul(m);
        for i in 0..n {
            w[i] /= m[i];
        }
        w
    };
    let mut best = 0.0f64;
    // spike starts: the ascent map has flat directions (identity-like
    // operators), so coordinate spikes are seeded explicitly; they are the
    // exact maximizers whenever mass concentration wins
    let spike_budget = n.min(16);
    for restart in 0..restarts + spike_budget {
        let mut x = if restart < spike_budget {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| m[a].partial_cmp(&m[b]).unwrap());
            let mut e = DVector::zeros(n);
            e[order[restart]] = 1.0;
            e
        } else if restart == spike_budget {
            DVector::from_element(n, 1.0)
        } else {
            DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
        };
        let nx = lp_norm(&x, m, q);
        if nx == 0.0 {
            continue;
        }
        x /= nx;
        for _ in 0..iters {
            let y = mat * &x;
            let value = lp_norm(&y, m, r);
            best = best.max(value);
            if value == 0.0 {
                break;
            }
            let z = dual_vector(&y, m, r);
            let g = adjoint(&z);
            let xn = q_normalize(&g, m, q);
            if (&xn - &x).amax() < 1e-13 {
                x = xn;
                break;
            }
            x = xn;
        }
        let y = mat * &x;
        best = best.max(lp_norm(&y, m, r));
    }
    Ok(best)
}

/// Eigenvalues of the symmetric pencil (A, B) with B positive definite,
/// ascending. Reduced to a standard symmetric problem through the Cholesky
/// factor of B.
pub fn pencil_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DVector<f64>, NormError> {
    let chol = b.clone().cholesky().ok_or(NormError::NotPositiveDefinite)?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let mut c = a.clone();
    l.solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    l.solve_lower_triangular_mut(&mut ct);
    let sym = (&ct + ct.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(DVector::from_vec(vals))
}

/// Smallest and largest eigenvalue of the pencil (A, B).
pub fn pencil_extremes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, f64), NormError> {
    let vals = pencil_eigenvalues(a, b)?;
    Ok((vals[0], vals[vals.len() - 1]))
}

/// Full generalized symmetric eigendecomposition of (A, B): pairs
/// (lambda_k, w_k) with A w = lambda B w and w_k' B w_l = delta_{kl}.
pub fn pencil_eigenpairs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), NormError> {
    let chol = b.clone().cholesky().ok_or(NormError::NotPositiveDefinite)?;
    let l = chol.l();
    let mut c = a.clone();
    l.solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    l.solve_lower_triangular_mut(&mut ct);
    let sym = (&ct + ct.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    // back-transform: w = L^{-T} v
    let mut w = eig.eigenvectors.clone();
    l.transpose().solve_upper_triangular_mut(&mut w);
    // sort ascending
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let vals = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        vecs.set_column(k, &w.column(idx));
    }
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn weights3() -> DVector<f64> {
        DVector::from_vec(vec![0.5, 1.0, 2.0])
    }

    #[test]
    fn lp_norms_against_hand_values() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = weights3();
        assert_relative_eq!(lp_norm(&u, &m, 1.0), 0.5 + 2.0 + 1.0, epsilon = 1e-14);
        assert_relative_eq!(
            lp_norm(&u, &m, 2.0),
            (0.5 + 4.0 + 0.5f64).sqrt(),
            epsilon = 1e-14
        );
        assert_relative_eq!(lp_norm(&u, &m, f64::INFINITY), 2.0, epsilon = 1e-14);
        // nesting on a probability-like rescale: ||u||_1 <= ||u||_2 total-mass factor
        let n2 = lp_norm(&u, &m, 2.0);
        let n1 = lp_norm(&u, &m, 1.0);
        assert!(n1 <= n2 * m.sum().sqrt() + 1e-14);
    }

    #[test]
    fn exact_matrix_norms() {
        let m = weights3();
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, -0.2, 0.7, 0.1, 0.0, 0.3, 0.4]);
        // 1->1: weighted column sums over m_j
        let hand_1 = [
            (0.5 * 0.5 + 1.0 * 0.2 + 2.0 * 0.0) / 0.5,
            (0.5 * 0.1 + 1.0 * 0.7 + 2.0 * 0.3) / 1.0,
            (0.5 * 0.0 + 1.0 * 0.1 + 2.0 * 0.4) / 2.0,
        ];
        let expect_1 = hand_1.iter().cloned().fold(0.0f64, f64::max);
        assert_relative_eq!(op_norm_1_to_1(&p, &m), expect_1, epsilon = 1e-14);
        // inf->inf: row abs sums
        assert_relative_eq!(op_norm_inf_to_inf(&p), 1.0, epsilon = 1e-14);
        // 1->inf: max |P_ij|/m_j
        assert_relative_eq!(op_norm_1_to_inf(&p, &m), 0.5 / 0.5, epsilon = 1e-14);
    }

    #[test]
    fn two_norm_matches_power_iteration() {
        let m = weights3();
        let p = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.0, 0.05, 0.8, 0.1, 0.0, 0.1, 0.85]);
        let exact = op_norm_2_to_2(&p, &m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let est = op_norm_q_to_r(&p, &m, 2.0, 2.0, 4, 200, &mut rng).unwrap();
        assert_relative_eq!(est, exact, max_relative = 1e-6);
    }

    #[test]
    fn mixed_norm_identity_matrix() {
        // For the identity, ||u||_{r,m}/||u||_{q,m} with q < r is maximized by
        // a single spike at the smallest weight: sup = m_min^{1/r - 1/q}.
        let m = weights3();
        let id = DMatrix::identity(3, 3);
        let (q, r) = (2.0, 6.0);
        let expect = 0.5f64.powf(1.0 / r - 1.0 / q);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let est = op_norm_q_to_r(&id, &m, q, r, 8, 100, &mut rng).unwrap();
        assert_relative_eq!(est, expect, max_relative = 1e-8);
    }

    #[test]
    fn mixed_norm_never_exceeds_interpolants() {
        // q->r estimate for a substochastic-like matrix stays below the
        // product of the exact endpoint norms (log-convexity sanity).
        let m = weights3();
        let p = DMatrix::from_row_slice(3, 3, &[0.6, 0.2, 0.0, 0.2, 0.5, 0.2, 0.1, 0.2, 0.6]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let est = op_norm_q_to_r(&p, &m, 2.0, f64::INFINITY, 6, 150, &mut rng).unwrap();
        let exact_2 = op_norm_2_to_2(&p, &m);
        let exact_1inf = op_norm_1_to_inf(&p, &m);
        // Riesz-Thorin with theta = 1/2: ||P||_{2->inf} <= sqrt(||P||_{1->inf} ||P||_{inf->inf})
        // is not the sharp pairing; just check the estimate is a lower bound
        // for the crude upper bound max(exact_2, ...) * dim factor.
        assert!(est <= (exact_1inf.max(exact_2) + 1e-12) * 3.0);
        assert!(est > 0.0);
    }

    #[test]
    fn pencil_eigenvalues_hand_case() {
        // A = diag(2, 8), B = diag(1, 4): eigenvalues 2 and 2
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let vals = pencil_eigenvalues(&a, &b).unwrap();
        assert_relative_eq!(vals[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-12);
        // non-PD B rejected
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(pencil_eigenvalues(&a, &bad).is_err());
    }

    #[test]
    fn pencil_eigenpairs_reconstruct() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.2, 0.0, 0.2, 1.5, 0.1, 0.0, 0.1, 1.0]);
        let (vals, vecs) = pencil_eigenpairs(&a, &b).unwrap();
        for k in 0..3 {
            let w = vecs.column(k).clone_owned();
            let lhs = &a * &w;
            let rhs = &b * &w * vals[k];
            assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
            // B-orthonormality
            for l in 0..3 {
                let wl = vecs.column(l).clone_owned();
                let prod = w.dot(&(&b * wl));
                let expect = if k == l { 1.0 } else { 0.0 };
                assert_relative_eq!(prod, expect, epsilon = 1e-10);
            }
        }
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
    }
}
