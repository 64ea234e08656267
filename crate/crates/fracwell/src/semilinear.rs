//! Picard iteration for the semilinear problem built on the discrete
//! evolution family. The iteration lives in a weighted space: plain 2-norm
//! in the measure m, plus a t^b_w weighted 2p-norm that controls the blow-up
//! scale of the nonlinearity near t = 0. A run reports contraction ratios,
//! the fixed-point residual, and whether the iterate escaped the weighted
//! ball, so a caller can distinguish global decay from finite-time loss.

use crate::evolution::{EvolutionError, EvolutionFamily, TimeGrid};
use crate::norms;
use crate::quad::{self, QuadError};
use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemilinearError {
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("reference solve blew up at node {node}: sup norm {norm:.3e}")]
    BlowUp { node: usize, norm: f64 },
    #[error("nonlinearity exponent must satisfy p > 1, got {0}")]
    Exponent(f64),
    #[error("small-data condition needs a < 1 and p*b_w < 1, got a={a}, p*b_w={pbw}")]
    SmallDataExponents { a: f64, pbw: f64 },
}

/// Odd power nonlinearity f(r) = |r|^(p-1) r with local Lipschitz scale
/// l(r) = p r^(p-1).
#[derive(Debug, Clone, Copy)]
pub struct Nonlinearity {
    pub p: f64,
}

impl Nonlinearity {
    pub fn power(p: f64) -> Result<Self, SemilinearError> {
        if !(p > 1.0) {
            return Err(SemilinearError::Exponent(p));
        }
        Ok(Nonlinearity { p })
    }

    pub fn eval(&self, r: f64) -> f64 {
        r.abs().powf(self.p - 1.0) * r
    }

    pub fn lipschitz_scale(&self, r: f64) -> f64 {
        self.p * r.abs().powf(self.p - 1.0)
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|r| self.eval(r))
    }
}

/// max over sampled pairs of |f(u)-f(v)| / (l(max(|u|,|v|)) |u-v|);
/// the local Lipschitz hypothesis requires this to stay at or below 1.
pub fn lipschitz_sample_ratio(f: &Nonlinearity, samples: usize, rng: &mut impl Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let u = 4.0 * rng.gen::<f64>() - 2.0;
        let v = 4.0 * rng.gen::<f64>() - 2.0;
        if (u - v).abs() < 1e-12 {
            continue;
        }
        let scale = f.lipschitz_scale(u.abs().max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        let ratio = (f.eval(u) - f.eval(v)).abs() / (scale * (u - v).abs());
        worst = worst.max(ratio);
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub max_iterations: usize,
    /// stop when the weighted increment falls below this
    pub tolerance: f64,
    /// weighted-ball radius kappa; iterate escaping 2*kappa stops the run
    pub kappa: f64,
    /// time weight exponent b_w
    pub b_w: f64,
    /// the weighted norm is the (2p)-norm in m
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct PicardReport {
    pub converged: bool,
    pub iterations: usize,
    /// increment ratios d_{k+1}/d_k, one per iteration after the first
    pub ratios: Vec<f64>,
    pub final_increment: f64,
    /// weighted distance between the returned iterate and one more sweep
    pub residual: f64,
    /// sup over nodes of t^b_w * ||u||_{2p,m} for the returned iterate
    pub weighted_sup: f64,
    /// node index where the iterate first escaped the 2*kappa ball
    pub left_ball_at: Option<usize>,
}

pub struct PicardRun {
    /// iterate values at every time node, length steps + 1
    pub nodes: Vec<DVector<f64>>,
    pub report: PicardReport,
}

fn weighted_distance(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    grid: &TimeGrid,
    m: &DVector<f64>,
    opts: &PicardOptions,
) -> f64 {
    let mut flat = 0.0f64;
    let mut weighted = 0.0f64;
    for n in 0..a.len() {
        let d = &a[n] - &b[n];
        flat = flat.max(norms::lp_norm(&d, m, 2.0));
        let w = grid.node(n).powf(opts.b_w);
        if w > 0.0 {
            weighted = weighted.max(w * norms::lp_norm(&d, m, 2.0 * opts.p));
        }
    }
    flat.max(weighted)
}

fn weighted_sup(
    a: &[DVector<f64>],
    grid: &TimeGrid,
    m: &DVector<f64>,
    opts: &PicardOptions,
) -> (f64, usize) {
    let mut sup = 0.0f64;
    let mut arg = 0;
    for n in 0..a.len() {
        let w = grid.node(n).powf(opts.b_w);
        if w > 0.0 {
            let v = w * norms::lp_norm(&a[n], m, 2.0 * opts.p);
            if v > sup {
                sup = v;
                arg = n;
            }
        }
    }
    (sup, arg)
}

fn sweep(
    family: &EvolutionFamily,
    phi: &DVector<f64>,
    f: &Nonlinearity,
    source_iterate: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let steps = family.grid.steps;
    let dt = family.grid.dt();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(phi.clone());
    for n in 0..steps {
        let mut next = family.step(n, &out[n]);
        next += f.apply(&source_iterate[n + 1]) * dt;
        out.push(next);
    }
    out
}

/// Picard iteration for u = U phi + dt-sum of propagated nonlinear terms.
/// Starts from the linear evolution and sweeps until the weighted increment
/// is below tolerance, the iteration count runs out, or the iterate escapes
/// the weighted ball of radius 2*kappa.
pub fn picard_solve(
    family: &EvolutionFamily,
    phi: &DVector<f64>,
    f: &Nonlinearity,
    opts: &PicardOptions,
) -> PicardRun {
    let grid = &family.grid;
    let m = &family.m;
    let zero_sources: Vec<DVector<f64>> = (0..=grid.steps)
        .map(|_| DVector::zeros(phi.len()))
        .collect();
    let mut current = sweep(family, phi, f, &zero_sources);
    let mut ratios = Vec::new();
    let mut last_increment = f64::INFINITY;
    let mut converged = false;
    let mut left_ball_at = None;
    let mut iterations = 0;
    for _ in 0..opts.max_iterations {
        iterations += 1;
        let next = sweep(family, phi, f, &current);
        let inc = weighted_distance(&next, &current, grid, m, opts);
        if last_increment.is_finite() && last_increment > 0.0 {
            ratios.push(inc / last_increment);
        }
        last_increment = inc;
        current = next;
        let (sup, arg) = weighted_sup(&current, grid, m, opts);
        if sup >= 2.0 * opts.kappa {
            left_ball_at = Some(arg);
            break;
        }
        if inc < opts.tolerance {
            converged = true;
            break;
        }
    }
    let one_more = sweep(family, phi, f, &current);
    let residual = weighted_distance(&one_more, &current, grid, m, opts);
    let (sup, _) = weighted_sup(&current, grid, m, opts);
    PicardRun {
        report: PicardReport {
            converged,
            iterations,
            ratios,
            final_increment: last_increment,
            residual,
            weighted_sup: sup,
            left_ball_at,
        },
        nodes: current,
    }
}

/// Implicit-linear, explicit-nonlinear reference march:
/// (M + dt E) u_{n+1} = M (u_n + dt f(u_n)). Guards against blow-up.
pub fn imex_solve(
    family: &EvolutionFamily,
    phi: &DVector<f64>,
    f: &Nonlinearity,
    guard: f64,
) -> Result<Vec<DVector<f64>>, SemilinearError> {
    let dt = family.grid.dt();
    let mut out = Vec::with_capacity(family.grid.steps + 1);
    out.push(phi.clone());
    for n in 0..family.grid.steps {
        let fed = &out[n] + f.apply(&out[n]) * dt;
        let next = family.step(n, &fed);
        let sup = next.amax();
        if !sup.is_finite() || sup > guard {
            return Err(SemilinearError::BlowUp {
                node: n + 1,
                norm: sup,
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// l2(m) distance at the final node between two trajectories, with the
/// coarse one compared at matching times (fine grid must refine the coarse).
pub fn terminal_gap(a: &[DVector<f64>], b: &[DVector<f64>], m: &DVector<f64>) -> f64 {
    let d = &a[a.len() - 1] - &b[b.len() - 1];
    norms::lp_norm(&d, m, 2.0)
}

/// Beta function B(x, y) for x, y in (0, 1], by splitting the integral at
/// one half and absorbing each endpoint singularity into a Jacobi weight.
pub fn beta_via_quadrature(x: f64, y: f64, order: usize) -> Result<f64, QuadError> {
    let left = quad::gauss_jacobi_01(order, x - 1.0)?;
    let mut acc = 0.0;
    for (u, w) in left.nodes.iter().zip(&left.weights) {
        acc += w * (1.0 - u / 2.0).powf(y - 1.0);
    }
    let mut total = acc * 0.5f64.powf(x);
    let right = quad::gauss_jacobi_01(order, y - 1.0)?;
    acc = 0.0;
    for (u, w) in right.nodes.iter().zip(&right.weights) {
        acc += w * (1.0 - u / 2.0).powf(x - 1.0);
    }
    total += acc * 0.5f64.powf(y);
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct SmallDataReport {
    /// B(1-a, 1-p*b_w) via quadrature
    pub beta_value: f64,
    /// left side of the smallness condition
    pub lhs: f64,
    pub pass: bool,
}

/// Global small-data condition: with smoothing constant Lambda, contraction
/// constant one, datum size epsilon = ||phi||_{2,m}, the condition
/// 2^((1-a+b_w)/b_w) * Lambda * B(1-a, 1-p b_w) * epsilon^((1-a)/b_w) < 1
/// guarantees the weighted iterate stays in the small ball for all time.
pub fn small_data_condition(
    a: f64,
    b_w: f64,
    p: f64,
    smoothing_constant: f64,
    epsilon: f64,
) -> Result<SmallDataReport, SemilinearError> {
    let pbw = p * b_w;
    if !(a < 1.0) || !(pbw < 1.0) {
        return Err(SemilinearError::SmallDataExponents { a, pbw });
    }
    let beta_value = beta_via_quadrature(1.0 - a, 1.0 - pbw, 48)?;
    let lhs = 2.0f64.powf((1.0 - a + b_w) / b_w)
        * smoothing_constant
        * beta_value
        * epsilon.powf((1.0 - a) / b_w);
    Ok(SmallDataReport {
        beta_value,
        pass: lhs < 1.0,
        lhs,
    })
}
