//! Backward-Euler evolution family on the combined measure: one linear solve
//! per step with the energy form frozen at the interval endpoint. The family
//! is contractive on every lp(m) space (checked, not assumed), preserves
//! constants up to the boundary potential, and for autonomous coefficients a
//! spectral route through the (E, M) pencil exposes the heat semigroup for
//! decay-rate fits and fractional-power bounds.

use crate::assembly::{AssemblyError, Discretization};
use crate::norms::{self, NormError};
use nalgebra::{DMatrix, DVector, Dyn};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("time grid needs t_end > t0 and at least one step")]
    Grid,
    #[error("mass + dt*energy matrix is not positive definite at node {node}")]
    Factorization { node: usize },
    #[error(
        "spectral fit window [{lo:.3e}, {hi:.3e}] spans {decades:.2} decades, need at least 0.5"
    )]
    WindowTooNarrow { lo: f64, hi: f64, decades: f64 },
    #[error("decay fit needs at least two points")]
    FitDegenerate,
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// Uniform grid on [t0, t_end] with `steps` backward-Euler intervals.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self, EvolutionError> {
        if !(t_end > t0) || steps == 0 {
            return Err(EvolutionError::Grid);
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }
}

/// Discrete evolution family U_h(t_j, t_i): the composition of backward-Euler
/// steps (M + dt E(t_{k+1})) u_{k+1} = M u_k for k in [i, j).
pub struct EvolutionFamily<'a> {
    pub disc: &'a Discretization,
    pub grid: TimeGrid,
    pub m: DVector<f64>,
    factors: Vec<nalgebra::linalg::Cholesky<f64, Dyn>>,
    autonomous: bool,
}

impl<'a> EvolutionFamily<'a> {
    pub fn build(disc: &'a Discretization, grid: TimeGrid) -> Result<Self, EvolutionError> {
        let dt = grid.dt();
        let m = disc.measure.m.clone();
        let autonomous = disc.coeffs.is_autonomous();
        let count = if autonomous { 1 } else { grid.steps };
        let mut factors = Vec::with_capacity(count);
        for k in 0..count {
            let t_next = grid.node(k + 1);
            let mut a = disc.snapshot(t_next)?.e_matrix() * dt;
            for i in 0..a.nrows() {
                a[(i, i)] += m[i];
            }
            let chol = nalgebra::linalg::Cholesky::new(a)
                .ok_or(EvolutionError::Factorization { node: k + 1 })?;
            factors.push(chol);
        }
        Ok(EvolutionFamily {
            disc,
            grid,
            m,
            factors,
            autonomous,
        })
    }

    fn factor(&self, k: usize) -> &nalgebra::linalg::Cholesky<f64, Dyn> {
        if self.autonomous {
            &self.factors[0]
        } else {
            &self.factors[k]
        }
    }

    /// One step from node k to node k+1.
    pub fn step(&self, k: usize, u: &DVector<f64>) -> DVector<f64> {
        let rhs = u.component_mul(&self.m);
        self.factor(k).solve(&rhs)
    }

    /// U_h(t_to, t_from) applied to u; from <= to are node indices.
    pub fn propagate(&self, from: usize, to: usize, u: &DVector<f64>) -> DVector<f64> {
        assert!(from <= to && to <= self.grid.steps);
        let mut v = u.clone();
        for k in from..to {
            v = self.step(k, &v);
        }
        v
    }

    /// Dense matrix of one step (column-by-column solves).
    pub fn step_matrix(&self, k: usize) -> DMatrix<f64> {
        let n = self.m.len();
        let mut p = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            let col = self.step(k, &e);
            p.set_column(j, &col);
            e[j] = 0.0;
        }
        p
    }

    pub fn n_distinct_factors(&self) -> usize {
        self.factors.len()
    }
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub max_l1: f64,
    pub max_linf: f64,
    pub max_l2: f64,
    pub steps_checked: usize,
}

/// Operator norms of every distinct step matrix on l1(m), linf, l2(m).
pub fn contraction_check(family: &EvolutionFamily) -> Result<ContractionReport, EvolutionError> {
    let distinct = if family.autonomous {
        1
    } else {
        family.grid.steps
    };
    let mut max_l1: f64 = 0.0;
    let mut max_linf: f64 = 0.0;
    let mut max_l2: f64 = 0.0;
    for k in 0..distinct {
        let p = family.step_matrix(k);
        max_l1 = max_l1.max(norms::op_norm_1_to_1(&p, &family.m));
        max_linf = max_linf.max(norms::op_norm_inf_to_inf(&p));
        max_l2 = max_l2.max(norms::op_norm_2_to_2(&p, &family.m));
    }
    Ok(ContractionReport {
        max_l1,
        max_linf,
        max_l2,
        steps_checked: distinct,
    })
}

#[derive(Debug, Clone)]
pub struct PositivityReport {
    /// max over samples of (-min entry along the trajectory) / ||phi||_inf,
    /// clamped at zero.
    pub worst_undershoot: f64,
    pub samples: usize,
}

/// Evolve random nonnegative data and record the worst relative undershoot
/// along whole trajectories.
pub fn positivity_check(
    family: &EvolutionFamily,
    samples: usize,
    rng: &mut impl Rng,
) -> PositivityReport {
    let n = family.m.len();
    let mut worst = 0.0f64;
    for k in 0..samples {
        let phi = if k % 2 == 0 {
            DVector::from_fn(n, |_, _| rng.gen::<f64>())
        } else {
            // sparse spikes stress the positivity harder than dense data
            let mut v = DVector::zeros(n);
            for _ in 0..(n / 8).max(1) {
                v[rng.gen_range(0..n)] = rng.gen::<f64>() + 0.5;
            }
            v
        };
        let sup = phi.amax();
        let mut u = phi;
        for step in 0..family.grid.steps {
            u = family.step(step, &u);
            let min = u.min();
            if min < 0.0 {
                worst = worst.max(-min / sup);
            }
        }
    }
    PositivityReport {
        worst_undershoot: worst,
        samples,
    }
}

/// Eigen-decomposition of the pencil (E(t), diag m): E w = lambda m w with
/// modes m-orthonormal. Exposes the heat semigroup exp(-t M^{-1} E).
pub struct Spectrum {
    pub lambda: DVector<f64>,
    pub modes: DMatrix<f64>,
    pub m: DVector<f64>,
}

pub fn spectrum_at(disc: &Discretization, t: f64) -> Result<Spectrum, EvolutionError> {
    let e = disc.snapshot(t)?.e_matrix();
    let mass = DMatrix::from_diagonal(&disc.measure.m);
    let (lambda, modes) = norms::pencil_eigenpairs(&e, &mass)?;
    Ok(Spectrum {
        lambda,
        modes,
        m: disc.measure.m.clone(),
    })
}

impl Spectrum {
    /// exp(-tA) as a dense matrix: W exp(-t Lambda) W^T diag(m).
    pub fn heat_matrix(&self, t: f64) -> DMatrix<f64> {
        let n = self.m.len();
        let mut core = self.modes.clone();
        for k in 0..n {
            let decay = (-t * self.lambda[k]).exp();
            for i in 0..n {
                core[(i, k)] *= decay;
            }
        }
        let mut right = self.modes.transpose();
        for j in 0..n {
            for k in 0..n {
                right[(k, j)] *= self.m[j];
            }
        }
        core * right
    }

    /// Operator norm l1(m) -> linf of exp(-tA): the measure weights cancel,
    /// leaving the max abs entry of W exp(-t Lambda) W^T.
    pub fn norm_one_to_sup(&self, t: f64) -> f64 {
        let n = self.m.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.modes[(i, k)] * (-t * self.lambda[k]).exp() * self.modes[(j, k)];
                }
                worst = worst.max(acc.abs());
            }
        }
        worst
    }

    /// Resolved decay window from the spectrum: saturation ends near
    /// 1/lambda_max, exponential takeover starts near 1/lambda_min.
    pub fn fit_window(&self) -> Result<(f64, f64), EvolutionError> {
        let lambda_max = self.lambda[self.lambda.len() - 1];
        let lambda_min = self.lambda[0].max(1e-300);
        let lo = 4.0 / lambda_max;
        let hi = 0.5 / lambda_min;
        let decades = (hi / lo).log10();
        if decades < 0.5 {
            return Err(EvolutionError::WindowTooNarrow { lo, hi, decades });
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone)]
pub struct DecayFit {
    /// Fitted power: norm(t) ~ prefactor * t^(-exponent).
    pub exponent: f64,
    pub prefactor: f64,
    pub window: (f64, f64),
    pub points: usize,
    /// max |log residual| of the fit
    pub max_log_residual: f64,
}

fn log_log_fit(ts: &[f64], values: &[f64], window: (f64, f64)) -> Result<DecayFit, EvolutionError> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&t, &v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(EvolutionError::FitDegenerate);
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let max_resid = pts
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).abs())
        .fold(0.0f64, f64::max);
    Ok(DecayFit {
        exponent: -slope,
        prefactor: intercept.exp(),
        window,
        points: pts.len(),
        max_log_residual: max_resid,
    })
}

fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Fit the ultracontractive decay ||exp(-tA)||_{1,m -> inf} ~ t^{-lambda/2}
/// over the spectrum-resolved window.
pub fn fit_ultracontractivity(spec: &Spectrum, points: usize) -> Result<DecayFit, EvolutionError> {
    let window = spec.fit_window()?;
    fit_ultracontractivity_in(spec, window, points)
}

/// Same fit over a caller-chosen window.
pub fn fit_ultracontractivity_in(
    spec: &Spectrum,
    window: (f64, f64),
    points: usize,
) -> Result<DecayFit, EvolutionError> {
    let ts = geometric_grid(window.0, window.1, points.max(2));
    let vals: Vec<f64> = ts.iter().map(|&t| spec.norm_one_to_sup(t)).collect();
    log_log_fit(&ts, &vals, window)
}

/// Fit the smoothing decay ||exp(-tA)||_{2,m -> 2p,m} ~ t^{-a}.
pub fn fit_smoothing(
    spec: &Spectrum,
    p: f64,
    points: usize,
    rng: &mut impl Rng,
) -> Result<DecayFit, EvolutionError> {
    let window = spec.fit_window()?;
    fit_smoothing_in(spec, p, window, points, rng)
}

/// Same fit over a caller-chosen window.
pub fn fit_smoothing_in(
    spec: &Spectrum,
    p: f64,
    window: (f64, f64),
    points: usize,
    rng: &mut impl Rng,
) -> Result<DecayFit, EvolutionError> {
    let ts = geometric_grid(window.0, window.1, points.max(2));
    let mut vals = Vec::with_capacity(ts.len());
    for &t in &ts {
        let h = spec.heat_matrix(t);
        let norm = norms::op_norm_q_to_r(&h, &spec.m, 2.0, 2.0 * p, 4, 200, rng)?;
        vals.push(norm);
    }
    log_log_fit(&ts, &vals, window)
}

/// sup_t t^theta ||A^theta exp(-tA)||_{2,m}: by the spectral theorem this is
/// sup over a t-grid of max_k (t lambda_k)^theta exp(-t lambda_k). The grid
/// includes every exact maximizer t = theta / lambda_k, so the sup attains
/// the scalar envelope theta^theta e^{-theta} to rounding.
pub fn fractional_power_envelope(spec: &Spectrum, theta: f64, extra_points: usize) -> f64 {
    let window = (
        0.01 / spec.lambda[spec.lambda.len() - 1],
        10.0 / spec.lambda[0].max(1e-300),
    );
    let mut ts = geometric_grid(window.0, window.1, extra_points.max(2));
    for k in 0..spec.lambda.len() {
        if spec.lambda[k] > 0.0 {
            ts.push(theta / spec.lambda[k]);
        }
    }
    let mut sup = 0.0f64;
    for &t in &ts {
        let mut best = 0.0f64;
        for k in 0..spec.lambda.len() {
            let x = t * spec.lambda[k];
            if x > 0.0 {
                best = best.max(x.powf(theta) * (-x).exp());
            }
        }
        sup = sup.max(best);
    }
    sup
}
