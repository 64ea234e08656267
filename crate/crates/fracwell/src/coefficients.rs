//! Problem data: the fractional normalization constants, the derived exponent
//! pack, time-dependent kernel/potential coefficients with declared bounds,
//! and sampled validation of the standing hypotheses.

pub mod expr;

use crate::geometry::{BoundaryMesh, Mesh};
use crate::quad::adaptive_simpson;
use expr::{Expr, ExprError, Var, Vars};
use nalgebra::Point2;
use rand::Rng;
use statrs::function::gamma::gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExponentError {
    #[error("order constraint s in (0,1) violated: s = {0}")]
    OrderRange(f64),
    #[error("normalization is singular at s = 1/2 (2s - 1 = 0)")]
    SingularNormalization,
    #[error("hypothesis N - d < 2s violated: {n} - {d} >= 2*{s}")]
    TraceLowerBound { n: u32, d: f64, s: f64 },
    #[error("hypothesis 2s < N violated: 2*{s} >= {n}")]
    TraceUpperBound { n: u32, s: f64 },
    #[error("boundary dimension constraint 0 < d < N violated: d = {0}")]
    BoundaryDimension(f64),
    #[error("growth exponent constraint p > 1 violated: p = {0}")]
    GrowthRange(f64),
    #[error("default weight requires p > 1 + 4/lambda: p = {p}, 1 + 4/lambda = {threshold}")]
    WeightInfeasible { p: f64, threshold: f64 },
    #[error("weight constraint 0 < b_w < a violated: b_w = {b_w}, a = {a}")]
    WeightRange { b_w: f64, a: f64 },
    #[error("smallness radius must be positive: kappa = {0}")]
    KappaRange(f64),
    #[error("horizon must be positive: T = {0}")]
    HorizonRange(f64),
    #[error("time regularity constraint eta in (0,1] violated: eta = {0}")]
    EtaRange(f64),
    #[error("quadrature for the conormal constant did not converge")]
    ConormalQuadrature,
}

/// C_{N,s} = s 4^s Gamma((N+2s)/2) / (pi^{N/2} Gamma(1-s)).
pub fn compute_c_ns(n: u32, s: f64) -> Result<f64, ExponentError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(ExponentError::OrderRange(s));
    }
    let num = s * 4f64.powf(s) * gamma((n as f64 + 2.0 * s) / 2.0);
    let den = std::f64::consts::PI.powf(n as f64 / 2.0) * gamma(1.0 - s);
    Ok(num / den)
}

/// Conormal normalization C_s = C_{1,s}/(2s(2s-1)) * I(s) with
/// I(s) = int_0^inf (|z-1|^{1-2s} - max(z,1)^{1-2s}) / z^{2-2s} dz.
///
/// The integrand has a kink at z = 1 (an integrable power singularity for
/// s > 1/2), so the quadrature splits there and flattens each endpoint with
/// a power substitution before handing the piece to the adaptive rule.
pub fn compute_c_s(s: f64) -> Result<f64, ExponentError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(ExponentError::OrderRange(s));
    }
    if (s - 0.5).abs() < 1e-14 {
        return Err(ExponentError::SingularNormalization);
    }
    let e = 1.0 - 2.0 * s;
    let tol = 2.5e-13;
    let depth = 48;

    // z in (0, 1/2]: ((1-z)^e - 1) z^{2s-2}, vanishing like z^{2s-1} at 0.
    // Substitute z = 0.5 v^kappa to push enough derivatives to zero.
    let kappa = (2.0 / s).ceil() + 3.0;
    let piece1 = adaptive_simpson(
        &|v: f64| {
            if v <= 0.0 {
                return 0.0;
            }
            let z = 0.5 * v.powf(kappa);
            let num = ((e) * (-z).ln_1p()).exp_m1();
            num * z.powf(2.0 * s - 2.0) * 0.5 * kappa * v.powf(kappa - 1.0)
        },
        0.0,
        1.0,
        tol,
        depth,
    )
    .map_err(|_| ExponentError::ConormalQuadrature)?;

    // z in [1/2, 1): substitute 1 - z = 0.5 w^gamma to flatten the kink.
    let gamma_pow = (2.0 / (1.0 - s)).ceil() + 3.0;
    let piece2 = adaptive_simpson(
        &|w: f64| {
            if w <= 0.0 {
                return 0.0;
            }
            let one_minus_z = 0.5 * w.powf(gamma_pow);
            let z = 1.0 - one_minus_z;
            let num = one_minus_z.powf(e) - 1.0;
            num * z.powf(2.0 * s - 2.0) * 0.5 * gamma_pow * w.powf(gamma_pow - 1.0)
        },
        0.0,
        1.0,
        tol,
        depth,
    )
    .map_err(|_| ExponentError::ConormalQuadrature)?;

    // z in (1, 2]: substitute z - 1 = w^gamma.
    let piece3 = adaptive_simpson(
        &|w: f64| {
            if w <= 0.0 {
                return 0.0;
            }
            let zm1 = w.powf(gamma_pow);
            let z = 1.0 + zm1;
            let num = zm1.powf(e) - z.powf(e);
            num * z.powf(2.0 * s - 2.0) * gamma_pow * w.powf(gamma_pow - 1.0)
        },
        0.0,
        1.0,
        tol,
        depth,
    )
    .map_err(|_| ExponentError::ConormalQuadrature)?;

    // z in [2, inf): z = 1/v collapses the tail to ((1-v)^e - 1)/v on (0, 1/2].
    let piece4 = adaptive_simpson(
        &|v: f64| {
            if v <= 0.0 {
                // limit value (2s - 1)
                return -e;
            }
            (e * (-v).ln_1p()).exp_m1() / v
        },
        0.0,
        0.5,
        tol,
        depth,
    )
    .map_err(|_| ExponentError::ConormalQuadrature)?;

    let integral = piece1 + piece2 + piece3 + piece4;
    let c_1s = compute_c_ns(1, s)?;
    Ok(c_1s / (2.0 * s * (2.0 * s - 1.0)) * integral)
}

/// Inputs from which every derived exponent follows.
#[derive(Debug, Clone, Copy)]
pub struct ExponentInputs {
    pub n: u32,
    pub d: f64,
    pub s: f64,
    pub p: f64,
    /// Weight exponent; `None` selects the power-nonlinearity default
    /// 1/(p-1) - lambda/(4p).
    pub b_w: Option<f64>,
    pub kappa: f64,
    pub t_horizon: f64,
    pub eta: f64,
}

impl ExponentInputs {
    pub fn default_square() -> Self {
        ExponentInputs {
            n: 2,
            d: 1.0,
            s: 0.75,
            p: 3.0,
            b_w: None,
            kappa: 0.1,
            t_horizon: 1.0,
            eta: 0.5,
        }
    }
}

/// Derived exponents. Construction validates every constraint and names the
/// violated inequality on failure; soft side conditions become warnings.
#[derive(Debug, Clone)]
pub struct ExponentPack {
    pub n: u32,
    pub d: f64,
    pub s: f64,
    pub p: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub a: f64,
    pub b_w: f64,
    pub q: f64,
    pub kappa: f64,
    pub t_horizon: f64,
    pub eta: f64,
    pub warnings: Vec<String>,
}

/// Default weight exponent for the power nonlinearity: 1/(p-1) - lambda/(4p).
pub fn default_growth_exponent(p: f64, lambda: f64) -> Result<f64, ExponentError> {
    if p <= 1.0 {
        return Err(ExponentError::GrowthRange(p));
    }
    let threshold = 1.0 + 4.0 / lambda;
    if p <= threshold {
        return Err(ExponentError::WeightInfeasible { p, threshold });
    }
    Ok(1.0 / (p - 1.0) - lambda / (4.0 * p))
}

pub fn exponents(inputs: &ExponentInputs) -> Result<ExponentPack, ExponentError> {
    let ExponentInputs {
        n,
        d,
        s,
        p,
        b_w,
        kappa,
        t_horizon,
        eta,
    } = *inputs;
    if !(s > 0.0 && s < 1.0) {
        return Err(ExponentError::OrderRange(s));
    }
    if !(d > 0.0 && d < n as f64) {
        return Err(ExponentError::BoundaryDimension(d));
    }
    if n as f64 - d >= 2.0 * s {
        return Err(ExponentError::TraceLowerBound { n, d, s });
    }
    if 2.0 * s >= n as f64 {
        return Err(ExponentError::TraceUpperBound { n, s });
    }
    if p <= 1.0 {
        return Err(ExponentError::GrowthRange(p));
    }
    if kappa <= 0.0 {
        return Err(ExponentError::KappaRange(kappa));
    }
    if t_horizon <= 0.0 {
        return Err(ExponentError::HorizonRange(t_horizon));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(ExponentError::EtaRange(eta));
    }
    let alpha = s - (n as f64 - d) / 2.0;
    let lambda = 2.0 * d / (d - n as f64 + 2.0 * s);
    let a = (lambda / 4.0) * (1.0 - 1.0 / p);
    let mut warnings = Vec::new();
    if a >= 1.0 {
        warnings.push(format!(
            "interpolation exponent a = {a} is not in (0,1); the side condition N - 2s <= d/2 \
             fails ({} - {} > {})",
            n as f64,
            2.0 * s,
            d / 2.0
        ));
    }
    let b_w = match b_w {
        Some(b) => {
            if !(b > 0.0 && b < a) {
                return Err(ExponentError::WeightRange { b_w: b, a });
            }
            b
        }
        None => {
            let b = default_growth_exponent(p, lambda)?;
            if b >= a {
                return Err(ExponentError::WeightRange { b_w: b, a });
            }
            b
        }
    };
    let q = 2.0 * lambda * p / (lambda + 4.0 * p * b_w);
    Ok(ExponentPack {
        n,
        d,
        s,
        p,
        alpha,
        lambda,
        a,
        b_w,
        q,
        kappa,
        t_horizon,
        eta,
        warnings,
    })
}

#[derive(Debug, Error)]
pub enum CoefficientError {
    #[error("unknown coefficient preset `{0}` (expected constant, sinusoidal, custom)")]
    UnknownPreset(String),
    #[error("coefficient expression: {0}")]
    Expr(#[from] ExprError),
    #[error("custom preset requires kernel, boundary kernel, and potential expressions")]
    MissingExpression,
    #[error("declared bound must be positive: {name} = {value}")]
    BadBound { name: &'static str, value: f64 },
}

/// One scalar coefficient function of (t, x, y) with parsed expression form.
#[derive(Debug, Clone)]
pub struct Coefficient {
    expr: Expr,
    source: String,
}

impl Coefficient {
    pub fn parse(src: &str) -> Result<Self, CoefficientError> {
        Ok(Coefficient {
            expr: Expr::parse(src)?,
            source: src.to_string(),
        })
    }

    pub fn constant(c: f64) -> Self {
        Coefficient {
            expr: Expr::Num(c),
            source: format!("{c}"),
        }
    }

    pub fn eval(&self, t: f64, x: Point2<f64>, y: Point2<f64>) -> f64 {
        self.expr.eval(&Vars {
            t,
            x1: x.x,
            x2: x.y,
            y1: y.x,
            y2: y.y,
        })
    }

    /// Evaluate at a single spatial point (potentials on the boundary).
    pub fn eval_point(&self, t: f64, p: Point2<f64>) -> f64 {
        self.eval(t, p, p)
    }

    pub fn time_dependent(&self) -> bool {
        self.expr.uses(Var::T)
    }

    pub fn space_dependent(&self) -> bool {
        self.expr.uses(Var::X1)
            || self.expr.uses(Var::X2)
            || self.expr.uses(Var::Y1)
            || self.expr.uses(Var::Y2)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Normalization constants attached to a fixed (N, s): the kernel constant
/// C_{N,s} and the conormal constant C_s (1-D boundary normalization).
#[derive(Debug, Clone, Copy)]
pub struct Constants {
    pub c_ns: f64,
    pub c_s: f64,
}

impl Constants {
    pub fn for_pack(pack: &ExponentPack) -> Result<Self, ExponentError> {
        Ok(Constants {
            c_ns: compute_c_ns(pack.n, pack.s)?,
            c_s: compute_c_s(pack.s)?,
        })
    }
}

/// Kernel factors K(t,x,y) and zeta(t,x,y), boundary potential b(t,P), with
/// the declared constants the hypotheses quantify over.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub k: Coefficient,
    pub zeta: Coefficient,
    pub b: Coefficient,
    /// Declared two-sided bounds 0 < k1 <= K <= k2.
    pub k_bounds: (f64, f64),
    pub zeta_bounds: (f64, f64),
    /// Declared floor 0 < b0 <= b and cap b <= b1.
    pub b_bounds: (f64, f64),
    /// Declared Lipschitz-in-t constants (worst over space), one per family.
    pub lipschitz_t: (f64, f64, f64),
    pub preset: String,
}

impl CoefficientSet {
    /// K = 1, zeta = 1, b = 1: the autonomous reference configuration.
    pub fn constant() -> Self {
        CoefficientSet {
            k: Coefficient::constant(1.0),
            zeta: Coefficient::constant(1.0),
            b: Coefficient::constant(1.0),
            k_bounds: (0.5, 1.5),
            zeta_bounds: (0.5, 1.5),
            b_bounds: (0.5, 1.5),
            lipschitz_t: (0.0, 0.0, 0.0),
            preset: "constant".to_string(),
        }
    }

    /// K = 1 + 0.25 sin(t), zeta = 1, b = 1: mildly non-autonomous.
    pub fn sinusoidal() -> Self {
        CoefficientSet {
            k: Coefficient::parse("1 + 0.25 * sin(t)").expect("fixed preset parses"),
            zeta: Coefficient::constant(1.0),
            b: Coefficient::constant(1.0),
            k_bounds: (0.5, 1.5),
            zeta_bounds: (0.5, 1.5),
            b_bounds: (0.5, 1.5),
            lipschitz_t: (0.25, 0.0, 0.0),
            preset: "sinusoidal".to_string(),
        }
    }

    pub fn custom(
        k_src: &str,
        zeta_src: &str,
        b_src: &str,
        k_bounds: (f64, f64),
        zeta_bounds: (f64, f64),
        b_bounds: (f64, f64),
        lipschitz_t: (f64, f64, f64),
    ) -> Result<Self, CoefficientError> {
        for (name, value) in [
            ("k1", k_bounds.0),
            ("zeta1", zeta_bounds.0),
            ("b0", b_bounds.0),
        ] {
            if value <= 0.0 {
                return Err(CoefficientError::BadBound { name, value });
            }
        }
        Ok(CoefficientSet {
            k: Coefficient::parse(k_src)?,
            zeta: Coefficient::parse(zeta_src)?,
            b: Coefficient::parse(b_src)?,
            k_bounds,
            zeta_bounds,
            b_bounds,
            lipschitz_t,
            preset: "custom".to_string(),
        })
    }

    pub fn preset(name: &str) -> Result<Self, CoefficientError> {
        match name {
            "constant" => Ok(Self::constant()),
            "sinusoidal" => Ok(Self::sinusoidal()),
            other => Err(CoefficientError::UnknownPreset(other.to_string())),
        }
    }

    pub fn is_autonomous(&self) -> bool {
        !(self.k.time_dependent() || self.zeta.time_dependent() || self.b.time_dependent())
    }
}

/// One validated hypothesis with its worst sampled value.
#[derive(Debug, Clone)]
pub struct HypothesisCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    pub samples: usize,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn violations(&self) -> Vec<&HypothesisCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Sampled validation of the standing hypotheses: two-sided kernel bounds,
/// kernel symmetry, the strict potential floor, and t-Hoelder continuity with
/// the declared constants. Diagnostic; never errors.
pub fn validate_hypotheses(
    set: &CoefficientSet,
    mesh: &Mesh,
    boundary: &BoundaryMesh,
    pack: &ExponentPack,
    samples: usize,
    rng: &mut impl Rng,
) -> HypothesisReport {
    let t_max = pack.t_horizon;
    let eta = pack.eta;
    let mut bulk_pts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let tri = rng.gen_range(0..mesh.n_triangles());
        let [a, b, c] = mesh.corners(tri);
        let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        bulk_pts.push(Point2::new(
            a.x + r1 * (b.x - a.x) + r2 * (c.x - a.x),
            a.y + r1 * (b.y - a.y) + r2 * (c.y - a.y),
        ));
    }
    let mut bdy_pts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let seg = rng.gen_range(0..boundary.segments.len());
        let [i, j] = boundary.segments[seg];
        let r = rng.gen::<f64>();
        let (a, b) = (boundary.points[i], boundary.points[j]);
        bdy_pts.push(Point2::new(a.x + r * (b.x - a.x), a.y + r * (b.y - a.y)));
    }
    let times: Vec<f64> = (0..16).map(|k| t_max * k as f64 / 15.0).collect();

    let mut checks = Vec::new();

    // two-sided bounds and symmetry for K on bulk pairs
    let (mut k_min, mut k_max, mut k_asym) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    // and for zeta on boundary pairs
    let (mut z_min, mut z_max, mut z_asym) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    let (mut b_min, mut b_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &t in &times {
        for _ in 0..samples / 4 {
            let x = bulk_pts[rng.gen_range(0..bulk_pts.len())];
            let y = bulk_pts[rng.gen_range(0..bulk_pts.len())];
            let v = set.k.eval(t, x, y);
            k_min = k_min.min(v);
            k_max = k_max.max(v);
            k_asym = k_asym.max((v - set.k.eval(t, y, x)).abs());
            let px = bdy_pts[rng.gen_range(0..bdy_pts.len())];
            let py = bdy_pts[rng.gen_range(0..bdy_pts.len())];
            let w = set.zeta.eval(t, px, py);
            z_min = z_min.min(w);
            z_max = z_max.max(w);
            z_asym = z_asym.max((w - set.zeta.eval(t, py, px)).abs());
            let bv = set.b.eval_point(t, px);
            b_min = b_min.min(bv);
            b_max = b_max.max(bv);
        }
    }
    checks.push(HypothesisCheck {
        name: "k1 <= K(t,x,y)".to_string(),
        measured: k_min,
        bound: set.k_bounds.0,
        pass: k_min >= set.k_bounds.0,
    });
    checks.push(HypothesisCheck {
        name: "K(t,x,y) <= k2".to_string(),
        measured: k_max,
        bound: set.k_bounds.1,
        pass: k_max <= set.k_bounds.1,
    });
    checks.push(HypothesisCheck {
        name: "K(t,x,y) = K(t,y,x)".to_string(),
        measured: k_asym,
        bound: 1e-12,
        pass: k_asym <= 1e-12,
    });
    checks.push(HypothesisCheck {
        name: "zeta1 <= zeta(t,x,y)".to_string(),
        measured: z_min,
        bound: set.zeta_bounds.0,
        pass: z_min >= set.zeta_bounds.0,
    });
    checks.push(HypothesisCheck {
        name: "zeta(t,x,y) <= zeta2".to_string(),
        measured: z_max,
        bound: set.zeta_bounds.1,
        pass: z_max <= set.zeta_bounds.1,
    });
    checks.push(HypothesisCheck {
        name: "zeta(t,x,y) = zeta(t,y,x)".to_string(),
        measured: z_asym,
        bound: 1e-12,
        pass: z_asym <= 1e-12,
    });
    checks.push(HypothesisCheck {
        name: "inf b > b_0".to_string(),
        measured: b_min,
        bound: set.b_bounds.0,
        pass: b_min >= set.b_bounds.0,
    });
    checks.push(HypothesisCheck {
        name: "b <= b_1".to_string(),
        measured: b_max,
        bound: set.b_bounds.1,
        pass: b_max <= set.b_bounds.1,
    });

    // t-Hoelder constants: max over sampled pairs of |f(t)-f(tau)|/|t-tau|^eta,
    // compared with the Lipschitz-implied bound L * T^{1-eta}.
    let hoelder = |f: &dyn Fn(f64, Point2<f64>, Point2<f64>) -> f64, pts: &[Point2<f64>]| -> f64 {
        let mut worst = 0.0f64;
        for i in 0..times.len() {
            for j in (i + 1)..times.len() {
                let dt = (times[j] - times[i]).abs();
                if dt < 1e-14 {
                    continue;
                }
                for &x in pts.iter().take(8) {
                    for &y in pts.iter().take(8) {
                        let diff = (f(times[i], x, y) - f(times[j], x, y)).abs();
                        worst = worst.max(diff / dt.powf(eta));
                    }
                }
            }
        }
        worst
    };
    let lip_bound = |l: f64| {
        if l == 0.0 {
            0.0
        } else {
            l * t_max.powf(1.0 - eta)
        }
    };
    let hk = hoelder(&|t, x, y| set.k.eval(t, x, y), &bulk_pts);
    checks.push(HypothesisCheck {
        name: "K Hoelder in t".to_string(),
        measured: hk,
        bound: lip_bound(set.lipschitz_t.0),
        pass: hk <= lip_bound(set.lipschitz_t.0) + 1e-12,
    });
    let hz = hoelder(&|t, x, y| set.zeta.eval(t, x, y), &bdy_pts);
    checks.push(HypothesisCheck {
        name: "zeta Hoelder in t".to_string(),
        measured: hz,
        bound: lip_bound(set.lipschitz_t.1),
        pass: hz <= lip_bound(set.lipschitz_t.1) + 1e-12,
    });
    let hb = hoelder(&|t, x, _| set.b.eval_point(t, x), &bdy_pts);
    checks.push(HypothesisCheck {
        name: "b Hoelder in t".to_string(),
        measured: hb,
        bound: lip_bound(set.lipschitz_t.2),
        pass: hb <= lip_bound(set.lipschitz_t.2) + 1e-12,
    });

    HypothesisReport { checks, samples }
}
