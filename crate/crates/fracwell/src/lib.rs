//! Solver and verification toolkit for a non-autonomous fractional diffusion
//! problem with a nonlocal dynamic boundary condition on a d-set boundary.
//!
//! The library assembles the time-dependent energy forms (regional fractional
//! bulk operator, boundary jump operator, boundary potential), builds the
//! backward-Euler evolution family on the combined bulk+boundary measure,
//! solves the semilinear problem by Picard iteration on the mild formulation,
//! and cross-checks every quantitative claim (coercivity, Nash inequality,
//! contraction, ultracontractive decay, the fractional Green identity, strong
//! residuals) against independent reference quadratures.

pub mod assembly;
pub mod coefficients;
pub mod evolution;
pub mod geometry;
pub mod green;
pub mod norms;
pub mod oracle;
pub mod quad;
pub mod semilinear;

pub use assembly::{AssemblyError, Discretization, FormSnapshot, QuadratureSpec};
pub use coefficients::{CoefficientSet, Constants, ExponentError, ExponentInputs, ExponentPack};
pub use evolution::{EvolutionError, EvolutionFamily, TimeGrid};
pub use geometry::{BoundaryMesh, MeasureM, Mesh};
pub use green::{GreenError, PvOptions, RayTracer, ResidualOptions};
pub use semilinear::{Nonlinearity, PicardOptions, SemilinearError};
