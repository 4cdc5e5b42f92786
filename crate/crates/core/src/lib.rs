//! Numerical kernel for the light-cone calculus of isothermic surfaces:
//! Lorentzian linear algebra, discrete surface patches in conformal
//! curvature-line coordinates, the pencil of flat connections d + t eta,
//! polynomial conserved quantities, the Darboux / Christoffel / Calapso
//! transforms, and sphere-congruence constructions with residual-based
//! verification of the identities that tie them together.

// Index-heavy numerics: explicit loop indices keep the cross-indexed
// summations aligned with the formulas.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod grid;
pub mod lorentz;
pub mod surface;
pub mod eta;
pub mod pencil;
pub mod poly;
pub mod conserved;
pub mod transforms;
pub mod congruence;
pub mod io;
pub mod report;

pub use error::{GeomError, Result};
