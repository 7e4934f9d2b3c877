//! Single-name calibration, sensitivities and dynamics on top of
//! portfolio-level credit models.
//!
//! The crate allocates portfolio-level default risk to individual names
//! through default-time matrices calibrated by iterative proportional
//! scaling, derives single-name tranche deltas from them, and simulates
//! defaulter identities with Bayesian information-process updating between
//! defaults.

// Negated comparisons are deliberate: they also reject NaN inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod marking;
pub mod portfolio;
pub mod sensitivity;
pub mod tail;
pub mod tdmatrix;
pub mod top;

pub use error::{Error, Result};
pub use grid::MaturityGrid;
pub use portfolio::{DiscountSpec, PortfolioSnapshot, TrancheSpec};
pub use tail::TailCurve;
pub use tdmatrix::TdMatrixSet;
pub use top::BirthProcessTop;
