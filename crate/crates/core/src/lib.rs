//! Numerical laboratory for the renormalization of analytic critical circle
//! maps.

pub mod circlemap;
pub mod contfrac;
pub mod fit;
pub mod fixed;
pub mod geometry;
pub mod pairs;
pub mod parabolic;
pub mod real;
pub mod report;

pub use contfrac::ContinuedFraction;
pub use fixed::Fx;
pub use real::{Lifted, Precision, Real};
pub use circlemap::{AnalyticCircleMap, MapFamily};
