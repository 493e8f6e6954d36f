//! Exact piecewise-linear interval maps and the constructions built on them:
//! visor removal, tent-map factorization, composant analytics for inverse
//! limits, and a stagewise generator of plane embeddings with accessibility
//! certificates.
//!
//! Every computation runs over arbitrary-precision rationals.

pub mod cli;
pub mod embedpipe;
pub mod geomcore;
pub mod knaster;
pub mod plmap;
pub mod tentfactor;
pub mod tuck;
pub mod visor;

pub use geomcore::{q, Point2, Polyline, Rational, Segment};
pub use plmap::PLMap;
