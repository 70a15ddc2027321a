//! Finite-mode laboratory for regularised Gaussian measures, their effective
//! average actions and the exact renormalisation group flow between them.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convex;
pub mod flow;
pub mod functionals;
pub mod laplace;
pub mod measure;
pub mod model;
pub mod quadrature;
pub mod regulator;
