//! Weighted condenser capacities for divergence-form elliptic operators.
//!
//! - [`operator`]: coefficient fields `a_ij(x)`, condensers, the quadratic form.
//! - [`radial`]: exact capacities for radial weights, R-sweeps and slope fits.
//! - [`discrete`]: grid minimization of the capacity energy for general fields.
//! - [`verifier`]: certification of explicit solution pairs of
//!   `Lu + |u|^{q-1}u ≤ Lv + |v|^{q-1}v`.
//! - [`regime`]: classification of `(n, q, σ)` for the model weight and of
//!   capacity evidence for general weights.

// NaN-rejecting guards are written as `!(x > 0.0)`; grid kernels index by axis.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod discrete;
pub mod error;
pub mod operator;
pub mod quadrature;
pub mod radial;
pub mod regime;
pub mod special;
pub mod verifier;

pub use error::{Error, Result};
pub use operator::{Condenser, WeightField, WeightSpec};
pub use radial::{CapacityResult, CapacitySequence};
pub use regime::{Exponents, RegimeVerdict};
