//! Bayesian penalized distributed-lag non-linear models (DLNM) with spatial
//! effect modification, fitted with Laplace approximations.
//!
//! Modules build on each other. [`basis`] holds univariate B-spline bases and
//! difference penalties, and [`crossbasis`] combines them into the
//! exposure-lag cross-basis and its interaction with an area-level modifier.
//! [`spatial`] provides adjacency graphs with iid, ICAR and Leroux precisions.
//! [`model`] assembles a [`panel`] and a specification into a design and a
//! prior precision; [`likelihood`] and [`laplace`] fit it. Posterior summaries
//! live in [`inference`], and [`simgen`] generates and scores simulation studies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod crossbasis;
pub mod error;
pub mod inference;
pub mod laplace;
pub mod likelihood;
pub(crate) mod linalg;
pub mod model;
pub mod panel;
pub mod simgen;
pub mod spatial;

pub use error::{Error, Result};
