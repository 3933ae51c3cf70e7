//! Domain adaptation under confounded concept shift by learning a stable
//! linear subspace.
//!
//! The crate is organised bottom-up:
//!
//! - [`scm`]: the linear structural causal model, its population moments,
//!   oracle predictors and a Gaussian sampler.
//! - [`stiefel`]: tangent projection, polar retraction and random frames on
//!   the Stiefel manifold.
//! - [`objective`]: the stability-penalized ridge objective, its inner
//!   solution and Riemannian gradient.
//! - [`optimizer`]: Armijo gradient descent on the manifold.
//! - [`moments`]: empirical moments, CSV ingestion and dataset recipes.
//! - [`analysis`]: `(υ, η)` sweeps and numerical checks of the risk bounds.
//! - [`cli`]: the `subspace-adapt` command-line front end.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod files;
pub mod linalg;
pub mod moments;
pub mod objective;
pub mod optimizer;
pub mod scm;
pub mod stiefel;

pub use error::{Error, Result};
pub use objective::{MomentPair, RegParams};
pub use optimizer::{minimize, minimize_multistart, FitResult, OptimizerOptions};
pub use scm::{CovariateMoments, Dataset, Environment, EnvironmentMoments, ScmParams, ScmParts};
pub use stiefel::{StiefelPoint, TangentVector};
