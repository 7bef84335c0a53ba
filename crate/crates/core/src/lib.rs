//! Logit-space policy optimization over softmax policies.
//!
//! The crate covers the probability primitives ([`dist`]), per-timestep
//! losses with analytic logit gradients ([`objectives`]), the closed-form
//! KL-regularized target ([`target`]), Hessian and gradient-bound analysis
//! ([`convexity`]), small policy models with toy environments and a
//! gradient-descent trainer ([`model`], [`trainer`]) and the linear
//! convergence experiments ([`converge`]).
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod converge;
pub mod convexity;
pub mod dist;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod target;
pub mod trainer;

pub use error::{LcoError, Result};
pub use objectives::ObjectiveKind;
