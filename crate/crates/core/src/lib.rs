//! Geometry-oriented ability learning (GOAL) at desk scale.
//!
//! The crate trains a small feature extractor + linear classifier on a
//! labeled source domain and an unlabeled target domain, shaping the learned
//! embedding with two nuclear-norm objectives:
//!
//! * a **transferability** term that rewards per-class source/target subspace
//!   overlap, and
//! * a **discriminability** term that rewards mutual orthogonality between
//!   class subspaces.
//!
//! Around that core sit exact small-matrix linear algebra ([`mat`], [`svd`]),
//! synthetic two-domain data ([`data`]), a two-stage trainer with pseudo-label
//! selection ([`trainer`]), subspace geometry diagnostics ([`diagnostics`]),
//! and a Monte Carlo harness that checks the governing norm inequalities
//! ([`theoremlab`]). Everything is seeded and bit-deterministic for a fixed
//! configuration.

pub mod batch;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mat;
pub mod model;
pub mod objectives;
pub mod svd;
pub mod theoremlab;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::Mat;
