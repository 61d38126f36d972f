//! Functional shapes as functional varifolds.
//!
//! A functional shape ("fshape") is a curve or surface mesh carrying one
//! scalar signal value per vertex. This crate represents fshapes as weighted
//! sums of Diracs in position × direction × signal space, computes Gaussian
//! kernel dissimilarity metrics and their analytic gradients, integrates
//! geodesic shooting equations in the tangential and metamorphosis models,
//! and estimates mean templates of fshape populations by adaptive multi-rate
//! gradient descent.

pub mod atlas;
pub mod deformation;
pub mod error;
pub mod fvarifold;
pub mod geom;
pub mod mesh;
pub mod optimizer;
pub mod sidecar;
pub mod synth;

pub use error::{Error, Result};
pub use mesh::{load_fshape, save_fshape, DiracSet, FShapeMesh, MassMatrix, MeshFormat};
