//! Photon density estimation laboratory: photon tracing, kd-tree
//! neighbour search, classical kernel and progressive estimators, a
//! learned context-aware kernel network trained with a hand-written
//! reverse-mode tape, and the dataset/evaluation pipeline around them.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod exec;
pub mod math;
pub mod neural_kernel;
pub mod photon_map;
pub mod scene;
pub mod tracer;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use math::{Frame, Rgb, RngStream, Vec3};
