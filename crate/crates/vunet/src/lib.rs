//! Conditional variational U-Net for shape-guided image generation.
//!
//! The generator is a U-Net whose encoder consumes a shape estimate (a
//! stickman rendering or an edge map) and whose decoder is additionally
//! conditioned on a stochastic appearance code. The appearance code is
//! inferred by a separate encoder and regularized against a conditional
//! prior predicted from the shape alone, so that shape and appearance can
//! be recombined freely at test time.
//!
//! Everything runs on the CPU on top of a small reverse-mode autodiff
//! tensor core. The `synthglyph` module provides a procedural benchmark
//! with ground-truth shape/appearance factors so that reconstruction,
//! sampling and transfer can be checked against oracle renders.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod par;
pub mod rng;
pub mod shapeio;
pub mod synthglyph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
