//! Single-image novel view synthesis without source poses.
//!
//! An image is encoded, its channel tokens are transformed into an intrinsic
//! representation tied to a fixed reference pose, lifted to an occupancy
//! volume, explicitly rotated to any target pose and decoded back to an image
//! and a segment map. Training only ever sees one view of an object at a time.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{backward, GradientMap, Scalar, Tensor};
