//! One-shot contour-evolution segmentation.
//!
//! A cascaded graph-convolutional contour model is trained from a single
//! labeled exemplar plus unlabeled images, using differentiable contour losses
//! (perceptual, thin-plate-spline bending, edge), and can be refined with
//! partial contour corrections through a Chamfer matching loss.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, ErrorClass, Result};
