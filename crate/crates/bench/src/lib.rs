//! Shared fixtures for the benchmarks.

use ctn_core::dataio::{render_blob, SynthConfig};
use ctn_core::geometry::Contour;
use ctn_core::imaging::GrayImage;

/// A default 64×64 synthetic image and its 64-vertex contour.
pub fn blob(index: u64) -> (GrayImage, Contour) {
    render_blob(&SynthConfig::default(), index).expect("default synthetic config renders")
}
