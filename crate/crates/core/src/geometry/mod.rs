//! Contours, masks and the metrics used to compare them.

mod contour;
mod matching;
mod metrics;
mod raster;

pub use contour::{center_initialize, resample_uniform, Contour, Point};
pub use matching::{match_segment, SegmentMatch};
pub use metrics::{hausdorff, hausdorff_points};
pub use raster::{iou, rasterize, Mask};
