use std::fs;
use std::path::Path;

use super::contour::Contour;
use crate::error::{Error, Result};

/// Row-major binary occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Binary PGM (P5): 0 background, 255 foreground.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Crossing abscissas of the contour's edges with the horizontal line `y`.
///
/// An edge counts when exactly one endpoint lies strictly above `y`; this is
/// the same predicate as the classic crossing-number point-in-polygon test.
fn row_crossings(contour: &Contour, y: f64, out: &mut Vec<f64>) {
    out.clear();
    for (a, b) in contour.edges() {
        if (a.y > y) != (b.y > y) {
            out.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
        }
    }
    out.sort_by(|p, q| p.total_cmp(q));
}

/// Marks every pixel whose center lies inside the polygon (even-odd rule).
pub fn rasterize(contour: &Contour, width: usize, height: usize) -> Result<Mask> {
    if !contour.closed {
        return Err(Error::OpenSegment);
    }
    let mut mask = Mask::empty(width, height);
    let mut xs = Vec::new();
    for row in 0..height {
        let y = row as f64;
        row_crossings(contour, y, &mut xs);
        if xs.is_empty() {
            continue;
        }
        for col in 0..width {
            let x = col as f64;
            // number of crossings strictly to the right of the pixel center
            let right = xs.len() - xs.partition_point(|&c| c <= x);
            if right % 2 == 1 {
                mask.bits[row * width + col] = true;
            }
        }
    }
    Ok(mask)
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "iou of {}x{} and {}x{} masks",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Contour {
        Contour::closed(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    #[test]
    fn square_covers_hundred_pixels() {
        let m = rasterize(&rect(0.5, 0.5, 10.5, 10.5), 16, 16).unwrap();
        assert_eq!(m.count(), 100);
        assert!(m.get(1, 1) && m.get(10, 10) && !m.get(0, 0) && !m.get(11, 5));
    }

    #[test]
    fn orientation_does_not_matter() {
        let c = rect(2.3, 1.7, 12.9, 9.1);
        let mut rev = c.clone();
        rev.vertices.reverse();
        assert_eq!(rasterize(&c, 16, 16).unwrap(), rasterize(&rev, 16, 16).unwrap());
    }

    #[test]
    fn outside_contour_gives_empty_mask() {
        let m = rasterize(&rect(100.0, 100.0, 120.0, 130.0), 16, 16).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn open_segment_rejected() {
        let mut c = rect(0.0, 0.0, 4.0, 4.0);
        c.closed = false;
        assert_eq!(
            rasterize(&c, 8, 8).unwrap_err().to_string(),
            "cannot rasterize open segment"
        );
    }

    #[test]
    fn iou_cases() {
        let a = rasterize(&rect(0.5, 0.5, 10.5, 10.5), 32, 32).unwrap();
        let b = rasterize(&rect(5.5, 0.5, 15.5, 10.5), 32, 32).unwrap();
        let far = rasterize(&rect(20.5, 20.5, 25.5, 25.5), 32, 32).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let e = Mask::empty(32, 32);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&a, &Mask::empty(31, 32)).is_err());
    }

    #[test]
    fn pgm_layout() {
        let m = rasterize(&rect(0.5, 0.5, 1.5, 1.5), 3, 2).unwrap();
        let bytes = m.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 0, 0, 255, 0]);
    }
}
