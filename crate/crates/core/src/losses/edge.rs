//! Edge loss: mean image-gradient magnitude along the contour, negated.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Sobel gradient magnitude, kernels divided by 8 so `I(x, y) = x` gives 1.
/// Borders are replicated.
pub fn gradient_magnitude(image: &GrayImage) -> Result<Tensor<f64>> {
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall { width: w, height: h, min: 3 });
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| image.get_clamped(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            out.push((gx * gx + gy * gy).sqrt() / 8.0);
        }
    }
    Tensor::new(&[1, h, w], out)
}

/// `−(1/N) Σ g(p_i)` with `magnitude` from [`gradient_magnitude`].
pub fn edge_loss<T: Real>(g: &mut Graph<T>, magnitude: &Tensor<f64>, coords: Var) -> Result<Var> {
    let n = g.shape(coords)[0];
    if n == 0 {
        return Err(Error::DegenerateContour("empty contour".into()));
    }
    let map = g.input(magnitude.cast());
    let sampled = g.bilinear_sample(map, coords)?;
    let total = g.sum(sampled)?;
    g.scale(total, T::from_f64_lossy(-1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ramp_has_unit_magnitude_inside() {
        let img = GrayImage::from_fn(9, 7, |x, _| x as f64);
        let m = gradient_magnitude(&img).unwrap();
        for y in 0..7 {
            for x in 1..8 {
                assert!((m.data()[y * 9 + x] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_image_rejected() {
        assert!(gradient_magnitude(&GrayImage::filled(2, 9, 0.0)).is_err());
    }
}
