//! Raw loops behind the convolution and sampling ops.

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, k, stride, pad, ho, wo })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `input [cin×h×w]` into `[(cin·k·k) × (ho·wo)]`, zero padded.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let npix = g.cols();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `grad_input`.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let npix = g.cols();
    for c in 0..g.cin {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Cell and fractional offset of a clamped bilinear sample along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Axis<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
    /// The coordinate was outside `[0, len-1]` and got clamped.
    pub clamped: bool,
}

pub(crate) fn axis<T: Real>(x: T, len: usize) -> Axis<T> {
    if len <= 1 {
        return Axis { i0: 0, i1: 0, frac: T::zero(), clamped: true };
    }
    let hi = T::from_usize(len - 1).unwrap();
    let clamped = x < T::zero() || x > hi;
    let xc = x.max(T::zero()).min(hi);
    let i0 = xc.floor().to_usize().unwrap_or(0).min(len - 2);
    let frac = xc - T::from_usize(i0).unwrap();
    Axis { i0, i1: i0 + 1, frac, clamped }
}
