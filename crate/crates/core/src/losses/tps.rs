//! Thin-plate-spline bending energy between an exemplar contour and a prediction.
//!
//! With `K_ij = r² log r` over the exemplar vertices and `P = (1, x', y')`,
//! the bending matrix `H` is the upper-left `N×N` block of
//! `L⁻¹ = [[K, P], [Pᵀ, 0]]⁻¹`. Rather than inverting the saddle-point matrix,
//! `H` is formed from the null space `Z` of `Pᵀ`:
//!
//! ```text
//! H = Z (Zᵀ K Z)⁻¹ Zᵀ
//! ```
//!
//! `Zᵀ K Z` is positive definite for distinct, non-collinear points, so a
//! Cholesky factorization both solves it and detects degenerate inputs. The
//! result is symmetric positive semidefinite by construction and annihilates
//! every affine function of the exemplar coordinates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Contour;

/// `r² log r`, with 0 at `r = 0`.
pub fn tps_kernel(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Precomputed TPS matrices for one exemplar contour.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    source: Contour,
    kernel: DMatrix<f64>,
    pmat: DMatrix<f64>,
    assembled: DMatrix<f64>,
    bending: DMatrix<f64>,
}

impl TpsSystem {
    pub fn build(exemplar: &Contour) -> Result<Self> {
        let pts = &exemplar.vertices;
        let n = pts.len();
        if n < 4 {
            return Err(Error::DegenerateTps(format!("need at least 4 vertices, got {n}")));
        }
        let scale = pts
            .iter()
            .flat_map(|p| [p.x.abs(), p.y.abs()])
            .fold(1.0f64, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                if pts[i].dist(pts[j]) <= 1e-12 * scale {
                    return Err(Error::DegenerateTps(format!("vertices {i} and {j} coincide")));
                }
            }
        }

        let kernel = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { tps_kernel(pts[i].dist(pts[j])) });
        let pmat = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => pts[i].x,
            _ => pts[i].y,
        });
        let mut assembled = DMatrix::zeros(n + 3, n + 3);
        assembled.view_mut((0, 0), (n, n)).copy_from(&kernel);
        assembled.view_mut((0, n), (n, 3)).copy_from(&pmat);
        assembled.view_mut((n, 0), (3, n)).copy_from(&pmat.transpose());

        // Same column span as `pmat`, centered and scaled for a better-conditioned QR.
        let c = exemplar.centroid();
        let spread = pts.iter().map(|p| p.dist(c)).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        let basis = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => (pts[i].x - c.x) / spread,
            _ => (pts[i].y - c.y) / spread,
        });
        let qr = basis.qr();
        let r = qr.r();
        let rmax = (0..3).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
        if (0..3).any(|i| r[(i, i)].abs() <= 1e-10 * rmax) {
            return Err(Error::DegenerateTps("exemplar vertices are collinear".into()));
        }
        let mut qt = DMatrix::<f64>::identity(n, n);
        qr.q_tr_mul(&mut qt);
        // rows 3.. of Qᵀ span the null space of Pᵀ
        let zt = qt.rows(3, n - 3).into_owned();
        let z = zt.transpose();

        let mut reduced = &zt * &kernel * &z;
        symmetrize(&mut reduced);
        let chol = reduced
            .cholesky()
            .ok_or_else(|| Error::DegenerateTps("reduced kernel is not positive definite".into()))?;
        let half = chol.l().solve_lower_triangular(&zt).ok_or_else(|| {
            Error::DegenerateTps("triangular solve failed".into())
        })?;
        let mut bending = half.transpose() * half;
        symmetrize(&mut bending);
        if bending.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTps("non-finite bending matrix".into()));
        }

        Ok(Self { source: exemplar.clone(), kernel, pmat, assembled, bending })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &Contour {
        &self.source
    }

    /// `K`, the `N×N` kernel matrix.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// `P = (1, x', y')`, `N×3`.
    pub fn pmat(&self) -> &DMatrix<f64> {
        &self.pmat
    }

    /// `L = [[K, P], [Pᵀ, 0]]`.
    pub fn assembled(&self) -> &DMatrix<f64> {
        &self.assembled
    }

    /// `H`, the upper-left `N×N` block of `L⁻¹`.
    pub fn bending_matrix(&self) -> &DMatrix<f64> {
        &self.bending
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::VertexCount { expected: self.len(), actual: n });
        }
        Ok(())
    }

    /// `max((xᵀHx + yᵀHy) / 8π, 0)` for the given target contour.
    pub fn energy(&self, predicted: &Contour) -> Result<f64> {
        self.check_len(predicted.len())?;
        let x = DVector::from_iterator(self.len(), predicted.vertices.iter().map(|p| p.x));
        let y = DVector::from_iterator(self.len(), predicted.vertices.iter().map(|p| p.y));
        let e = (x.dot(&(&self.bending * &x)) + y.dot(&(&self.bending * &y))) / (8.0 * PI);
        Ok(e.max(0.0))
    }

    /// Records the bending loss of `coords [N×2]` on a graph.
    pub fn bending_loss<T: Real>(&self, g: &mut Graph<T>, coords: Var) -> Result<Var> {
        self.check_len(g.shape(coords)[0])?;
        let n = self.len();
        // row-major copy of the symmetric matrix
        let h = Tensor::from_f64(&[n, n], self.bending.as_slice())?;
        let h = g.input(h);
        // H annihilates the exemplar coordinates, so subtracting them leaves
        // the energy unchanged and avoids cancellation in low precision.
        let source = g.input(crate::losses::contour_tensor(&self.source));
        let d = g.sub(coords, source)?;
        let hd = g.matmul(h, d)?;
        let quad = g.mul(d, hd)?;
        let total = g.sum(quad)?;
        let scaled = g.scale(total, T::from_f64_lossy(1.0 / (8.0 * PI)))?;
        g.max_with_zero(scaled)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
