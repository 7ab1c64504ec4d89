//! Partial contour matching loss against human corrections.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{match_segment, Contour, Point};

fn coords_to_contour<T: Real>(g: &Graph<T>, coords: Var) -> Contour {
    let v = g.value(coords).to_f64_vec();
    Contour::closed(v.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
}

/// `(1/N) Σ_i Σ_{p ∈ C_i} min_{p̂ ∈ Ĉ_i} ‖p − p̂‖₂`, where `C_i` is the
/// predicted sub-chain matched to correction `Ĉ_i` and `N` the predicted
/// vertex count.
///
/// Correspondence is found on the current values and then held fixed, so the
/// gradient flows through the distances only. Returns `None` when there are
/// no corrections.
pub fn partial_matching_loss<T: Real>(
    g: &mut Graph<T>,
    corrections: &[Contour],
    coords: Var,
) -> Result<Option<Var>> {
    if corrections.is_empty() {
        return Ok(None);
    }
    let predicted = coords_to_contour(g, coords);
    let n = predicted.len();
    if n == 0 {
        return Err(Error::DegenerateContour("empty contour".into()));
    }
    let mut index = Vec::new();
    let mut targets = Vec::new();
    for c in corrections {
        if c.len() < 2 {
            return Err(Error::Data(format!("correction has {} points, need at least 2", c.len())));
        }
        let m = match_segment(c, &predicted);
        for (&v, &k) in m.chain.iter().zip(&m.nearest) {
            index.extend([2 * v, 2 * v + 1]);
            targets.extend([c.vertices[k].x, c.vertices[k].y]);
        }
    }
    let rows = index.len() / 2;
    let chain = g.gather(coords, index, &[rows, 2])?;
    let target = g.input(Tensor::from_f64(&[rows, 2], &targets)?);
    let diff = g.sub(chain, target)?;
    let dist = g.l2_norm(diff)?;
    let total = g.sum(dist)?;
    g.scale(total, T::from_f64_lossy(1.0 / n as f64)).map(Some)
}
