//! Differentiable contour losses and their weighted combination.
//!
//! Every loss takes predicted vertex coordinates as a `[N×2]` graph variable
//! in pixel units and returns a scalar variable.

mod edge;
mod pcm;
mod perceptual;
mod tps;

pub use edge::{edge_loss, gradient_magnitude};
pub use pcm::partial_matching_loss;
pub use perceptual::{
    perceptual_loss, FeatureLevel, FilterLevel, PerceptualExtractor, PerceptualFeatures, PerceptualOptions,
    VertexFeatures, DEFAULT_EXTRACTOR_SEED, FEATURE_MAGIC,
};
pub use tps::{tps_kernel, TpsSystem};

pub(crate) use perceptual::contour_tensor;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::Contour;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.25, lambda3: 0.1, lambda4: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

/// Loss component values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub perc: f64,
    pub bend: f64,
    pub edge: f64,
    /// Present only when the sample has corrections or a full label.
    pub pcm: Option<f64>,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [("perc", self.perc), ("bend", self.bend), ("edge", self.edge), ("pcm", self.pcm.unwrap_or(0.0))]
    }
}

/// `λ₁·perc + λ₂·bend + λ₃·edge [+ λ₄·pcm]`.
pub fn total_loss(weights: &LossWeights, c: &LossComponents) -> Result<f64> {
    weights.validate()?;
    if let Some(bad) = c.named().iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} loss component", bad.0)));
    }
    let mut total = weights.lambda1 * c.perc + weights.lambda2 * c.bend + weights.lambda3 * c.edge;
    if let Some(p) = c.pcm {
        total += weights.lambda4 * p;
    }
    Ok(total)
}

/// Everything needed to score predictions on one image.
#[derive(Debug, Clone)]
pub struct SampleTargets<'a> {
    pub features: &'a PerceptualFeatures,
    pub edge_map: &'a crate::autodiff::Tensor<f64>,
    pub corrections: &'a [Contour],
}

/// Per-exemplar state shared by all samples.
#[derive(Debug, Clone)]
pub struct ExemplarTargets<'a> {
    pub tps: &'a TpsSystem,
    pub features: &'a VertexFeatures,
    pub options: &'a PerceptualOptions,
}

/// Graph variables of one recorded loss.
#[derive(Debug, Clone, Copy)]
pub struct RecordedLoss {
    pub total: Var,
    pub perc: Var,
    pub bend: Var,
    pub edge: Var,
    pub pcm: Option<Var>,
}

impl RecordedLoss {
    pub fn components<T: Real>(&self, g: &Graph<T>) -> LossComponents {
        let v = |x: Var| g.value(x).item().as_f64();
        LossComponents { perc: v(self.perc), bend: v(self.bend), edge: v(self.edge), pcm: self.pcm.map(v) }
    }
}

/// Records all components and their weighted sum for `coords [N×2]`.
pub fn record_loss<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    exemplar: &ExemplarTargets<'_>,
    sample: &SampleTargets<'_>,
    coords: Var,
) -> Result<RecordedLoss> {
    weights.validate()?;
    let perc = perceptual_loss(g, sample.features, exemplar.features, exemplar.options, coords)?;
    let bend = exemplar.tps.bending_loss(g, coords)?;
    let edge = edge_loss(g, sample.edge_map, coords)?;
    let pcm = partial_matching_loss(g, sample.corrections, coords)?;
    let w = |x: f64| T::from_f64_lossy(x);
    let mut total = g.scale(perc, w(weights.lambda1))?;
    let t = g.scale(bend, w(weights.lambda2))?;
    total = g.add(total, t)?;
    let t = g.scale(edge, w(weights.lambda3))?;
    total = g.add(total, t)?;
    if let Some(p) = pcm {
        let t = g.scale(p, w(weights.lambda4))?;
        total = g.add(total, t)?;
    }
    Ok(RecordedLoss { total, perc, bend, edge, pcm })
}
