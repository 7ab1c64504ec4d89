//! Corrections schema and simulated annotators.
//!
//! `corrections/<id>.corrections.json`:
//!
//! ```json
//! {"image": "img_003",
//!  "segments": [{"author": "human", "points": [[x, y], ...]},
//!               {"author": "simulated", "points": [...], "closed": true}]}
//! ```
//!
//! `closed` (default false) marks a full contour label, matched against the
//! whole predicted contour. `timestamp` (optional, Unix milliseconds) is set
//! by the correction service.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hausdorff, Contour, Point};

/// Distance above which a ground-truth vertex counts as badly predicted.
pub const DEFAULT_TAU: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    Human,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub author: Author,
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionsFile {
    pub image: String,
    pub segments: Vec<Segment>,
}

/// One correction polyline for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCorrection {
    pub image: String,
    pub author: Author,
    pub contour: Contour,
    pub timestamp: Option<u64>,
}

impl PartialCorrection {
    pub fn new(image: &str, author: Author, contour: Contour) -> Self {
        Self { image: image.to_string(), author, contour, timestamp: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contour.len() < 2 {
            return Err(Error::Data(format!(
                "correction for {:?}: points: need at least 2, got {}",
                self.image,
                self.contour.len()
            )));
        }
        if let Some(i) = self.contour.vertices.iter().position(|p| !p.is_finite()) {
            return Err(Error::Data(format!("correction for {:?}: points[{i}]: not finite", self.image)));
        }
        Ok(())
    }

    pub fn is_full_label(&self) -> bool {
        self.contour.closed
    }
}

impl CorrectionsFile {
    pub fn from_corrections(image: &str, corrections: &[PartialCorrection]) -> Self {
        Self {
            image: image.to_string(),
            segments: corrections
                .iter()
                .map(|c| Segment {
                    author: c.author,
                    points: c.contour.vertices.clone(),
                    closed: c.contour.closed,
                    timestamp: c.timestamp,
                })
                .collect(),
        }
    }

    pub fn into_corrections(self) -> Vec<PartialCorrection> {
        let image = self.image;
        self.segments
            .into_iter()
            .map(|s| PartialCorrection {
                image: image.clone(),
                author: s.author,
                contour: Contour { closed: s.closed, vertices: s.points },
                timestamp: s.timestamp,
            })
            .collect()
    }

    /// Checks every segment, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Data("segments: empty".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.points.len() < 2 {
                return Err(Error::Data(format!("segments[{i}].points: need at least 2 points, got {}", s.points.len())));
            }
            if s.closed && s.points.len() < 3 {
                return Err(Error::Data(format!("segments[{i}].points: closed segment needs at least 3 points")));
            }
            if let Some(j) = s.points.iter().position(|p| !p.is_finite()) {
                return Err(Error::Data(format!("segments[{i}].points[{j}]: not finite")));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        file.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(file)
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Appends `segments` to the file at `path` (created if missing) and
    /// returns the stored result.
    pub fn append(path: &Path, image: &str, segments: Vec<Segment>) -> Result<Self> {
        let mut file = if path.exists() {
            Self::read(path)?
        } else {
            Self { image: image.to_string(), segments: Vec::new() }
        };
        if file.image != image {
            return Err(Error::format(path, format!("file names image {:?}", file.image)));
        }
        file.segments.extend(segments);
        file.validate()?;
        file.write(path)?;
        Ok(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    /// Attach the whole ground-truth contour.
    Full,
    /// Attach only the badly predicted ground-truth arcs.
    Partial,
}

fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 { (((p - a).x * ab.x + (p - a).y * ab.y) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab * t)
}

fn dist_to_polygon(p: Point, c: &Contour) -> f64 {
    c.edges().map(|(a, b)| point_segment_dist(p, a, b)).fold(f64::INFINITY, f64::min)
}

/// Maximal cyclic runs of ground-truth vertices farther than `tau` from the
/// predicted polygon, each widened by one vertex on either side.
fn bad_arcs(prediction: &Contour, truth: &Contour, tau: f64) -> Vec<Contour> {
    let n = truth.len();
    let bad: Vec<bool> = truth.vertices.iter().map(|&p| dist_to_polygon(p, prediction) > tau).collect();
    if bad.iter().all(|&b| !b) {
        return Vec::new();
    }
    if bad.iter().all(|&b| b) {
        return vec![truth.clone()];
    }
    // start scanning just after a good vertex so no run wraps the origin
    let start = (0..n).find(|&i| !bad[i]).unwrap();
    let mut arcs = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for k in 1..=n {
        let i = (start + k) % n;
        if bad[i] {
            run.push(i);
        } else if !run.is_empty() {
            let first = (run[0] + n - 1) % n;
            let last = (run[run.len() - 1] + 1) % n;
            let mut idx = vec![first];
            idx.extend(&run);
            if last != first {
                idx.push(last);
            }
            arcs.push(Contour::open(idx.iter().map(|&j| truth.vertices[j]).collect()));
            run.clear();
        }
    }
    arcs
}

/// Ranks images by Hausdorff distance between prediction and ground truth
/// (worst first, ties by id) and corrects the top `⌈fraction · count⌉`.
pub fn simulate_corrections(
    predictions: &BTreeMap<String, Contour>,
    ground_truth: &BTreeMap<String, Contour>,
    fraction: f64,
    mode: CorrectionMode,
    tau: f64,
) -> Result<Vec<PartialCorrection>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction must be in [0, 1], got {fraction}")));
    }
    if predictions.len() != ground_truth.len() || predictions.keys().any(|k| !ground_truth.contains_key(k)) {
        return Err(Error::Data("predictions and ground truth cover different ids".into()));
    }
    let mut ranked: Vec<(&String, f64)> =
        predictions.iter().map(|(id, p)| (id, hausdorff(p, &ground_truth[id]))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let take = ((fraction * ranked.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::new();
    for (id, _) in ranked.into_iter().take(take) {
        let truth = &ground_truth[id];
        match mode {
            CorrectionMode::Full => out.push(PartialCorrection::new(id, Author::Simulated, truth.clone())),
            CorrectionMode::Partial => out.extend(
                bad_arcs(&predictions[id], truth, tau)
                    .into_iter()
                    .map(|c| PartialCorrection::new(id, Author::Simulated, c)),
            ),
        }
    }
    Ok(out)
}
