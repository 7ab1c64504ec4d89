use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::Dataset;
use crate::error::Result;
use crate::geometry::{hausdorff, iou, rasterize, Contour};
use crate::model::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub hd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_iou: f64,
    pub median_iou: f64,
    pub worst_iou: f64,
    pub mean_hd: f64,
    pub median_hd: f64,
    pub worst_hd: f64,
}

impl Summary {
    /// NaN statistics for an empty set.
    pub fn from_images(images: &[ImageMetrics]) -> Self {
        let ious: Vec<f64> = images.iter().map(|m| m.iou).collect();
        let hds: Vec<f64> = images.iter().map(|m| m.hd).collect();
        Self {
            count: images.len(),
            mean_iou: mean(&ious),
            median_iou: median(&ious),
            worst_iou: ious.iter().copied().reduce(f64::min).unwrap_or(f64::NAN),
            mean_hd: mean(&hds),
            median_hd: median(&hds),
            worst_hd: hds.iter().copied().reduce(f64::max).unwrap_or(f64::NAN),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// First 16 hex digits of the SHA-256 of the serialized checkpoint.
    pub checkpoint: String,
    /// Images with ground truth, in id order.
    pub images: Vec<ImageMetrics>,
    /// Images without ground truth.
    pub unevaluated: Vec<String>,
    pub summary: Summary,
}

impl MetricsReport {
    /// The same report with the given ids dropped from the per-image rows and summary.
    pub fn without(&self, ids: &[&str]) -> MetricsReport {
        let images: Vec<ImageMetrics> = self.images.iter().filter(|m| !ids.contains(&m.id.as_str())).cloned().collect();
        MetricsReport {
            checkpoint: self.checkpoint.clone(),
            summary: Summary::from_images(&images),
            images,
            unevaluated: self.unevaluated.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,iou,hd\n");
        for m in &self.images {
            let _ = writeln!(out, "{},{},{}", m.id, m.iou, m.hd);
        }
        out
    }
}

pub fn checkpoint_fingerprint(checkpoint: &Checkpoint) -> Result<String> {
    let digest = Sha256::digest(checkpoint.to_bytes()?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Final-block predictions for every sample, keyed by id.
pub fn predict_all(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<BTreeMap<String, Contour>> {
    dataset
        .samples()
        .par_iter()
        .map(|s| Ok((s.id.clone(), checkpoint.predict(&s.image)?)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// IoU and Hausdorff distance for every prediction with a ground-truth label.
pub fn evaluate_predictions(
    predictions: &BTreeMap<String, Contour>,
    dataset: &Dataset,
    checkpoint: String,
) -> Result<MetricsReport> {
    let mut images = Vec::new();
    let mut unevaluated = Vec::new();
    for (id, pred) in predictions {
        let (Some(gt), Some(sample)) = (dataset.ground_truth(id), dataset.sample(id)) else {
            unevaluated.push(id.clone());
            continue;
        };
        let (w, h) = (sample.image.width, sample.image.height);
        images.push(ImageMetrics {
            id: id.clone(),
            iou: iou(&rasterize(pred, w, h)?, &rasterize(gt, w, h)?)?,
            hd: hausdorff(pred, gt),
        });
    }
    Ok(MetricsReport { checkpoint, summary: Summary::from_images(&images), images, unevaluated })
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<MetricsReport> {
    let preds = predict_all(checkpoint, dataset)?;
    evaluate_predictions(&preds, dataset, checkpoint_fingerprint(checkpoint)?)
}
