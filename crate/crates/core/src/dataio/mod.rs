//! Dataset layout, synthetic corpora, exemplar selection and simulated
//! corrections.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! images/<id>.png | <id>.pgm          grayscale images
//! labels/<id>.contour.json            ground-truth contours
//! corrections/<id>.corrections.json   partial corrections and full labels
//! meta.json                           exemplar id, vertex count, provenance
//! ```
//!
//! Only the exemplar's entry under `labels/` is visible to training, via
//! [`Dataset::training_view`]. Every other label is evaluation ground truth
//! and is reachable only through [`Dataset::ground_truth`].

mod corrections;
mod exemplar;
mod synth;

pub use corrections::{
    simulate_corrections, Author, CorrectionMode, CorrectionsFile, PartialCorrection, Segment, DEFAULT_TAU,
};
pub use exemplar::{global_descriptor, select_exemplar};
pub use synth::{generate_synthetic, render_blob, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::imaging::GrayImage;

/// `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar: Option<String>,
    pub n_vertices: usize,
    /// Free-form description of where the data came from.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    /// Extension the image is stored with (`png` or `pgm`).
    pub format: String,
    pub corrections: Vec<PartialCorrection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    pub meta: Meta,
    /// Sorted by id.
    samples: Vec<Sample>,
    labels: BTreeMap<String, Contour>,
}

/// What one-shot training and fine-tuning may read: images, the exemplar
/// label and corrections.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub exemplar_id: &'a str,
    pub exemplar: &'a Contour,
    pub samples: &'a [Sample],
}

impl TrainingView<'_> {
    pub fn exemplar_sample(&self) -> &Sample {
        self.samples.iter().find(|s| s.id == self.exemplar_id).expect("exemplar is a sample")
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !id.starts_with('.')
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn strip_suffix<'a>(path: &'a Path, suffix: &str) -> Option<&'a str> {
    path.file_name()?.to_str()?.strip_suffix(suffix)
}

impl Dataset {
    /// Builds a dataset, sorting samples by id and checking invariants.
    pub fn new(meta: Meta, mut samples: Vec<Sample>, labels: BTreeMap<String, Contour>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for w in samples.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!("duplicate image id {:?}", w[0].id)));
            }
        }
        let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        for s in &samples {
            if !valid_id(&s.id) {
                return Err(Error::Data(format!("invalid image id {:?}", s.id)));
            }
            for c in &s.corrections {
                c.validate()?;
            }
        }
        for (id, c) in &labels {
            if !ids.contains(id.as_str()) {
                return Err(Error::Data(format!("label {id:?} has no image")));
            }
            if !c.closed {
                return Err(Error::Data(format!("label {id:?} is not a closed contour")));
            }
            c.validate()?;
        }
        if let Some(e) = &meta.exemplar {
            if !ids.contains(e.as_str()) {
                return Err(Error::Data(format!("exemplar {e:?} is not in the dataset")));
            }
        }
        Ok(Self { root: None, meta, samples, labels })
    }

    /// Directory the dataset was loaded from.
    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.binary_search_by(|s| s.id.as_str().cmp(id)).ok().map(|i| &self.samples[i])
    }

    fn sample_mut(&mut self, id: &str) -> Option<&mut Sample> {
        self.samples.binary_search_by(|s| s.id.as_str().cmp(id)).ok().map(move |i| &mut self.samples[i])
    }

    /// Evaluation-only access to a sample's ground-truth contour.
    pub fn ground_truth(&self, id: &str) -> Option<&Contour> {
        self.labels.get(id)
    }

    /// Ids with a stored label.
    pub fn labeled_ids(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn set_label(&mut self, id: &str, contour: Contour) -> Result<()> {
        if self.sample(id).is_none() {
            return Err(Error::Data(format!("unknown image id {id:?}")));
        }
        contour.validate()?;
        self.labels.insert(id.to_string(), contour);
        Ok(())
    }

    pub fn set_exemplar(&mut self, id: &str) -> Result<()> {
        if self.sample(id).is_none() {
            return Err(Error::Data(format!("unknown image id {id:?}")));
        }
        self.meta.exemplar = Some(id.to_string());
        Ok(())
    }

    /// Drops every label except the exemplar's.
    pub fn quarantine(&mut self) {
        let keep = self.meta.exemplar.clone();
        self.labels.retain(|id, _| Some(id) == keep.as_ref());
    }

    pub fn add_corrections(&mut self, id: &str, corrections: Vec<PartialCorrection>) -> Result<()> {
        for c in &corrections {
            c.validate()?;
            if c.image != id {
                return Err(Error::Data(format!("correction for {:?} filed under {id:?}", c.image)));
            }
        }
        let s = self.sample_mut(id).ok_or_else(|| Error::Data(format!("unknown image id {id:?}")))?;
        s.corrections.extend(corrections);
        Ok(())
    }

    pub fn clear_corrections(&mut self) {
        self.samples.iter_mut().for_each(|s| s.corrections.clear());
    }

    pub fn correction_count(&self) -> usize {
        self.samples.iter().map(|s| s.corrections.len()).sum()
    }

    /// The training-visible part of the dataset. Fails without a labeled exemplar.
    pub fn training_view(&self) -> Result<TrainingView<'_>> {
        let id = self
            .meta
            .exemplar
            .as_deref()
            .ok_or_else(|| Error::Config("dataset has no exemplar; run select-exemplar first".into()))?;
        let exemplar = self
            .labels
            .get(id)
            .ok_or_else(|| Error::Data(format!("exemplar {id:?} has no label")))?;
        Ok(TrainingView { exemplar_id: id, exemplar, samples: &self.samples })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let meta: Meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?
        } else {
            Meta { exemplar: None, n_vertices: 64, provenance: serde_json::Value::Null }
        };
        let images_dir = root.join("images");
        if !images_dir.is_dir() {
            return Err(Error::Data(format!("{} has no images/ directory", root.display())));
        }
        let mut samples = Vec::new();
        for path in read_dir_sorted(&images_dir)? {
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            let Some(ext) = ext.filter(|e| e == "png" || e == "pgm") else { continue };
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if samples.iter().any(|s: &Sample| s.id == id) {
                return Err(Error::Data(format!("duplicate image id {id:?}")));
            }
            let image = GrayImage::read(&path)?;
            samples.push(Sample { id, image, format: ext, corrections: Vec::new() });
        }
        let mut labels = BTreeMap::new();
        for path in read_dir_sorted(&root.join("labels"))? {
            let Some(id) = strip_suffix(&path, ".contour.json") else { continue };
            let c = Contour::read_json(&path)?;
            if let Some(s) = samples.iter().find(|s| s.id == id) {
                let (w, h) = (s.image.width as f64, s.image.height as f64);
                if c.vertices.iter().any(|p| p.x < -0.5 || p.y < -0.5 || p.x > w - 0.5 || p.y > h - 0.5) {
                    return Err(Error::format(&path, format!("contour leaves the {w}x{h} image")));
                }
            }
            labels.insert(id.to_string(), c);
        }
        for path in read_dir_sorted(&root.join("corrections"))? {
            let Some(id) = strip_suffix(&path, ".corrections.json") else { continue };
            let file = CorrectionsFile::read(&path)?;
            if file.image != id {
                return Err(Error::format(&path, format!("file names image {:?}", file.image)));
            }
            let s = samples
                .iter_mut()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::format(&path, "corrections for an unknown image"))?;
            s.corrections = file.into_corrections();
        }
        let mut ds = Self::new(meta, samples, labels)?;
        ds.root = Some(root.to_path_buf());
        Ok(ds)
    }

    /// Writes the full layout under `root`, replacing existing label and
    /// correction files for the dataset's ids.
    pub fn save(&self, root: &Path) -> Result<()> {
        for sub in ["images", "labels", "corrections"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in &self.samples {
            s.image.write(&root.join("images").join(format!("{}.{}", s.id, s.format)))?;
            let cpath = root.join("corrections").join(format!("{}.corrections.json", s.id));
            if s.corrections.is_empty() {
                if cpath.exists() {
                    fs::remove_file(&cpath).map_err(|e| Error::io(&cpath, e))?;
                }
            } else {
                CorrectionsFile::from_corrections(&s.id, &s.corrections).write(&cpath)?;
            }
        }
        for (id, c) in &self.labels {
            c.write_json(&root.join("labels").join(format!("{id}.contour.json")))?;
        }
        self.save_meta(root)
    }

    /// Rewrites `corrections/` only.
    pub fn save_corrections(&self, root: &Path) -> Result<()> {
        let dir = root.join("corrections");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in self.samples.iter().filter(|s| !s.corrections.is_empty()) {
            CorrectionsFile::from_corrections(&s.id, &s.corrections)
                .write(&dir.join(format!("{}.corrections.json", s.id)))?;
        }
        Ok(())
    }

    pub fn save_meta(&self, root: &Path) -> Result<()> {
        let path = root.join("meta.json");
        let text = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests;
