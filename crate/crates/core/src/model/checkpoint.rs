//! Checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic            8 bytes "CTNCKPT1"
//! config           u32 length + UTF-8 JSON (CheckpointConfig)
//! param_count      u32
//! per parameter:   u32 name length, name, u32 rank, u32 × rank dims,
//!                  u8 decay flag, f64 × numel values
//! extractor        u32 length + CTNFEAT1 bytes
//! exemplar         u32 vertex count, f64 × 2N (x, y pairs)
//! exemplar feats   u32 level count, per level u32 rows, u32 cols, f64 × rows·cols
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{initial_contour, Model, ModelConfig, Param, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Contour, Point};
use crate::imaging::GrayImage;
use crate::losses::{PerceptualExtractor, PerceptualOptions, VertexFeatures};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTNCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub perceptual: PerceptualOptions,
    pub exemplar_id: String,
    pub exemplar_width: usize,
    pub exemplar_height: usize,
    /// Training configuration, recorded verbatim.
    pub train: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ParamStore,
    pub extractor: PerceptualExtractor,
    pub exemplar: Contour,
    pub exemplar_features: VertexFeatures,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.checked_add(n).unwrap_or(usize::MAX))
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.model.clone(), self.params.clone())
    }

    /// Initial contour for an image of the given size.
    pub fn initial_contour(&self, width: usize, height: usize) -> Contour {
        initial_contour(&self.exemplar, (self.config.exemplar_width, self.config.exemplar_height), width, height)
    }

    /// Contours after every block for `image`.
    pub fn predict_blocks(&self, image: &GrayImage) -> Result<Vec<Contour>> {
        let model = self.model()?;
        model.forward::<f32>(image, &self.initial_contour(image.width, image.height))
    }

    pub fn predict(&self, image: &GrayImage) -> Result<Contour> {
        Ok(self.predict_blocks(image)?.pop().expect("at least one block"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Data(format!("config encoding: {e}")))?;
        put_u32(&mut out, json.len());
        out.extend(json);
        put_u32(&mut out, self.params.len());
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            out.push(p.decay as u8);
            put_f64s(&mut out, p.value.data());
        }
        let ex = self.extractor.to_bytes();
        put_u32(&mut out, ex.len());
        out.extend(ex);
        put_u32(&mut out, self.exemplar.len());
        for v in &self.exemplar.vertices {
            put_f64s(&mut out, &[v.x, v.y]);
        }
        put_u32(&mut out, self.exemplar_features.levels.len());
        for t in &self.exemplar_features.levels {
            put_u32(&mut out, t.shape()[0]);
            put_u32(&mut out, t.shape()[1]);
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Data("missing CTNCKPT1 magic".into()));
        }
        let config: CheckpointConfig = serde_json::from_slice(r.blob()?)
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        config.model.validate()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let rank = r.u32()?;
            if rank > 8 {
                return Err(Error::Data(format!("parameter {name} has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let decay = r.take(1)?[0] != 0;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = r.f64s(numel.ok_or_else(|| Error::Data("parameter size overflow".into()))?)?;
            params.push(Param { name, value: Tensor::new(&shape, data)?, decay });
        }
        let params = ParamStore::from_params(params)?;
        params.check_layout(&config.model)?;
        let extractor = PerceptualExtractor::from_bytes(r.blob()?)?;
        let n = r.u32()?;
        let xy = r.f64s(n.saturating_mul(2))?;
        let exemplar = Contour::closed(xy.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect());
        if n != config.model.n_vertices {
            return Err(Error::VertexCount { expected: config.model.n_vertices, actual: n });
        }
        let levels = r.u32()?;
        let mut feats = Vec::new();
        for _ in 0..levels {
            let (rows, cols) = (r.u32()?, r.u32()?);
            feats.push(Tensor::new(&[rows, cols], r.f64s(rows.saturating_mul(cols))?)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, params, extractor, exemplar, exemplar_features: VertexFeatures { levels: feats } })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}
