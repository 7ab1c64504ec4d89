//! Frozen multi-level feature extractor and the contour perceptual loss.
//!
//! The default extractor is a fixed two-level filter bank:
//!
//! * level 1: 16 oriented 7×7 derivative-of-Gaussian filters at stride 1
//!   (8 first-derivative directions, 4 second-derivative directions and 4
//!   fine-scale first-derivative directions), each zero-mean;
//! * level 2: 32 channels at stride 2, a 3×3 convolution over the level-1
//!   responses whose 32 filters are orthonormal vectors drawn from a fixed
//!   seed, followed by relu.
//!
//! Borders are replicated before each convolution so a constant image gives
//! exactly zero level-1 response.
//!
//! # Weight file (`CTNFEAT1`)
//!
//! All integers little-endian.
//!
//! ```text
//! magic          8 bytes  "CTNFEAT1"
//! level_count    u32
//! per level:
//!   out_channels u32
//!   in_channels  u32
//!   kernel       u32      square kernel side
//!   stride       u32
//!   padding      u32      replicated border width
//!   relu         u32      0 or 1
//! per level, in order:
//!   weights      f32 × out·in·kernel·kernel, layout [out][in][ky][kx]
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{kernels, matmul_into, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::imaging::GrayImage;

pub const FEATURE_MAGIC: &[u8; 8] = b"CTNFEAT1";

/// Seed of the default level-2 projection.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f11e;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterLevel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<f32>,
}

impl FilterLevel {
    fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Frozen feature extractor: a chain of fixed convolution levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    levels: Vec<FilterLevel>,
}

/// Feature maps of one image, one entry per extractor level.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualFeatures {
    pub levels: Vec<FeatureLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub level: usize,
    /// Spatial stride relative to the image.
    pub stride: usize,
    /// `[C×H×W]`.
    pub map: Tensor<f64>,
}

impl FeatureLevel {
    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }
}

/// Level-1 tap scale. A power of two, so the quantized taps stay exact.
const LEVEL1_GAIN: f64 = 1.0 / 512.0;

fn gaussian_derivative(size: usize, sigma: f64, theta: f64, order: u8) -> Vec<f64> {
    let r = (size / 2) as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let mut w = Vec::with_capacity(size * size);
    for ky in 0..size {
        for kx in 0..size {
            let (x, y) = (kx as f64 - r, ky as f64 - r);
            let u = x * c + y * s;
            let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            w.push(match order {
                1 => -u * g,
                _ => (u * u / (sigma * sigma) - 1.0) * g,
            });
        }
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v -= mean);
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    // Quantize to multiples of 2⁻¹⁶ and absorb the rounding residue in the
    // center tap, so the taps are exact in f32 and sum to exactly zero.
    let mut q: Vec<i64> = w.iter().map(|v| (v * 2.0 / l1 * 65536.0).round() as i64).collect();
    let residue: i64 = q.iter().sum();
    q[size * size / 2] -= residue;
    q.into_iter().map(|v| v as f64 / 65536.0 * LEVEL1_GAIN).collect()
}

fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out.concat()
}

fn replicate_pad(data: &[f64], c: usize, h: usize, w: usize, p: usize) -> (Vec<f64>, usize, usize) {
    if p == 0 {
        return (data.to_vec(), h, w);
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..hp {
            let sy = (y as isize - p as isize).clamp(0, h as isize - 1) as usize;
            for x in 0..wp {
                let sx = (x as isize - p as isize).clamp(0, w as isize - 1) as usize;
                out[(ch * hp + y) * wp + x] = data[(ch * h + sy) * w + sx];
            }
        }
    }
    (out, hp, wp)
}

impl PerceptualExtractor {
    /// The default desk-scale filter bank.
    pub fn default_bank() -> Self {
        Self::filter_bank(DEFAULT_EXTRACTOR_SEED)
    }

    pub fn filter_bank(seed: u64) -> Self {
        use std::f64::consts::PI;
        let mut l1 = Vec::with_capacity(16 * 49);
        for k in 0..8 {
            l1.extend(gaussian_derivative(7, 1.5, 2.0 * PI * k as f64 / 8.0, 1));
        }
        for k in 0..4 {
            l1.extend(gaussian_derivative(7, 1.5, PI * k as f64 / 4.0, 2));
        }
        for k in 0..4 {
            l1.extend(gaussian_derivative(7, 0.8, PI * k as f64 / 2.0, 1));
        }
        let l2 = orthonormal_rows(32, 16 * 9, seed);
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
        Self {
            levels: vec![
                FilterLevel { out_channels: 16, in_channels: 1, kernel: 7, stride: 1, padding: 3, relu: false, weights: to32(l1) },
                FilterLevel { out_channels: 32, in_channels: 16, kernel: 3, stride: 2, padding: 1, relu: true, weights: to32(l2) },
            ],
        }
    }

    /// Builds an extractor from externally supplied levels, checking the chain.
    pub fn from_levels(levels: Vec<FilterLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("extractor needs at least one level".into()));
        }
        let mut prev = 1;
        for (i, l) in levels.iter().enumerate() {
            if l.in_channels != prev || l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("extractor level {i} does not chain: {l:?}")));
            }
            if l.weights.len() != l.weight_count() {
                return Err(Error::Config(format!("extractor level {i} has {} weights", l.weights.len())));
            }
            if l.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Config(format!("extractor level {i} has non-finite weights")));
            }
            prev = l.out_channels;
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|l| l.out_channels).sum()
    }

    /// Smallest image side the extractor accepts.
    pub fn min_size(&self) -> usize {
        let mut stride = 1;
        let mut need = 1;
        for l in &self.levels {
            need = need.max(l.kernel * stride);
            stride *= l.stride;
        }
        need.max(stride)
    }

    pub fn extract(&self, image: &GrayImage) -> Result<PerceptualFeatures> {
        let min = self.min_size();
        if image.width < min || image.height < min {
            return Err(Error::ImageTooSmall { width: image.width, height: image.height, min });
        }
        let (mut data, mut c, mut h, mut w) = (image.pixels.clone(), 1usize, image.height, image.width);
        let mut stride = 1;
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, l) in self.levels.iter().enumerate() {
            let (padded, hp, wp) = replicate_pad(&data, c, h, w, l.padding);
            let geom = kernels::ConvGeom::new(c, hp, wp, l.kernel, l.stride, 0)
                .ok_or(Error::ImageTooSmall { width: image.width, height: image.height, min })?;
            let cols = kernels::im2col(&padded, &geom);
            let weights: Vec<f64> = l.weights.iter().map(|&v| v as f64).collect();
            let mut y = vec![0.0; l.out_channels * geom.cols()];
            matmul_into(l.out_channels, geom.rows(), geom.cols(), &weights, false, &cols, false, &mut y, false);
            if l.relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            stride *= l.stride;
            c = l.out_channels;
            h = geom.ho;
            w = geom.wo;
            out.push(FeatureLevel { level: i, stride, map: Tensor::new(&[c, h, w], y.clone())? });
            data = y;
        }
        Ok(PerceptualFeatures { levels: out })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FEATURE_MAGIC.to_vec();
        out.extend((self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            for v in [l.out_channels, l.in_channels, l.kernel, l.stride, l.padding, l.relu as usize] {
                out.extend((v as u32).to_le_bytes());
            }
        }
        for l in &self.levels {
            for w in &l.weights {
                out.extend(w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Data(format!("feature weights: {d}"));
        if bytes.len() < 12 || &bytes[..8] != FEATURE_MAGIC {
            return Err(bad("missing CTNFEAT1 magic"));
        }
        let mut pos = 8;
        let u32_at = |pos: &mut usize| -> Result<usize> {
            let s = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated header"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().unwrap()) as usize)
        };
        let count = u32_at(&mut pos)?;
        if count == 0 || count > 64 {
            return Err(bad("implausible level count"));
        }
        let mut levels = Vec::with_capacity(count);
        for _ in 0..count {
            let f: Vec<usize> = (0..6).map(|_| u32_at(&mut pos)).collect::<Result<_>>()?;
            levels.push(FilterLevel {
                out_channels: f[0],
                in_channels: f[1],
                kernel: f[2],
                stride: f[3],
                padding: f[4],
                relu: f[5] != 0,
                weights: Vec::new(),
            });
        }
        for l in &mut levels {
            let n = l.weight_count();
            let s = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated weights"))?;
            l.weights = s.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_levels(levels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Which feature levels feed the loss, and whether each level's distance is
/// divided by its channel count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PerceptualOptions {
    /// Level indices; empty means all levels.
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default)]
    pub normalize: bool,
}

impl Default for PerceptualOptions {
    fn default() -> Self {
        Self { levels: Vec::new(), normalize: false }
    }
}

impl PerceptualOptions {
    fn selected<'a>(&'a self, feats: &'a PerceptualFeatures) -> impl Iterator<Item = &'a FeatureLevel> + 'a {
        feats
            .levels
            .iter()
            .filter(move |l| self.levels.is_empty() || self.levels.contains(&l.level))
    }
}

/// Features sampled at each contour vertex, one tensor per selected level.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexFeatures {
    /// `[N×C_level]` per selected level.
    pub levels: Vec<Tensor<f64>>,
}

impl VertexFeatures {
    /// Samples `feats` at the vertices of `contour` (coordinates divided by each
    /// level's stride).
    pub fn sample(feats: &PerceptualFeatures, contour: &Contour, options: &PerceptualOptions) -> Result<Self> {
        let mut g = Graph::<f64>::new();
        let coords = g.input(contour_tensor(contour));
        let mut levels = Vec::new();
        for level in options.selected(feats) {
            let map = g.input(level.map.clone());
            let c = g.scale(coords, 1.0 / level.stride as f64)?;
            let s = g.bilinear_sample(map, c)?;
            levels.push(g.value(s).clone());
        }
        Ok(Self { levels })
    }

    /// Concatenated `[N×ΣC]` rows.
    pub fn concatenated(&self) -> Vec<Vec<f64>> {
        let n = self.levels.first().map_or(0, |t| t.shape()[0]);
        (0..n)
            .map(|i| {
                self.levels
                    .iter()
                    .flat_map(|t| {
                        let c = t.shape()[1];
                        t.data()[i * c..(i + 1) * c].to_vec()
                    })
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn contour_tensor<T: Real>(c: &Contour) -> Tensor<T> {
    let data: Vec<f64> = c.vertices.iter().flat_map(|p| [p.x, p.y]).collect();
    Tensor::from_f64(&[c.len(), 2], &data).expect("two coordinates per vertex")
}

/// Records `Σ_i ‖P(p_i) − P_E(p'_i)‖₁` for predicted `coords [N×2]` against
/// exemplar features sampled at the matching exemplar vertices.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    target: &PerceptualFeatures,
    exemplar: &VertexFeatures,
    options: &PerceptualOptions,
    coords: Var,
) -> Result<Var> {
    let n = g.shape(coords)[0];
    let selected: Vec<&FeatureLevel> = options.selected(target).collect();
    if selected.len() != exemplar.levels.len() || selected.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} target feature levels vs {} exemplar levels",
            selected.len(),
            exemplar.levels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (level, ex) in selected.into_iter().zip(&exemplar.levels) {
        if ex.shape() != [n, level.channels()] {
            return Err(Error::DimensionMismatch(format!(
                "exemplar features {:?} for {n} vertices and {} channels",
                ex.shape(),
                level.channels()
            )));
        }
        let map = g.input(level.map.cast());
        let c = g.scale(coords, T::from_f64_lossy(1.0 / level.stride as f64))?;
        let sampled = g.bilinear_sample(map, c)?;
        let reference = g.input(ex.cast());
        let diff = g.sub(sampled, reference)?;
        let mut dist = g.l1_norm(diff)?;
        if options.normalize {
            dist = g.scale(dist, T::from_f64_lossy(1.0 / level.channels() as f64))?;
        }
        total = Some(match total {
            None => dist,
            Some(t) => g.add(t, dist)?,
        });
    }
    Ok(total.expect("at least one level"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_shapes_for_64_square() {
        let ex = PerceptualExtractor::default_bank();
        let img = GrayImage::from_fn(64, 64, |x, y| ((x * 31 + y * 17) % 23) as f64 / 22.0);
        let f = ex.extract(&img).unwrap();
        assert_eq!(f.levels[0].map.shape(), &[16, 64, 64]);
        assert_eq!(f.levels[1].map.shape(), &[32, 32, 32]);
        assert_eq!(f.levels[1].stride, 2);
        assert_eq!(ex.total_channels(), 48);
    }

    #[test]
    fn constant_image_has_zero_level_one() {
        let ex = PerceptualExtractor::default_bank();
        let f = ex.extract(&GrayImage::filled(20, 16, 0.6)).unwrap();
        assert!(f.levels[0].map.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn extraction_is_deterministic() {
        let ex = PerceptualExtractor::default_bank();
        let img = GrayImage::from_fn(24, 24, |x, y| ((x * y) % 7) as f64 / 7.0);
        assert_eq!(ex.extract(&img).unwrap(), ex.extract(&img).unwrap());
        assert_eq!(PerceptualExtractor::default_bank(), ex);
    }

    #[test]
    fn too_small_image_rejected() {
        let ex = PerceptualExtractor::default_bank();
        assert!(matches!(ex.extract(&GrayImage::filled(5, 40, 0.0)), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn level_two_rows_are_orthonormal() {
        let rows = orthonormal_rows(32, 144, 1);
        for i in 0..32 {
            for j in 0..32 {
                let d: f64 = (0..144).map(|k| rows[i * 144 + k] * rows[j * 144 + k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let ex = PerceptualExtractor::default_bank();
        let bytes = ex.to_bytes();
        assert_eq!(&bytes[..8], b"CTNFEAT1");
        assert_eq!(bytes.len(), 8 + 4 + 2 * 24 + 4 * (16 * 49 + 32 * 144));
        assert_eq!(PerceptualExtractor::from_bytes(&bytes).unwrap(), ex);
        assert!(PerceptualExtractor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(PerceptualExtractor::from_bytes(&corrupt).is_err());
    }
}
