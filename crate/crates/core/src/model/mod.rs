//! Contour transformer network: a small convolutional encoder followed by
//! cascaded graph-convolution blocks that move contour vertices.
//!
//! The encoder has four stages of two `3×3 conv → instance norm → relu`
//! units; the first conv of stages 2–4 has stride 2. Stage 4 is upsampled by
//! nearest neighbor and added to stage 3, giving a map at stride 4.
//!
//! Each block samples that map at the current vertices, appends the
//! normalized vertex coordinates and runs `gcn_layers` layers of
//!
//! ```text
//! h'_i = relu(h_i · W_self + mean(h_{i±1}, h_{i±2}) · W_nbr + b)
//! ```
//!
//! then a linear head to offsets in normalized units, which are scaled by the
//! image size. Heads start at zero, so an untrained model returns its initial
//! contour from every block.

mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, CheckpointConfig, CHECKPOINT_MAGIC};
pub use params::{Param, ParamStore};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{center_initialize, Contour, Point};
use crate::imaging::GrayImage;
use crate::losses::contour_tensor;

/// Total stride of the encoder's deepest stage; inputs are padded to a multiple.
pub const ENCODER_ALIGN: usize = 8;
/// Stride of the map the blocks sample from.
pub const FEATURE_STRIDE: usize = 4;
/// Parameter count of [`ModelConfig::default`].
pub const DEFAULT_PARAM_COUNT: usize = 1_054_810;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Contour vertex count.
    pub n_vertices: usize,
    /// Output channels of the four encoder stages; the last two must match.
    pub encoder_channels: [usize; 4],
    pub gcn_blocks: usize,
    pub gcn_layers: usize,
    pub gcn_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_vertices: 64, encoder_channels: [16, 32, 64, 64], gcn_blocks: 5, gcn_layers: 6, gcn_width: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.encoder_channels;
        if self.n_vertices < 5 {
            return Err(Error::Config(format!("need at least 5 contour vertices, got {}", self.n_vertices)));
        }
        if c.contains(&0) || c[2] != c[3] {
            return Err(Error::Config(format!("bad encoder channels {c:?}")));
        }
        if self.gcn_blocks == 0 || self.gcn_layers == 0 || self.gcn_width == 0 {
            return Err(Error::Config("GCN blocks, layers and width must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the sampled encoder map.
    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[3]
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = 1;
        for &c in &self.encoder_channels {
            total += cin * c * 9 + 2 * c + c * c * 9 + 2 * c;
            cin = c;
        }
        let w = self.gcn_width;
        let f = self.feature_channels() + 2;
        let block = (2 * f * w + w) + (self.gcn_layers - 1) * (2 * w * w + w) + (2 * w + 2);
        total + self.gcn_blocks * block
    }
}

/// Ring adjacency: each vertex averages its two neighbors on either side.
pub fn ring_mean_matrix(n: usize) -> Tensor<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for d in [n - 2, n - 1, 1, 2] {
            a[i * n + (i + d) % n] += 0.25;
        }
    }
    Tensor::new(&[n, n], a).expect("square")
}

/// Scales `exemplar` about its centroid by the ratio of image diagonals when
/// the target size differs, then centers it in the target image.
pub fn initial_contour(exemplar: &Contour, exemplar_dims: (usize, usize), width: usize, height: usize) -> Contour {
    let diag = |w: usize, h: usize| ((w * w + h * h) as f64).sqrt();
    let scaled = if exemplar_dims == (width, height) {
        exemplar.clone()
    } else {
        let s = diag(width, height) / diag(exemplar_dims.0, exemplar_dims.1);
        exemplar.scale_about(exemplar.centroid(), s)
    };
    center_initialize(&scaled, width, height)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Graph handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// One per entry of the parameter store, in store order.
    pub params: Vec<Var>,
    /// `[N×2]` pixel coordinates after each block.
    pub blocks: Vec<Var>,
}

fn replicate_pad_to(image: &GrayImage, align: usize) -> GrayImage {
    let w = image.width.div_ceil(align) * align;
    let h = image.height.div_ceil(align) * align;
    if (w, h) == (image.width, image.height) {
        return image.clone();
    }
    GrayImage::from_fn(w, h, |x, y| image.get(x.min(image.width - 1), y.min(image.height - 1)))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encoder output `[C×H'×W']` at stride [`FEATURE_STRIDE`] of the padded image.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], image: &GrayImage) -> Result<Var> {
        if image.width < ENCODER_ALIGN || image.height < ENCODER_ALIGN {
            return Err(Error::ImageTooSmall { width: image.width, height: image.height, min: ENCODER_ALIGN });
        }
        let padded = replicate_pad_to(image, ENCODER_ALIGN);
        let p = |name: String| vars[self.params.index(&name)];
        let mut x = g.input(padded.to_tensor());
        let mut skip = None;
        for s in 0..4 {
            for c in 0..2 {
                let stride = if s > 0 && c == 0 { 2 } else { 1 };
                x = g.conv2d(x, p(format!("enc.s{s}.c{c}.w")), stride, 1)?;
                x = g.instance_norm(x, p(format!("enc.s{s}.c{c}.gamma")), p(format!("enc.s{s}.c{c}.beta")))?;
                x = g.relu(x)?;
            }
            if s == 2 {
                skip = Some(x);
            }
        }
        let skip = skip.expect("stage 3 ran");
        let (c, h, w) = {
            let s = g.shape(skip);
            (s[0], s[1], s[2])
        };
        let (h8, w8) = (g.shape(x)[1], g.shape(x)[2]);
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    index.push((ch * h8 + y / 2) * w8 + xx / 2);
                }
            }
        }
        let up = g.gather(x, index, &[c, h, w])?;
        g.add(skip, up)
    }

    /// `[N×(C+2)]`: map features at `coords / stride` and `(x/w, y/h)`.
    pub fn vertex_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        map: Var,
        coords: Var,
        width: usize,
        height: usize,
    ) -> Result<Var> {
        let n = g.shape(coords)[0];
        let scaled = g.scale(coords, T::from_f64_lossy(1.0 / FEATURE_STRIDE as f64))?;
        let sampled = g.bilinear_sample(map, scaled)?;
        let inv: Vec<f64> = (0..n).flat_map(|_| [1.0 / width as f64, 1.0 / height as f64]).collect();
        let inv = g.input(Tensor::from_f64(&[n, 2], &inv)?);
        let norm = g.mul(coords, inv)?;
        g.concat(&[sampled, norm], 1)
    }

    /// Offsets `[N×2]` in normalized units from block `b`.
    pub fn gcn_block<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], b: usize, features: Var) -> Result<Var> {
        let n = g.shape(features)[0];
        if n != self.config.n_vertices {
            return Err(Error::VertexCount { expected: self.config.n_vertices, actual: n });
        }
        let p = |name: String| vars[self.params.index(&name)];
        let adj = g.input(ring_mean_matrix(n).cast());
        let mut h = features;
        for l in 0..self.config.gcn_layers {
            let own = g.matmul(h, p(format!("gcn.b{b}.l{l}.w_self")))?;
            let mean = g.matmul(adj, h)?;
            let nbr = g.matmul(mean, p(format!("gcn.b{b}.l{l}.w_nbr")))?;
            let sum = g.add(own, nbr)?;
            let biased = g.add_bias(sum, p(format!("gcn.b{b}.l{l}.bias")))?;
            h = g.relu(biased)?;
        }
        let out = g.matmul(h, p(format!("gcn.b{b}.head.w")))?;
        g.add_bias(out, p(format!("gcn.b{b}.head.b")))
    }

    /// Records the full forward pass from the initial contour `init`.
    pub fn record<T: Real>(&self, g: &mut Graph<T>, image: &GrayImage, init: &Contour) -> Result<Recorded> {
        if init.len() != self.config.n_vertices {
            return Err(Error::VertexCount { expected: self.config.n_vertices, actual: init.len() });
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.value.cast())).collect();
        let map = self.encode(g, &params, image)?;
        let (w, h) = (image.width, image.height);
        let n = init.len();
        let dims: Vec<f64> = (0..n).flat_map(|_| [w as f64, h as f64]).collect();
        let dims = g.input(Tensor::from_f64(&[n, 2], &dims)?);
        let mut coords = g.input(contour_tensor(init));
        let mut blocks = Vec::with_capacity(self.config.gcn_blocks);
        for b in 0..self.config.gcn_blocks {
            let feats = self.vertex_features(g, map, coords, w, h)?;
            let offsets = self.gcn_block(g, &params, b, feats)?;
            let pixels = g.mul(offsets, dims)?;
            coords = g.add(coords, pixels)?;
            blocks.push(coords);
        }
        Ok(Recorded { params, blocks })
    }

    /// Contours after every block; the last is the prediction.
    pub fn forward<T: Real>(&self, image: &GrayImage, init: &Contour) -> Result<Vec<Contour>> {
        let mut g = Graph::<T>::new();
        let rec = self.record(&mut g, image, init)?;
        Ok(rec.blocks.iter().map(|&v| tensor_contour(g.value(v))).collect())
    }
}

pub(crate) fn tensor_contour<T: Real>(t: &Tensor<T>) -> Contour {
    Contour::closed(t.to_f64_vec().chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
}
