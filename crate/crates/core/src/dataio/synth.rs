//! Synthetic blob corpora.
//!
//! Every image shows one smooth star-shaped blob: dark interior (0.25) on a
//! bright background (0.75), a Gaussian-blurred boundary and additive pixel
//! noise. All blobs share a base shape drawn from the seed; each image adds
//! its own smaller shape perturbation and a random pose.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Meta, Sample};
use crate::error::{Error, Result};
use crate::geometry::{resample_uniform, Contour, Point};
use crate::imaging::GrayImage;

pub const INTERIOR: f64 = 0.25;
pub const EXTERIOR: f64 = 0.75;
const CONTROL_POINTS: usize = 16;
const MAX_HARMONIC: usize = 3;
const DENSE: usize = 720;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub n_vertices: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// Seed of the shared base shape; defaults to `seed` when absent.
    pub family_seed: Option<u64>,
    /// Mean radius as a fraction of the image side.
    pub radius: f64,
    /// Relative radial perturbation of the shared base shape.
    pub base_jitter: f64,
    /// Relative radial perturbation per image.
    pub shape_jitter: f64,
    /// Max translation of the blob center, pixels.
    pub max_shift: f64,
    /// Max rotation, degrees.
    pub max_rotation: f64,
    /// Isotropic scale range.
    pub scale_range: (f64, f64),
    pub blur_sigma: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 40,
            size: 64,
            n_vertices: 64,
            noise: 0.02,
            seed: 7,
            family_seed: None,
            radius: 0.3,
            base_jitter: 0.25,
            shape_jitter: 0.06,
            max_shift: 4.0,
            max_rotation: 15.0,
            scale_range: (0.9, 1.1),
            blur_sigma: 1.5,
            id_prefix: "img_".into(),
        }
    }
}

/// Periodic radius function from control radii, keeping only low harmonics.
#[derive(Debug, Clone)]
struct RadialShape {
    coeffs: Vec<(f64, f64)>,
}

impl RadialShape {
    fn from_controls(r: &[f64]) -> Self {
        let k = r.len() as f64;
        let coeffs = (0..=MAX_HARMONIC)
            .map(|h| {
                let (mut a, mut b) = (0.0, 0.0);
                for (i, &v) in r.iter().enumerate() {
                    let t = 2.0 * PI * (h * i) as f64 / k;
                    a += v * t.cos();
                    b += v * t.sin();
                }
                let s = if h == 0 { 1.0 / k } else { 2.0 / k };
                (a * s, b * s)
            })
            .collect();
        Self { coeffs }
    }

    fn radius(&self, theta: f64) -> f64 {
        self.coeffs.iter().enumerate().map(|(h, &(a, b))| a * (h as f64 * theta).cos() + b * (h as f64 * theta).sin()).sum()
    }
}

/// One posed blob: center, rotation, scale and radius function.
#[derive(Debug, Clone)]
struct Blob {
    center: Point,
    rotation: f64,
    scale: f64,
    shape: RadialShape,
}

impl Blob {
    fn inside(&self, p: Point) -> bool {
        let d = p - self.center;
        let r = (d.x * d.x + d.y * d.y).sqrt();
        let theta = d.y.atan2(d.x) - self.rotation;
        r < self.scale * self.shape.radius(theta)
    }

    /// Dense boundary polygon starting on the blob's own x-axis, counter-clockwise in image coordinates.
    fn boundary(&self, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                let r = self.scale * self.shape.radius(t);
                let a = t + self.rotation;
                Point::new(self.center.x + r * a.cos(), self.center.y + r * a.sin())
            })
            .collect()
    }
}

fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |src: &GrayImage, horizontal: bool| {
        GrayImage::from_fn(src.width, src.height, |x, y| {
            k.iter()
                .enumerate()
                .map(|(j, &w)| {
                    let d = j as isize - r;
                    let (xx, yy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    w * src.get_clamped(xx, yy)
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// Renders `blob` with anti-aliased coverage, blur and noise, quantized to
/// the 16-bit PGM grid.
fn render(blob: &Blob, size: usize, sigma: f64, noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let ss = SUPERSAMPLE as f64;
    let sharp = GrayImage::from_fn(size, size, |x, y| {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let p = Point::new(x as f64 + (sx as f64 + 0.5) / ss - 0.5, y as f64 + (sy as f64 + 0.5) / ss - 0.5);
                hits += blob.inside(p) as usize;
            }
        }
        let cover = hits as f64 / (ss * ss);
        EXTERIOR + (INTERIOR - EXTERIOR) * cover
    });
    let mut out = gaussian_blur(&sharp, sigma);
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("finite noise");
        out.pixels.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    out.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out.quantized()
}

/// Renders one blob image and its ground-truth contour; exposed for tests and benches.
pub fn render_blob(config: &SynthConfig, index: u64) -> Result<(GrayImage, Contour)> {
    let family = family_shape(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index));
    sample_blob(config, &family, &mut rng)
}

fn family_shape(config: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.family_seed.unwrap_or(config.seed) ^ 0xFA41_1E5E_ED00_0000);
    (0..CONTROL_POINTS).map(|_| 1.0 + config.base_jitter * rng.random_range(-1.0..1.0)).collect()
}

fn sample_blob(config: &SynthConfig, family: &[f64], rng: &mut ChaCha8Rng) -> Result<(GrayImage, Contour)> {
    let base = config.radius * config.size as f64;
    let controls: Vec<f64> =
        family.iter().map(|&f| base * f * (1.0 + config.shape_jitter * rng.random_range(-1.0..1.0))).collect();
    let shape = RadialShape::from_controls(&controls);
    let c = (config.size as f64 - 1.0) / 2.0;
    let (lo, hi) = config.scale_range;
    let blob = Blob {
        center: Point::new(
            c + config.max_shift * rng.random_range(-1.0..=1.0),
            c + config.max_shift * rng.random_range(-1.0..=1.0),
        ),
        rotation: config.max_rotation.to_radians() * rng.random_range(-1.0..=1.0),
        scale: if hi > lo { rng.random_range(lo..hi) } else { lo },
        shape,
    };
    let image = render(&blob, config.size, config.blur_sigma, config.noise, rng);
    let contour = resample_uniform(&blob.boundary(DENSE), config.n_vertices, true)?.to_canonical_orientation();
    let max = config.size as f64 - 1.0;
    if contour.vertices.iter().any(|p| p.x < 0.0 || p.y < 0.0 || p.x > max || p.y > max) {
        return Err(Error::Config("synthetic blob leaves the image; reduce radius or jitter".into()));
    }
    Ok((image, contour))
}

/// Deterministic synthetic dataset with ground truth for every image and no exemplar.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    if config.count < 2 {
        return Err(Error::Config(format!("need at least 2 images, got {}", config.count)));
    }
    if config.size < 16 || config.n_vertices < 5 {
        return Err(Error::Config("image size must be at least 16 and vertex count at least 5".into()));
    }
    let bounds_ok = config.radius > 0.0
        && config.scale_range.0 > 0.0
        && config.scale_range.1 >= config.scale_range.0
        && config.noise >= 0.0
        && config.max_shift >= 0.0;
    if !bounds_ok || !(0.0..1.0).contains(&config.base_jitter) || !(0.0..1.0).contains(&config.shape_jitter) {
        return Err(Error::Config("invalid synthetic shape parameters".into()));
    }
    let width = (config.count - 1).to_string().len().max(3);
    let mut samples = Vec::with_capacity(config.count);
    let mut labels = std::collections::BTreeMap::new();
    for i in 0..config.count {
        let (image, contour) = render_blob(config, i as u64)?;
        let id = format!("{}{:0width$}", config.id_prefix, i);
        labels.insert(id.clone(), contour);
        samples.push(Sample { id, image, format: "pgm".into(), corrections: Vec::new() });
    }
    let meta = Meta {
        exemplar: None,
        n_vertices: config.n_vertices,
        provenance: serde_json::json!({ "generator": "synthetic-blob", "config": config }),
    };
    Dataset::new(meta, samples, labels)
}
