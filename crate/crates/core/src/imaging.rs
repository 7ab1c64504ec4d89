//! Single-channel images with intensities in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Contour;

/// Max value used when writing 16-bit PGM. Divisible by 4, so the levels
/// 0.25, 0.5 and 0.75 are stored exactly.
pub const PGM_MAXVAL: u16 = 65532;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with coordinates clamped to the border.
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// `[1×H×W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.height, self.width], &self.pixels).expect("pixel count matches shape")
    }

    /// Rounds every pixel to the nearest level representable in 16-bit PGM.
    pub fn quantized(&self) -> GrayImage {
        let m = PGM_MAXVAL as f64;
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() / m).collect(),
        }
    }

    /// Binary 16-bit PGM (P5) with maxval [`PGM_MAXVAL`].
    pub fn to_pgm16(&self) -> Vec<u8> {
        let m = PGM_MAXVAL as f64;
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, PGM_MAXVAL).into_bytes();
        for &v in &self.pixels {
            let q = (v.clamp(0.0, 1.0) * m).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    /// 8-bit grayscale PNG.
    pub fn to_png8(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        encode_png(self.width, self.height, ::image::ExtendedColorType::L8, &bytes)
    }

    /// RGB PNG of the image with `contour` drawn in red.
    pub fn overlay_png(&self, contour: &Contour) -> Result<Vec<u8>> {
        let mut rgb: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            })
            .collect();
        let mut plot = |x: f64, y: f64| {
            let (xi, yi) = (x.round(), y.round());
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < self.width && (yi as usize) < self.height {
                let k = 3 * (yi as usize * self.width + xi as usize);
                rgb[k..k + 3].copy_from_slice(&[255, 0, 0]);
            }
        };
        for (a, b) in contour.edges() {
            let steps = (a.dist(b) * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                plot(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
            }
        }
        encode_png(self.width, self.height, ::image::ExtendedColorType::Rgb8, &rgb)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = match extension(path).as_deref() {
            Some("png") => {
                let mut raw = Vec::with_capacity(self.pixels.len() * 2);
                for &v in &self.pixels {
                    raw.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
                }
                encode_png(self.width, self.height, ::image::ExtendedColorType::L16, &raw)?
            }
            _ => self.to_pgm16(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a grayscale PGM (P5/P2) or PNG, scaling intensities to `[0, 1]`.
    pub fn read(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        match extension(path).as_deref() {
            Some("pgm") => parse_pgm(&bytes).map_err(|d| Error::format(path, d)),
            Some("png") => {
                let img = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)
                    .map_err(|e| Error::format(path, e.to_string()))?;
                let color = img.color();
                if color.has_color() {
                    return Err(Error::format(path, "image is not single-channel"));
                }
                let luma = img.to_luma16();
                let (w, h) = luma.dimensions();
                let pixels = luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
                GrayImage::new(w as usize, h as usize, pixels)
            }
            _ => Err(Error::format(path, "expected a .png or .pgm image")),
        }
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

fn encode_png(width: usize, height: usize, color: ::image::ExtendedColorType, raw: &[u8]) -> Result<Vec<u8>> {
    use ::image::ImageEncoder;
    let mut out = Vec::new();
    ::image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, width as u32, height as u32, color)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out)
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad maxval {maxval}"));
    }
    let m = maxval as f64;
    let count = width * height;
    let pixels: Vec<f64> = match magic.as_str() {
        "P5" => {
            let body = &bytes[pos + 1..];
            if maxval < 256 {
                if body.len() < count {
                    return Err("truncated pixel data".into());
                }
                body[..count].iter().map(|&v| v as f64 / m).collect()
            } else {
                if body.len() < 2 * count {
                    return Err("truncated pixel data".into());
                }
                body.chunks_exact(2).take(count).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m).collect()
            }
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<f64>, _> =
                text.split_ascii_whitespace().take(count).map(|t| t.parse::<f64>().map(|v| v / m)).collect();
            let vals = vals.map_err(|_| "bad pixel value".to_string())?;
            if vals.len() < count {
                return Err("truncated pixel data".into());
            }
            vals
        }
        other => return Err(format!("unsupported magic {other:?}; expected grayscale P5 or P2")),
    };
    GrayImage::new(width, height, pixels).map_err(|e| e.to_string())
}
