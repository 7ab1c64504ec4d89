use super::Dataset;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::losses::PerceptualExtractor;

/// Per-channel spatial mean of every extractor level, concatenated.
pub fn global_descriptor(extractor: &PerceptualExtractor, image: &GrayImage) -> Result<Vec<f64>> {
    let feats = extractor.extract(image)?;
    let mut out = Vec::with_capacity(extractor.total_channels());
    for level in &feats.levels {
        let plane: usize = level.map.shape()[1..].iter().product();
        for ch in level.map.data().chunks(plane) {
            out.push(ch.iter().sum::<f64>() / plane as f64);
        }
    }
    Ok(out)
}

/// Id of the image whose descriptor has the smallest summed L2 distance to
/// all others; ties go to the lexicographically smallest id.
pub fn select_exemplar(dataset: &Dataset, extractor: &PerceptualExtractor) -> Result<String> {
    if dataset.len() < 2 {
        return Err(Error::Data(format!("exemplar selection needs at least 2 images, got {}", dataset.len())));
    }
    let desc: Vec<Vec<f64>> =
        dataset.samples().iter().map(|s| global_descriptor(extractor, &s.image)).collect::<Result<_>>()?;
    let n = desc.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = desc[i].iter().zip(&desc[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // samples are sorted by id, so the first strict minimum is the tie winner
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let total: f64 = dist[i * n..(i + 1) * n].iter().sum();
        if total < best.0 {
            best = (total, i);
        }
    }
    Ok(dataset.samples()[best.1].id.clone())
}
