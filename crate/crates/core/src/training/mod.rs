//! One-shot training, correction-driven fine-tuning, evaluation and ablation.

mod adam;
mod eval;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{checkpoint_fingerprint, evaluate, evaluate_predictions, predict_all, ImageMetrics, MetricsReport, Summary};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::dataio::{Dataset, Sample, TrainingView};
use crate::error::{Error, Result};
use crate::geometry::{resample_uniform, Contour};
use crate::imaging::GrayImage;
use crate::losses::{
    gradient_magnitude, record_loss, ExemplarTargets, LossWeights, PerceptualExtractor, PerceptualFeatures,
    PerceptualOptions, SampleTargets, TpsSystem, VertexFeatures,
};
use crate::model::{initial_contour, Checkpoint, CheckpointConfig, Model, ModelConfig};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Apply the loss to every block's output (true) or only the last.
    pub per_block_loss: bool,
    /// Emit an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Train on the exemplar image as well.
    pub include_exemplar: bool,
    /// Keep encoder weights fixed (fine-tuning only).
    pub freeze_encoder: bool,
    pub adam: AdamConfig,
    /// Architecture, including the contour vertex count.
    pub model: ModelConfig,
    pub perceptual: PerceptualOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 200,
            seed: 0,
            per_block_loss: true,
            checkpoint_every: 0,
            include_exemplar: false,
            freeze_encoder: false,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            perceptual: PerceptualOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 1000 vertices, batch 12, 500 epochs.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 12,
            epochs: 500,
            model: ModelConfig { n_vertices: 1000, ..ModelConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        let rates_ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if !rates_ok {
            return Err(Error::Config("learning rate and weight decay must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub samples: usize,
    pub perc: f64,
    pub bend: f64,
    pub edge: f64,
    /// Mean over samples that have corrections; null when none do.
    pub pcm: Option<f64>,
    pub total: f64,
}

/// Hooks called from the training loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _epoch: usize, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes each epoch record as one JSON line.
pub struct NdjsonLog<W: Write>(pub W);

impl<W: Write> TrainObserver for NdjsonLog<W> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(format!("log encoding: {e}")))?;
        writeln!(self.0, "{line}").map_err(|e| Error::io("<training log>", e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Spacing in pixels that corrections are densified to before entering the
/// matching loss.
pub const CORRECTION_SPACING: f64 = 0.5;

/// Per-image data fixed for the whole run.
struct Prepared<'a> {
    id: &'a str,
    image: &'a GrayImage,
    features: PerceptualFeatures,
    edge: Tensor<f64>,
    init: Contour,
    corrections: Vec<Contour>,
}

/// Per-exemplar data fixed for the whole run.
struct Setup {
    extractor: PerceptualExtractor,
    exemplar_id: String,
    exemplar: Contour,
    exemplar_dims: (usize, usize),
    exemplar_features: VertexFeatures,
    tps: TpsSystem,
    perceptual: PerceptualOptions,
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleLoss {
    perc: f64,
    bend: f64,
    edge: f64,
    pcm: Option<f64>,
    total: f64,
}

fn prepare<'a>(setup: &Setup, samples: &'a [Sample], with_corrections: bool, include_exemplar: bool) -> Result<Vec<Prepared<'a>>> {
    samples
        .iter()
        .filter(|s| include_exemplar || s.id != setup.exemplar_id)
        .map(|s| {
            Ok(Prepared {
                id: &s.id,
                image: &s.image,
                features: setup.extractor.extract(&s.image)?,
                edge: gradient_magnitude(&s.image)?,
                init: initial_contour(&setup.exemplar, setup.exemplar_dims, s.image.width, s.image.height),
                corrections: if with_corrections {
                    s.corrections.iter().map(|c| c.contour.densified(CORRECTION_SPACING)).collect()
                } else {
                    Vec::new()
                },
            })
        })
        .collect()
}

fn sample_step(model: &Model, setup: &Setup, s: &Prepared<'_>, cfg: &TrainConfig) -> Result<(Vec<Vec<f64>>, SampleLoss)> {
    let mut g = Graph::<f32>::new();
    let rec = model.record(&mut g, s.image, &s.init)?;
    let exemplar = ExemplarTargets { tps: &setup.tps, features: &setup.exemplar_features, options: &setup.perceptual };
    let targets = SampleTargets { features: &s.features, edge_map: &s.edge, corrections: &s.corrections };
    let blocks: &[_] = if cfg.per_block_loss { &rec.blocks } else { &rec.blocks[rec.blocks.len() - 1..] };
    let mut total = None;
    let mut loss = SampleLoss::default();
    for &b in blocks {
        let r = record_loss(&mut g, &cfg.weights, &exemplar, &targets, b)?;
        let c = r.components(&g);
        loss.perc += c.perc;
        loss.bend += c.bend;
        loss.edge += c.edge;
        if let Some(p) = c.pcm {
            loss.pcm = Some(loss.pcm.unwrap_or(0.0) + p);
        }
        total = Some(match total {
            None => r.total,
            Some(t) => g.add(t, r.total)?,
        });
    }
    let total = total.expect("at least one block");
    loss.total = g.value(total).item() as f64;
    for (name, v) in [("perc", loss.perc), ("bend", loss.bend), ("edge", loss.edge), ("pcm", loss.pcm.unwrap_or(0.0)), ("total", loss.total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { sample: s.id.to_string(), component: name });
        }
    }
    let grads = g.backward(total)?;
    let grads: Vec<Vec<f64>> = rec.params.iter().map(|&p| grads.wrt(p).to_f64_vec()).collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { sample: s.id.to_string(), component: "gradient" });
    }
    Ok((grads, loss))
}

fn make_checkpoint(model: &Model, setup: &Setup, cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: CheckpointConfig {
            model: model.config().clone(),
            perceptual: setup.perceptual.clone(),
            exemplar_id: setup.exemplar_id.clone(),
            exemplar_width: setup.exemplar_dims.0,
            exemplar_height: setup.exemplar_dims.1,
            train: serde_json::to_value(cfg).map_err(|e| Error::Data(format!("config encoding: {e}")))?,
        },
        params: model.params().clone(),
        extractor: setup.extractor.clone(),
        exemplar: setup.exemplar.clone(),
        exemplar_features: setup.exemplar_features.clone(),
    })
}

fn run(
    mut model: Model,
    setup: &Setup,
    pool: &[Prepared<'_>],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    if pool.is_empty() {
        return Err(Error::NoUnlabeled);
    }
    let frozen: Vec<bool> =
        model.params().iter().map(|p| cfg.freeze_encoder && p.name.starts_with("enc.")).collect();
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = vec![SampleLoss::default(); pool.len()];
        for batch in order.chunks(cfg.batch_size) {
            // pool is sorted by id, so index order is id order
            let mut idx = batch.to_vec();
            idx.sort_unstable();
            let results: Vec<Result<(Vec<Vec<f64>>, SampleLoss)>> =
                idx.par_iter().map(|&i| sample_step(&model, setup, &pool[i], cfg)).collect();
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for (&i, r) in idx.iter().zip(results) {
                let (grads, loss) = r?;
                losses[i] = loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / idx.len() as f64;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            adam_step(model.params_mut(), &grads, &mut adam, cfg.learning_rate, cfg.weight_decay, &cfg.adam, |i| frozen[i])?;
        }
        let n = pool.len() as f64;
        let with_pcm: Vec<f64> = losses.iter().filter_map(|l| l.pcm).collect();
        let record = EpochRecord {
            epoch,
            samples: pool.len(),
            perc: losses.iter().map(|l| l.perc).sum::<f64>() / n,
            bend: losses.iter().map(|l| l.bend).sum::<f64>() / n,
            edge: losses.iter().map(|l| l.edge).sum::<f64>() / n,
            pcm: (!with_pcm.is_empty()).then(|| with_pcm.iter().sum::<f64>() / with_pcm.len() as f64),
            total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        };
        observer.on_epoch(&record)?;
        history.push(record);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            observer.on_checkpoint(epoch, &make_checkpoint(&model, setup, cfg)?)?;
        }
    }
    if !model.params().all_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(TrainOutput { checkpoint: make_checkpoint(&model, setup, cfg)?, history })
}

/// Trains from scratch with the exemplar label and unlabeled images only.
pub fn train_one_shot(
    view: &TrainingView<'_>,
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = cfg.model.n_vertices;
    let exemplar = resample_uniform(&view.exemplar.vertices, n, true)?.to_canonical_orientation();
    let ex_sample = view.exemplar_sample();
    let ex_feats = extractor.extract(&ex_sample.image)?;
    let setup = Setup {
        extractor: extractor.clone(),
        exemplar_id: view.exemplar_id.to_string(),
        exemplar_features: VertexFeatures::sample(&ex_feats, &exemplar, &cfg.perceptual)?,
        tps: TpsSystem::build(&exemplar)?,
        exemplar_dims: (ex_sample.image.width, ex_sample.image.height),
        exemplar,
        perceptual: cfg.perceptual.clone(),
    };
    let pool = prepare(&setup, view.samples, false, cfg.include_exemplar)?;
    if pool.is_empty() {
        return Err(Error::NoUnlabeled);
    }
    run(Model::new(cfg.model.clone(), cfg.seed)?, &setup, &pool, cfg, observer)
}

/// Continues training `checkpoint` on `samples`, adding the matching loss for
/// every sample with corrections. Optimizer state starts fresh; the model
/// architecture, exemplar and perceptual settings come from the checkpoint.
pub fn finetune_hitl(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    let cfg = TrainConfig {
        model: checkpoint.config.model.clone(),
        perceptual: checkpoint.config.perceptual.clone(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let setup = Setup {
        extractor: checkpoint.extractor.clone(),
        exemplar_id: checkpoint.config.exemplar_id.clone(),
        exemplar: checkpoint.exemplar.clone(),
        exemplar_dims: (checkpoint.config.exemplar_width, checkpoint.config.exemplar_height),
        exemplar_features: checkpoint.exemplar_features.clone(),
        tps: TpsSystem::build(&checkpoint.exemplar)?,
        perceptual: checkpoint.config.perceptual.clone(),
    };
    let pool = prepare(&setup, samples, true, cfg.include_exemplar)?;
    run(checkpoint.model()?, &setup, &pool, &cfg, observer)
}

/// Which loss an ablation run removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    None,
    Perceptual,
    Bending,
    Edge,
}

impl Ablation {
    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            Ablation::None => w,
            Ablation::Perceptual => LossWeights { lambda1: 0.0, ..w },
            Ablation::Bending => LossWeights { lambda2: 0.0, ..w },
            Ablation::Edge => LossWeights { lambda3: 0.0, ..w },
        }
    }
}

/// Retrains with one loss weight set to zero and evaluates on `eval`.
pub fn ablate(
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    drop: Ablation,
    extractor: &PerceptualExtractor,
) -> Result<(TrainOutput, MetricsReport)> {
    let cfg = TrainConfig { weights: drop.apply(cfg.weights), ..cfg.clone() };
    let out = train_one_shot(&train.training_view()?, &cfg, extractor, &mut ())?;
    let report = evaluate(&out.checkpoint, eval)?;
    Ok((out, report))
}
