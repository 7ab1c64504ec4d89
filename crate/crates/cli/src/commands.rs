use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ctn_core::dataio::{generate_synthetic, select_exemplar, simulate_corrections, CorrectionMode, Dataset, SynthConfig, DEFAULT_TAU};
use ctn_core::geometry::{rasterize, Contour};
use ctn_core::imaging::GrayImage;
use ctn_core::losses::PerceptualExtractor;
use ctn_core::model::Checkpoint;
use ctn_core::training::{
    ablate, checkpoint_fingerprint, evaluate, evaluate_predictions, finetune_hitl, predict_all, train_one_shot, Ablation,
    EpochRecord, MetricsReport, TrainConfig, TrainObserver,
};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "ctn", version, about = "One-shot contour segmentation: synthetic data, training, inference and a correction service")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic blob corpus with ground-truth contours.
    Synth(SynthArgs),
    /// Pick the most central image as the exemplar and record it in meta.json.
    SelectExemplar(DataArg),
    /// Train from the exemplar label and unlabeled images.
    Train(TrainArgs),
    /// Fine-tune a checkpoint with the dataset's stored corrections.
    Finetune(FinetuneArgs),
    /// Predict the contour of one image.
    Infer(InferArgs),
    /// Score predictions against ground-truth labels.
    Eval(EvalArgs),
    /// Retrain with one loss removed at a time and compare.
    Ablate(AblateArgs),
    /// Write simulated corrections for the worst-predicted images.
    SimulateCorrections(SimulateArgs),
    /// Run the HTTP correction service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset root (images/, labels/, corrections/, meta.json).
    #[arg(long, env = "CTN_DATA_ROOT")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic corpus settings as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Image width and height in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the shared base shape (defaults to --seed).
    #[arg(long)]
    pub family_seed: Option<u64>,
    /// Gaussian pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Vertices per ground-truth contour.
    #[arg(long)]
    pub n_vertices: Option<usize>,
    #[arg(long)]
    pub id_prefix: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Training settings as JSON (missing fields take defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Newline-delimited JSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep encoder weights fixed.
    #[arg(long)]
    pub freeze_encoder: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale PNG or PGM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Contour JSON output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the filled contour as a binary PGM mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also write a PNG with the contour drawn over the image.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Checkpoint to run; required unless --predictions is given.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of <id>.contour.json predictions to score instead.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Leave the exemplar out of the report.
    #[arg(long)]
    pub exclude_exemplar: bool,
    /// Per-image CSV instead of the JSON report.
    #[arg(long)]
    pub csv: bool,
    /// Write the report here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropArg {
    None,
    Perceptual,
    Bending,
    Edge,
}

impl From<DropArg> for Ablation {
    fn from(d: DropArg) -> Self {
        match d {
            DropArg::None => Ablation::None,
            DropArg::Perceptual => Ablation::Perceptual,
            DropArg::Bending => Ablation::Bending,
            DropArg::Edge => Ablation::Edge,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Evaluation dataset; defaults to --data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Variants to run.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "none,perceptual,bending,edge")]
    pub drop: Vec<DropArg>,
    /// Directory for the variant checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Partial,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Share of training images to correct, worst first.
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value = "partial")]
    pub mode: ModeArg,
    /// Distance threshold in pixels for partial corrections.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Dataset root to write corrections/ into; defaults to --data.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fine-tuning settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for checkpoints produced by fine-tuning jobs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of annotator UI assets served at /.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Synth(a) => synth(a, json),
        Command::SelectExemplar(a) => select(a, json),
        Command::Train(a) => train(a, json),
        Command::Finetune(a) => finetune(a, json),
        Command::Infer(a) => infer(a, json),
        Command::Eval(a) => eval(a, json),
        Command::Ablate(a) => run_ablate(a, json),
        Command::SimulateCorrections(a) => simulate(a, json),
        Command::Serve(a) => serve(a),
    }
}

fn emit(json: bool, value: serde_json::Value, human: impl FnOnce() -> String) {
    if json {
        println!("{value}");
    } else {
        println!("{}", human());
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

/// Training config from `--config`, `--seed` and `--epochs`.
pub fn train_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &opts.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &DataArg) -> Result<Dataset> {
    Ok(Dataset::load(&data.data)?)
}

fn synth(a: SynthArgs, json: bool) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.size = a.size.unwrap_or(cfg.size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.family_seed = a.family_seed.or(cfg.family_seed);
    cfg.noise = a.noise.unwrap_or(cfg.noise);
    cfg.n_vertices = a.n_vertices.unwrap_or(cfg.n_vertices);
    if let Some(p) = a.id_prefix {
        cfg.id_prefix = p;
    }
    if cfg.count < 2 {
        return Err(UsageError("--count must be at least 2".into()).into());
    }
    let ds = generate_synthetic(&cfg)?;
    ds.save(&a.out)?;
    emit(json, json!({ "out": a.out, "count": ds.len() }), || {
        format!("wrote {} images to {}", ds.len(), a.out.display())
    });
    Ok(())
}

fn select(a: DataArg, json: bool) -> Result<()> {
    let mut ds = load(&a)?;
    if ds.len() < 2 {
        return Err(ctn_core::Error::Data("exemplar selection needs at least 2 images".into()).into());
    }
    let id = select_exemplar(&ds, &PerceptualExtractor::default_bank())?;
    if ds.ground_truth(&id).is_none() {
        eprintln!("warning: exemplar {id} has no label yet; add labels/{id}.contour.json before training");
    }
    ds.set_exemplar(&id)?;
    ds.save_meta(&a.data)?;
    emit(json, json!({ "exemplar": id }), || id.clone());
    Ok(())
}

/// Streams the log and writes intermediate checkpoints next to the output.
struct CliObserver {
    log: Option<BufWriter<fs::File>>,
    out: PathBuf,
    epochs: usize,
    quiet: bool,
}

impl CliObserver {
    fn new(log: Option<&Path>, out: &Path, epochs: usize, quiet: bool) -> Result<Self> {
        let log = match log {
            Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => None,
        };
        Ok(Self { log, out: out.to_path_buf(), epochs, quiet })
    }
}

impl TrainObserver for CliObserver {
    fn on_epoch(&mut self, r: &EpochRecord) -> ctn_core::Result<()> {
        if let Some(w) = &mut self.log {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| ctn_core::Error::Io { path: "<log>".into(), source: e })?;
        }
        if !self.quiet {
            eprintln!("epoch {}/{}  loss {:.6}", r.epoch, self.epochs, r.total);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, c: &Checkpoint) -> ctn_core::Result<()> {
        let mut name = self.out.clone().into_os_string();
        name.push(format!(".epoch{epoch}"));
        c.write(Path::new(&name))
    }
}

fn train(a: TrainArgs, json: bool) -> Result<()> {
    let cfg = train_config(&a.opts)?;
    let ds = load(&a.data)?;
    let mut obs = CliObserver::new(a.opts.log.as_deref(), &a.out, cfg.epochs, json)?;
    let out = train_one_shot(&ds.training_view()?, &cfg, &PerceptualExtractor::default_bank(), &mut obs)?;
    out.checkpoint.write(&a.out)?;
    report_training(json, &a.out, &out.checkpoint, out.history.last())
}

fn report_training(json: bool, path: &Path, c: &Checkpoint, last: Option<&EpochRecord>) -> Result<()> {
    let fp = checkpoint_fingerprint(c)?;
    emit(json, json!({ "checkpoint": path, "fingerprint": fp, "final": last }), || {
        format!("wrote {} ({fp})", path.display())
    });
    Ok(())
}

fn finetune(a: FinetuneArgs, json: bool) -> Result<()> {
    let mut cfg = train_config(&a.opts)?;
    cfg.freeze_encoder |= a.freeze_encoder;
    let ds = load(&a.data)?;
    if ds.correction_count() == 0 {
        return Err(ctn_core::Error::Data("no corrections".into()).into());
    }
    let ck = Checkpoint::read(&a.checkpoint)?;
    let mut obs = CliObserver::new(a.opts.log.as_deref(), &a.out, cfg.epochs, json)?;
    let out = finetune_hitl(&ck, ds.samples(), &cfg, &mut obs)?;
    out.checkpoint.write(&a.out)?;
    report_training(json, &a.out, &out.checkpoint, out.history.last())
}

fn infer(a: InferArgs, json: bool) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let image = GrayImage::read(&a.image)?;
    let contour = ck.predict(&image)?;
    match &a.out {
        Some(p) => contour.write_json(p)?,
        None if !json => println!("{}", serde_json::to_string(&contour)?),
        None => {}
    }
    if let Some(p) = &a.mask {
        rasterize(&contour, image.width, image.height)?.write_pgm(p)?;
    }
    if let Some(p) = &a.overlay {
        fs::write(p, image.overlay_png(&contour)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        println!("{}", json!({ "image": a.image, "contour": contour }));
    }
    Ok(())
}

fn read_predictions(dir: &Path) -> Result<BTreeMap<String, Contour>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(".contour.json") {
            out.insert(id.to_string(), Contour::read_json(&path)?);
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs, json: bool) -> Result<()> {
    let ds = load(&a.data)?;
    let mut report = match (&a.predictions, &a.checkpoint) {
        (Some(dir), _) => evaluate_predictions(&read_predictions(dir)?, &ds, "predictions".into())?,
        (None, Some(ck)) => evaluate(&Checkpoint::read(ck)?, &ds)?,
        (None, None) => return Err(UsageError("pass --checkpoint or --predictions".into()).into()),
    };
    if a.exclude_exemplar {
        if let Some(ex) = ds.meta.exemplar.as_deref() {
            report = report.without(&[ex]);
        }
    }
    let text = if a.csv { report.to_csv() } else { serde_json::to_string_pretty(&report)? };
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.csv {
        print!("{text}");
    } else {
        emit(json, serde_json::to_value(&report)?, || summary_line(&report));
    }
    Ok(())
}

fn summary_line(r: &MetricsReport) -> String {
    let s = &r.summary;
    format!(
        "{} images  IoU mean {:.4} median {:.4} worst {:.4}  HD mean {:.3} median {:.3} worst {:.3}",
        s.count, s.mean_iou, s.median_iou, s.worst_iou, s.mean_hd, s.median_hd, s.worst_hd
    )
}

fn run_ablate(a: AblateArgs, json: bool) -> Result<()> {
    let cfg = train_config(&a.opts)?;
    let train_ds = load(&a.data)?;
    let test_ds = match &a.test {
        Some(p) => Dataset::load(p)?,
        None => load(&a.data)?,
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let extractor = PerceptualExtractor::default_bank();
    let mut rows = Vec::new();
    for &d in &a.drop {
        let drop: Ablation = d.into();
        let (out, report) = ablate(&train_ds, &test_ds, &cfg, drop, &extractor)?;
        if let Some(dir) = &a.out {
            out.checkpoint.write(&dir.join(format!("{}.ckpt", serde_json::to_value(drop)?.as_str().unwrap_or("variant"))))?;
        }
        if !json {
            println!("drop {:<10} {}", format!("{drop:?}").to_lowercase(), summary_line(&report));
        }
        rows.push(json!({ "drop": drop, "summary": report.summary, "checkpoint": report.checkpoint }));
    }
    if json {
        println!("{}", serde_json::Value::Array(rows));
    }
    Ok(())
}

fn simulate(a: SimulateArgs, json: bool) -> Result<()> {
    if !(0.0..=1.0).contains(&a.fraction) {
        return Err(UsageError("--fraction must be in [0, 1]".into()).into());
    }
    let mut ds = load(&a.data)?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let exemplar = ck.config.exemplar_id.clone();
    let preds = predict_all(&ck, &ds)?;
    let truth: BTreeMap<String, Contour> = ds
        .labeled_ids()
        .filter(|id| *id != exemplar)
        .map(|id| (id.to_string(), ds.ground_truth(id).expect("labeled").clone()))
        .collect();
    let preds: BTreeMap<String, Contour> = preds.into_iter().filter(|(id, _)| truth.contains_key(id)).collect();
    let mode = match a.mode {
        ModeArg::Full => CorrectionMode::Full,
        ModeArg::Partial => CorrectionMode::Partial,
    };
    let corrections = simulate_corrections(&preds, &truth, a.fraction, mode, a.tau)?;
    let mut by_image: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for c in corrections {
        by_image.entry(c.image.clone()).or_default().push(c);
    }
    let total: usize = by_image.values().map(Vec::len).sum();
    let ids: Vec<String> = by_image.keys().cloned().collect();
    for (id, cs) in by_image {
        ds.add_corrections(&id, cs)?;
    }
    let root = a.out.unwrap_or(a.data.data);
    ds.save_corrections(&root)?;
    emit(json, json!({ "images": ids, "segments": total }), || {
        format!("{total} correction segments for {} images", ids.len())
    });
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = load(&a.data)?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let state = crate::server::AppState::new(a.data.data.clone(), ds, ck, cfg, a.out.clone())?;
    let router = crate::server::router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("serving on http://{addr}");
        axum::serve(listener, router).await.context("server failed")
    })
}
