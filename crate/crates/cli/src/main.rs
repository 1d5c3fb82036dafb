use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use cmr_landmark::checkpoint::ModelCheckpoint;
use cmr_landmark::dataset::{ingest_via, load_dataset, read_image, DatasetManifest, IngestOptions, Sample, MANIFEST_FILE};
use cmr_landmark::heatmap::{DEFAULT_SIGMA_PX, DEFAULT_TAU};
use cmr_landmark::inference::{PredictionRecord, Predictor, PredictionsFile};
use cmr_landmark::landmarks::{LandmarkSet, Sequence, View};
use cmr_landmark::measure::build_report;
use cmr_landmark::phantom::{gen_dataset, gen_lax_series, write_samples, Contrast, DatasetSpec, PhantomParams};
use cmr_landmark::preprocess::{AugmentConfig, FRAME_SIZE};
use cmr_landmark::service::Server;
use cmr_landmark::trainer::{fine_tune, split_patients, train_with_hook, PlateauConfig, TrainConfig, TRAIN_FRACTION};
use cmr_landmark::unet::{ArchConfig, UNet};

#[derive(Debug, Parser)]
#[command(name = "cmr-landmark", version, about = "Cardiac MR landmark detection with a heat-map U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (or a beating LAX series).
    PhantomGen(PhantomGenArgs),
    /// Convert a VIA annotation export into a dataset manifest.
    Ingest(IngestArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune an existing checkpoint on a new dataset.
    Finetune(FinetuneArgs),
    /// Detect landmarks on one image or every image of a dataset.
    Infer(InferArgs),
    /// Score predictions against a dataset's annotations.
    Eval(EvalArgs),
    /// Run the inline TCP inference server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct PhantomGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// CH2:CH3:CH4:SAX frequencies.
    #[arg(long, default_value = "1:1:1:1", value_parser = parse_mix)]
    mix: [usize; 4],
    #[arg(long, default_value = "cine")]
    contrast: Contrast,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels (1 mm spacing).
    #[arg(long, default_value_t = cmr_landmark::phantom::DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value = "P")]
    patient_prefix: String,
    /// Write one LAX series of this many frames instead of a mixed dataset.
    #[arg(long)]
    series: Option<usize>,
    /// View of the series.
    #[arg(long, default_value = "CH4")]
    view: View,
    /// Fractional LV shortening from ED to ES in the series.
    #[arg(long, default_value_t = 0.2)]
    shortening: f64,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// VIA project or annotation export (JSON).
    #[arg(long)]
    via: PathBuf,
    #[arg(long)]
    view: View,
    #[arg(long, default_value = "CINE")]
    sequence: Sequence,
    /// Directory holding the annotated images; the manifest is written here.
    #[arg(long)]
    image_dir: PathBuf,
    /// Pixel spacing (mm) for images without their own, e.g. "1.25" or "1.2,1.4".
    #[arg(long, default_value = "1", value_parser = parse_spacing)]
    spacing: (f64, f64),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    /// Four levels, three or four blocks, 32 base filters.
    Full,
    /// Four levels, one block, 8 base filters.
    Desk,
    /// Two levels, 2 base filters; for tests.
    Tiny,
}

impl Arch {
    fn config(self) -> ArchConfig {
        match self {
            Arch::Full => ArchConfig::full_size(),
            Arch::Desk => ArchConfig::desk(),
            Arch::Tiny => ArchConfig::tiny(),
        }
    }
}

#[derive(Debug, Args)]
struct CommonTrainArgs {
    /// Dataset manifest, or a directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.cmlk, history.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of patients used for training; the rest validate.
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    train_fraction: f64,
    /// Epochs without improvement before the learning rate halves.
    #[arg(long, default_value_t = PlateauConfig::default().patience)]
    patience: usize,
    /// Disable shading, noise and blur augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long, value_enum, default_value_t = Arch::Full)]
    arch: Arch,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Network input side (pixels at 1 mm).
    #[arg(long, default_value_t = FRAME_SIZE)]
    frame_size: usize,
    /// Heat-map Gaussian σ in pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA_PX)]
    sigma: f64,
    /// Views pooled into the model: lax, sax, all, or a list like CH2,CH4.
    #[arg(long, default_value = "lax", value_parser = parse_views)]
    views: Views,
    /// Weight-initialization seed (defaults to --seed).
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    base: PathBuf,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Views to train on (defaults to the base model's).
    #[arg(long, value_parser = parse_views)]
    views: Option<Views>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// An image file, a dataset manifest, or a directory containing one.
    #[arg(long)]
    input: PathBuf,
    /// View of a single input image.
    #[arg(long)]
    view: Option<View>,
    /// Spacing (mm) of a single image without a sidecar, e.g. PGM.
    #[arg(long, value_parser = parse_spacing)]
    spacing: Option<(f64, f64)>,
    /// Presence threshold on heat-map peaks.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Write predictions here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat the inputs as one cardiac series and report ED/ES shortening.
    #[arg(long)]
    series: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset manifest with the reference annotations.
    #[arg(long)]
    data: PathBuf,
    /// Predictions file written by `infer`.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    predictions: Option<PathBuf>,
    /// Run this model instead of reading a predictions file.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 4000)]
    port: u16,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Debug, Clone)]
struct Views(Vec<View>);

/// Problems with how the tool was invoked; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_mix(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s.split(':').map(str::parse).collect::<Result<_, _>>().map_err(|_| format!("bad mix {s:?}"))?;
    <[usize; 4]>::try_from(parts).map_err(|_| format!("mix needs four ratios CH2:CH3:CH4:SAX, got {s:?}"))
}

fn parse_spacing(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| format!("bad spacing {s:?}"))?;
    let sp = match parts[..] {
        [v] => (v, v),
        [r, c] => (r, c),
        _ => return Err(format!("spacing takes one or two values, got {s:?}")),
    };
    if !(sp.0 > 0.0 && sp.1 > 0.0) {
        return Err(format!("spacing must be positive, got {s:?}"));
    }
    Ok(sp)
}

fn parse_views(s: &str) -> Result<Views, String> {
    match s.to_ascii_lowercase().as_str() {
        "lax" => Ok(Views(View::LAX.to_vec())),
        "sax" => Ok(Views(vec![View::Sax])),
        "all" => Ok(Views(View::ALL.to_vec())),
        _ => s.split(',').map(|v| v.trim().parse::<View>().map_err(|e| e.to_string())).collect::<Result<_, _>>().map(Views),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load(p: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let path = manifest_path(p);
    load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(p: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn phantom_gen(a: PhantomGenArgs) -> Result<()> {
    match a.series {
        None => {
            let spec = DatasetSpec {
                n: a.n,
                mix: a.mix,
                contrast: a.contrast,
                seed: a.seed,
                size: a.size,
                patient_prefix: a.patient_prefix,
            };
            let m = gen_dataset(&spec, &a.out)?;
            println!("wrote {} samples to {}", m.samples.len(), a.out.display());
        }
        Some(frames) => {
            if !a.view.is_lax() {
                return Err(UsageError("a series needs a long-axis view".into()).into());
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            let base = PhantomParams::random(a.view, a.contrast, a.size, &mut rng);
            let samples: Vec<Sample> = gen_lax_series(&base, frames, a.shortening, a.seed)?
                .into_iter()
                .map(|(image, landmarks)| Sample {
                    image,
                    landmarks,
                    sequence: a.contrast.sequence(),
                    patient_id: format!("{}0000", a.patient_prefix),
                })
                .collect();
            write_samples(&samples, &a.out)?;
            println!("wrote a {frames}-frame {} series to {}", a.view, a.out.display());
        }
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.via).with_context(|| format!("reading {}", a.via.display()))?;
    let opts = IngestOptions { view: a.view, sequence: a.sequence, image_dir: a.image_dir.clone(), default_spacing_mm: a.spacing };
    let entries = ingest_via(&text, &opts)?;
    let out = a.image_dir.join(MANIFEST_FILE);
    let n = entries.len();
    DatasetManifest::new(entries).write(&out)?;
    println!("wrote {n} entries to {}", out.display());
    Ok(())
}

fn base_config(c: &CommonTrainArgs) -> TrainConfig {
    TrainConfig {
        batch_size: c.batch_size,
        seed: c.seed,
        train_fraction: c.train_fraction,
        plateau: PlateauConfig { patience: c.patience, ..PlateauConfig::default() },
        augment: if c.no_augment { AugmentConfig::none() } else { AugmentConfig::default() },
        ..TrainConfig::default()
    }
}

fn run_training(
    model: UNet<f32>,
    base: Option<&ModelCheckpoint>,
    samples: &[Sample],
    config: &TrainConfig,
    common: &CommonTrainArgs,
) -> Result<()> {
    config.validate()?;
    let (tr, va) = split_patients(samples, config.train_fraction, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&tr), pick(&va));
    eprintln!(
        "{} training and {} validation samples, {} parameters",
        train.len(),
        val.len(),
        model.num_parameters()
    );
    let started = Instant::now();
    let quiet = common.quiet;
    let mut hook = |r: &cmr_landmark::trainer::EpochRecord, _: &UNet<f32>| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  {:.0}s",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    };
    let (ckpt, history) = match base {
        Some(b) if config.epochs == 0 => fine_tune(b, &train, &val, config)?,
        _ => train_with_hook(model, &train, &val, config, &mut hook)?,
    };
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let model_path = common.out.join("model.cmlk");
    ckpt.save(&model_path)?;
    std::fs::write(common.out.join("history.csv"), history.to_csv())?;
    std::fs::write(common.out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    match ckpt.provenance.val_loss {
        Some(v) => println!("best epoch {} (val loss {v:.5}); model written to {}", history.best_epoch, model_path.display()),
        None => println!("no epochs run; model written to {}", model_path.display()),
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (_, samples) = load(&a.common.data)?;
    let config = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        frame_size: a.frame_size,
        sigma_px: a.sigma,
        views: a.views.0,
        ..base_config(&a.common)
    };
    let model = UNet::build(a.arch.config(), a.init_seed.unwrap_or(a.common.seed))?;
    run_training(model, None, &samples, &config, &a.common)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let base = load_checkpoint(&a.base)?;
    let (_, samples) = load(&a.common.data)?;
    let prov = &base.provenance;
    let config = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        frame_size: prov.frame_size,
        sigma_px: prov.sigma_px,
        views: a.views.map(|v| v.0).unwrap_or_else(|| prov.views.clone()),
        ..base_config(&a.common).finetuning()
    };
    run_training(base.model.clone(), Some(&base), &samples, &config, &a.common)
}

fn predictor(model: &Path, tau: f64) -> Result<Predictor> {
    Ok(Predictor::new(load_checkpoint(model)?).with_tau(tau)?)
}

/// (manifest-relative name, image, view) for every input frame.
fn infer_inputs(a: &InferArgs) -> Result<Vec<(String, cmr_landmark::image::Image, View)>> {
    let is_manifest = a.input.is_dir() || a.input.extension().is_some_and(|e| e == "json");
    if is_manifest {
        let (manifest, samples) = load(&a.input)?;
        return Ok(manifest.samples.iter().zip(samples).map(|(e, s)| (e.image.clone(), s.image, e.view)).collect());
    }
    let Some(view) = a.view else {
        return Err(UsageError("--view is required for a single image".into()).into());
    };
    let image = read_image(&a.input, a.spacing)?;
    Ok(vec![(a.input.display().to_string(), image, view)])
}

fn infer(a: InferArgs) -> Result<()> {
    let p = predictor(&a.model, a.tau)?;
    let inputs = infer_inputs(&a)?;
    let mut file = PredictionsFile::default();
    let started = Instant::now();
    for (i, (name, image, view)) in inputs.iter().enumerate() {
        let t = Instant::now();
        let pred = p.predict(image, *view)?;
        let elapsed_ms = t.elapsed().as_secs_f64() * 1e3;
        eprintln!("frame {i:>3} {name}: {elapsed_ms:.1} ms");
        file.predictions.push(PredictionRecord {
            image: name.clone(),
            landmarks: pred.landmarks,
            lv_length_mm: pred.lv_length_mm,
            elapsed_ms,
        });
    }
    eprintln!("total {} frames: {:.1} ms", inputs.len(), started.elapsed().as_secs_f64() * 1e3);
    if a.series {
        match file.summarize_series() {
            Some(s) => eprintln!(
                "ED frame {} ({:.2} mm), ES frame {} ({:.2} mm), longitudinal shortening {:.2}%",
                s.ed.frame_index, s.ed.lv_length_mm, s.es.frame_index, s.es.lv_length_mm, s.shortening_pct
            ),
            None => eprintln!("no frame had a complete LV length; shortening unavailable"),
        }
    }
    let json = serde_json::to_string_pretty(&file)? + "\n";
    match &a.out {
        Some(path) => std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let path = manifest_path(&a.data);
    let manifest = DatasetManifest::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let truths: Vec<LandmarkSet> = manifest.samples.iter().map(|e| e.landmark_set()).collect::<Result<_, _>>()?;
    let sequences: Vec<Sequence> = manifest.samples.iter().map(|e| e.sequence).collect();
    let preds: Vec<LandmarkSet> = match (&a.predictions, &a.model) {
        (Some(file), _) => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let file: PredictionsFile = serde_json::from_str(&text)?;
            let by_name: std::collections::HashMap<&str, &LandmarkSet> =
                file.predictions.iter().map(|p| (p.image.as_str(), &p.landmarks)).collect();
            manifest
                .samples
                .iter()
                .map(|e| {
                    by_name
                        .get(e.image.as_str())
                        .map(|s| (*s).clone())
                        .ok_or_else(|| UsageError(format!("no prediction for {}", e.image)).into())
                })
                .collect::<Result<_>>()?
        }
        (None, Some(model)) => {
            let p = predictor(model, a.tau)?;
            let root = path.parent().unwrap_or(Path::new("."));
            let samples = manifest.load_samples(root)?;
            samples.iter().map(|s| Ok(p.predict(&s.image, s.view())?.landmarks)).collect::<Result<_>>()?
        }
        (None, None) => unreachable!("clap enforces one source"),
    };
    let report = build_report(&preds, &truths, &sequences)?;
    report.write(&a.out)?;
    for g in report.groups.iter().filter(|g| g.n_tested > 0) {
        let l2: Vec<String> = g
            .landmarks
            .iter()
            .map(|l| match (l.mean_mm, l.sd_mm) {
                (Some(m), Some(s)) => format!("{} {m:.2}±{s:.2}", l.name),
                (Some(m), None) => format!("{} {m:.2}", l.name),
                _ => format!("{} -", l.name),
            })
            .collect();
        println!(
            "{:<4} {:<3}  {:>4}/{:<4} detected ({:.1}%)  L2 mm: {}",
            g.sequence,
            g.view,
            g.n_success,
            g.n_tested,
            100.0 * g.detection_rate.unwrap_or(0.0),
            l2.join(", ")
        );
    }
    println!(
        "overall detection rate {:.1}% ({} of {}); report written to {}",
        100.0 * report.detection_rate.unwrap_or(0.0),
        report.n_success,
        report.n_tested,
        a.out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let p = Arc::new(predictor(&a.model, a.tau)?);
    let server = Server::bind((a.host.as_str(), a.port), p)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run(|e| eprintln!("connection error: {e}"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use cmr_landmark::Error;
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
