//! Command-line front end. Every subcommand reads and validates all of its
//! inputs before starting heavy work and reports failures as one line on
//! stderr with exit code 2 (usage), 3 (data validation) or 4 (numerical).
//!
//! `SPECGT_THREADS` caps the number of worker threads.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cube_io::{
    self, default_palette, read_cube, read_endmembers, read_fraction_map, read_label_map, render_label_map,
    same_band_grid, with_suffix, write_cube, write_endmembers, write_fraction_map, write_label_map, EndmemberLibrary,
    SpectralCube,
};
use crate::dataset::{read_dataset, split_loio, write_dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::nn::{
    classify_image, classify_image_with_probabilities, evaluate, read_checkpoint, train, write_checkpoint,
    write_confusion_csv, write_history, Cnn, ModelConfig, Precision, TrainConfig, TrainedModel,
};
use crate::pipeline::{run_all, write_unmix_report, PipelineConfig};
use crate::resolution::{
    aggregate_fractions, aggregate_spatial, resample_spectral, synthesize_labels, AggregationSpec, BandSpec,
};
use crate::scenegen::{default_library, generate_scene, SceneSpec};
use crate::unmixing::{unmix_image, UnmixOptions};

pub const THREADS_ENV: &str = "SPECGT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "specgt", version, about = "Simulated ground truth and patch CNN classification")]
pub struct Cli {
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene: cube, true fractions and true labels.
    GenScene(GenSceneArgs),
    /// Fully constrained unmixing of every pixel of a cube.
    Unmix(UnmixArgs),
    /// Aggregate a cube spatially and resample it onto a target band grid.
    Adapt(AdaptArgs),
    /// Aggregate a fraction map and label each pixel by its dominant endmember.
    SynthGt(SynthGtArgs),
    /// Cut patches from labeled cubes and write leave-one-image-out splits.
    BuildDataset(BuildDatasetArgs),
    /// Train a classifier on a dataset split.
    Train(TrainArgs),
    /// Classify every pixel of a cube with a trained model.
    Classify(ClassifyArgs),
    /// Compare a predicted label map with a reference one.
    Eval(EvalArgs),
    /// Write a label map as a PNG image.
    Render(RenderArgs),
    /// Generate scenes and run every stage for all leave-one-out folds.
    RunAll(RunAllArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Scene specification (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Endmember library CSV; the built-in seven-class library by default.
    #[arg(long)]
    pub endmembers: Option<PathBuf>,
    /// Also write the library used to this CSV.
    #[arg(long)]
    pub endmembers_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Sam,
    L2,
}

#[derive(Debug, Args)]
pub struct UnmixArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub endmembers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "sam")]
    pub objective: ObjectiveArg,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Convergence report CSV; `<out>.report.csv` by default.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// Target band grid (JSON); the cube's own grid when omitted.
    #[arg(long)]
    pub bands: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthGtArgs {
    #[arg(long)]
    pub fractions: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Coarse cube prefix; repeat once per image.
    #[arg(long = "cube", required = true)]
    pub cubes: Vec<PathBuf>,
    /// Label map prefix; repeat once per image, in the same order.
    #[arg(long = "labels", required = true)]
    pub labels: Vec<PathBuf>,
    /// Index of the held-out image.
    #[arg(long)]
    pub test_image: usize,
    #[arg(long, default_value_t = 5)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; writes `<out>.train`, `<out>.val` and `<out>.test` datasets.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset prefix: `<prefix>.train` is required, `<prefix>.val` is used when present.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; `<out>.history.csv` by default.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Model configuration (JSON); derived from the dataset when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub per_label: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Standard deviation of the augmentation noise.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Checkpoint prefix.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    /// Output label map prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-class probabilities as a fraction map with this prefix.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    /// Pipeline configuration (JSON); the six-scene benchmark by default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Endmember library CSV; the built-in library by default.
    #[arg(long)]
    pub endmembers: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("specgt: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match configure_threads().and_then(|()| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            eprintln!("specgt: {text}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let log = |msg: &str| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Unmix(a) => unmix(a, &log),
        Command::Adapt(a) => adapt(a),
        Command::SynthGt(a) => synth_gt(a),
        Command::BuildDataset(a) => build_dataset(a, &log),
        Command::Train(a) => train_cmd(a, &log),
        Command::Classify(a) => classify(a),
        Command::Eval(a) => eval(a, &log),
        Command::Render(a) => render_label_map(&read_label_map(&a.labels)?, &a.out),
        Command::RunAll(a) => run_all_cmd(a, &log),
    }
}

/// Read a JSON configuration file; unreadable or malformed files are usage errors.
fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    cube_io::read_json(path).map_err(|e| Error::Usage(e.to_string()))
}

fn library(path: Option<&Path>) -> Result<EndmemberLibrary> {
    match path {
        Some(p) => read_endmembers(p),
        None => Ok(default_library()),
    }
}

fn gen_scene(a: &GenSceneArgs) -> Result<()> {
    let spec: SceneSpec = read_config(&a.spec)?;
    spec.validate()
        .map_err(|e| Error::Usage(format!("{}: {e}", a.spec.display())))?;
    let lib = library(a.endmembers.as_deref())?;
    let scene = generate_scene(&spec, &lib)?;
    let labels = synthesize_labels(&scene.fractions, lib.names())?;
    write_cube(&scene.cube, &a.out)?;
    write_fraction_map(&scene.fractions, lib.names(), &a.out)?;
    write_label_map(&labels, &a.out)?;
    if let Some(p) = &a.endmembers_out {
        write_endmembers(&lib, p)?;
    }
    Ok(())
}

fn unmix(a: &UnmixArgs, log: &dyn Fn(&str)) -> Result<()> {
    let cube = read_cube(&a.cube)?;
    let lib = read_endmembers(&a.endmembers)?;
    if !same_band_grid(cube.band_centers(), lib.band_centers()) {
        return Err(Error::invalid(
            "unmix inputs",
            format!(
                "cube has {} bands, endmembers {} bands on a different grid",
                cube.bands(),
                lib.bands()
            ),
        ));
    }
    let mut opts = match a.objective {
        ObjectiveArg::Sam => UnmixOptions::default(),
        ObjectiveArg::L2 => UnmixOptions::euclidean(),
    };
    if let Some(n) = a.max_iters {
        opts.max_iters = n;
    }
    opts.validate()?;
    let result = unmix_image(&cube, &lib, &opts)?;
    write_fraction_map(&result.map, lib.names(), &a.out)?;
    let report = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.csv"));
    write_unmix_report(&result, &report)?;
    log(&format!(
        "unmixed {} pixels, mean iterations {:.2}, non-converged {}",
        result.pixels(),
        result.mean_iterations(),
        result.non_converged
    ));
    Ok(())
}

fn adapt(a: &AdaptArgs) -> Result<()> {
    let cube = read_cube(&a.cube)?;
    let bands = match &a.bands {
        Some(p) => BandSpec::read(p)?,
        None => BandSpec::of_cube(&cube),
    };
    let spec = AggregationSpec { factor: a.factor };
    let out = resample_spectral(&aggregate_spatial(&cube, spec)?, &bands)?;
    write_cube(&out, &a.out)
}

fn synth_gt(a: &SynthGtArgs) -> Result<()> {
    let (fm, names) = read_fraction_map(&a.fractions)?;
    let agg = aggregate_fractions(&fm, AggregationSpec { factor: a.factor })?;
    write_label_map(&synthesize_labels(&agg, &names)?, &a.out)
}

fn build_dataset(a: &BuildDatasetArgs, log: &dyn Fn(&str)) -> Result<()> {
    if a.cubes.len() != a.labels.len() {
        return Err(Error::Usage(format!(
            "{} --cube but {} --labels arguments",
            a.cubes.len(),
            a.labels.len()
        )));
    }
    let mut images: Vec<(SpectralCube, _)> = Vec::with_capacity(a.cubes.len());
    for (c, l) in a.cubes.iter().zip(&a.labels) {
        let cube = read_cube(c)?;
        let labels = read_label_map(l)?;
        if (cube.rows(), cube.cols()) != (labels.rows(), labels.cols()) {
            return Err(Error::invalid(
                "dataset inputs",
                format!(
                    "{} is {}x{} but {} is {}x{}",
                    c.display(),
                    cube.rows(),
                    cube.cols(),
                    l.display(),
                    labels.rows(),
                    labels.cols()
                ),
            ));
        }
        images.push((cube, labels));
    }
    let plan = SplitPlan {
        test_image: a.test_image,
        train_fraction: a.train_fraction,
        seed: a.seed,
    };
    let split = split_loio(&images, &plan, a.patch_size)?;
    write_dataset(&split.train, &with_suffix(&a.out, ".train"))?;
    write_dataset(&split.val, &with_suffix(&a.out, ".val"))?;
    write_dataset(&split.test, &with_suffix(&a.out, ".test"))?;
    log(&format!(
        "train {} / val {} / test {} patches",
        split.train.len(),
        split.val.len(),
        split.test.len()
    ));
    Ok(())
}

fn train_cmd(a: &TrainArgs, log: &dyn Fn(&str)) -> Result<()> {
    let train_set = read_dataset(&with_suffix(&a.dataset, ".train"))?;
    let val_prefix = with_suffix(&a.dataset, ".val");
    let val_set = if with_suffix(&val_prefix, ".json").exists() {
        Some(read_dataset(&val_prefix)?)
    } else {
        None
    };
    let mut model = match &a.model_config {
        Some(p) => read_config::<ModelConfig>(p)?,
        None => ModelConfig::new(train_set.patch_size(), train_set.bands(), train_set.class_count()),
    };
    if let Some(r) = a.dropout {
        model.dropout_rate = r;
    }
    if let Some(p) = a.precision {
        model.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    model.validate()?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.per_label {
        cfg.per_label_samples = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.augment.noise_sigma = v;
    }
    cfg.validate()?;
    let mut net = Cnn::new(model, a.seed)?;
    net.check_dataset(&train_set)?;
    let history = train(&mut net, &train_set, val_set.as_ref(), &cfg, |e| {
        let val = e.val_accuracy.map(|v| format!(", val {v:.4}")).unwrap_or_default();
        log(&format!(
            "epoch {}: loss {:.4}, train {:.4}{val}",
            e.epoch, e.loss, e.train_accuracy
        ))
    })?;
    let trained = TrainedModel {
        net,
        band_stats: train_set.band_stats().clone(),
        classes: default_palette(train_set.class_names()),
        seed: a.seed,
    };
    write_checkpoint(&trained, &a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    write_history(&history, &history_path)
}

fn classify(a: &ClassifyArgs) -> Result<()> {
    let model = read_checkpoint(&a.model)?;
    let cube = read_cube(&a.cube)?;
    if cube.bands() != model.net.config().bands {
        return Err(Error::invalid(
            "classify inputs",
            format!(
                "model expects {} bands, cube has {}",
                model.net.config().bands,
                cube.bands()
            ),
        ));
    }
    match &a.probabilities {
        Some(p) => {
            let (labels, probs) =
                classify_image_with_probabilities(&model.net, &cube, &model.band_stats, &model.classes)?;
            let names: Vec<String> = model.classes.iter().map(|c| c.name.clone()).collect();
            write_fraction_map(&probs, &names, p)?;
            write_label_map(&labels, &a.out)
        }
        None => write_label_map(
            &classify_image(&model.net, &cube, &model.band_stats, &model.classes)?,
            &a.out,
        ),
    }
}

fn eval(a: &EvalArgs, log: &dyn Fn(&str)) -> Result<()> {
    let pred = read_label_map(&a.pred)?;
    let gt = read_label_map(&a.gt)?;
    let metrics = evaluate(&pred, &gt)?;
    cube_io::write_json(&a.out, &metrics)?;
    if let Some(p) = &a.confusion {
        let names: Vec<String> = gt.classes().iter().map(|c| c.name.clone()).collect();
        write_confusion_csv(&metrics, &names, p)?;
    }
    log(&format!(
        "overall accuracy {:.4} over {} pixels",
        metrics.overall_accuracy, metrics.n_evaluated
    ));
    Ok(())
}

fn run_all_cmd(a: &RunAllArgs, log: &dyn Fn(&str)) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config::<PipelineConfig>(p)?,
        None => PipelineConfig::benchmark(0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let lib = library(a.endmembers.as_deref())?;
    let summary = run_all(&cfg, &lib, &a.out, log)?;
    let passed = summary.folds.iter().filter(|f| f.test_accuracy >= 0.9).count();
    log(&format!(
        "{} folds, {passed} with test accuracy >= 0.90, {} artifacts hashed",
        summary.folds.len(),
        summary.manifest.len()
    ));
    Ok(())
}
