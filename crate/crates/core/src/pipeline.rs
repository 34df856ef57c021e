//! End-to-end runs: generate scenes, unmix them, adapt them to the coarse
//! sensor, synthesize labels, then train and evaluate one network per
//! held-out scene.
//!
//! Seed fan-out from the single run seed `s`:
//!
//! * scene `i` uses `SceneSpec::seed = sub_seed(s, i)` (fraction field and
//!   noise streams of that seed);
//! * the split for fold `f` uses the split stream of `s`, index `f`;
//! * fold `f` trains with seed `sub_seed(s, 1000 + f)` (weight init, epoch
//!   sampling and dropout streams of that seed).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cube_io::{
    self, write_cube, write_endmembers, write_fraction_map, write_label_map, EndmemberLibrary, LabelMap, SpectralCube,
};
use crate::dataset::{split_loio, SplitPlan};
use crate::error::{Error, Result};
use crate::nn::{
    classify_image, evaluate, train, write_checkpoint, write_confusion_csv, write_history, Cnn, EpochStats, Metrics,
    ModelConfig, TrainConfig, TrainedModel,
};
use crate::resolution::{
    aggregate_fractions, aggregate_spatial, resample_spectral, synthesize_labels, AggregationSpec, BandSpec,
};
use crate::rng::sub_seed;
use crate::scenegen::{generate_scene, Scene, SceneSpec};
use crate::unmixing::{unmix_image, ImageUnmix, UnmixOptions};

/// Everything a full run depends on besides the endmember library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scene_count: usize,
    /// Template for every scene; its `seed` is replaced per scene.
    pub scene: SceneSpec,
    pub aggregation: AggregationSpec,
    pub bands: BandSpec,
    pub unmix: UnmixOptions,
    pub train_fraction: f64,
    pub model: ModelConfig,
    /// Training settings; `seed` is replaced per fold.
    pub train: TrainConfig,
}

impl PipelineConfig {
    /// Six 250x250 scenes, factor-5 aggregation onto the VNIR grid, 5x5
    /// patches, 2000 samples per class for 30 epochs.
    pub fn benchmark(seed: u64) -> Self {
        let bands = BandSpec::venus_like();
        let model = ModelConfig::new(5, bands.output_bands(), 7);
        Self {
            seed,
            scene_count: 6,
            scene: SceneSpec {
                noise_sigma: 0.002,
                ..SceneSpec::new(250, 250, 0)
            },
            aggregation: AggregationSpec::default(),
            bands,
            unmix: UnmixOptions::default(),
            train_fraction: 0.9,
            model,
            train: TrainConfig::default(),
        }
    }

    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: sub_seed(self.seed, index as u64),
            ..self.scene.clone()
        }
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        sub_seed(self.seed, 1000 + fold as u64)
    }

    /// Reject inconsistent settings before any heavy work.
    pub fn validate(&self, lib: &EndmemberLibrary) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("pipeline config", reason));
        if self.scene_count < 2 {
            return bad("at least two scenes are needed for leave-one-out folds".into());
        }
        self.scene.validate()?;
        self.bands.validate()?;
        self.unmix.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let factor = self.aggregation.factor;
        if factor == 0 || factor > self.scene.rows || factor > self.scene.cols {
            return bad(format!(
                "factor {factor} does not fit {}x{} scenes",
                self.scene.rows, self.scene.cols
            ));
        }
        let (low_rows, low_cols) = (self.scene.rows / factor, self.scene.cols / factor);
        if self.model.patch_size > low_rows || self.model.patch_size > low_cols {
            return bad(format!(
                "patch size {} exceeds the {low_rows}x{low_cols} coarse images",
                self.model.patch_size
            ));
        }
        if self.model.bands != self.bands.output_bands() {
            return bad(format!(
                "model expects {} bands, band spec yields {}",
                self.model.bands,
                self.bands.output_bands()
            ));
        }
        if self.model.class_count != lib.d() {
            return bad(format!(
                "model has {} classes, library {} endmembers",
                self.model.class_count,
                lib.d()
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// One scene carried through unmixing and adaptation.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub scene: Scene,
    /// Dominant true endmember per high-resolution pixel.
    pub truth_labels: LabelMap,
    pub unmixed: ImageUnmix,
    /// Coarse cube on the target band grid.
    pub adapted: SpectralCube,
    /// Labels from the aggregated unmixed fractions.
    pub ground_truth: LabelMap,
}

pub fn prepare_image(cfg: &PipelineConfig, lib: &EndmemberLibrary, index: usize) -> Result<PreparedImage> {
    let scene = generate_scene(&cfg.scene_spec(index), lib)?;
    let truth_labels = synthesize_labels(&scene.fractions, lib.names())?;
    let unmixed = unmix_image(&scene.cube, lib, &cfg.unmix)?;
    let adapted = resample_spectral(&aggregate_spatial(&scene.cube, cfg.aggregation)?, &cfg.bands)?;
    let ground_truth = synthesize_labels(&aggregate_fractions(&unmixed.map, cfg.aggregation)?, lib.names())?;
    Ok(PreparedImage {
        scene,
        truth_labels,
        unmixed,
        adapted,
        ground_truth,
    })
}

/// Outcome of training on all scenes but one and classifying that one.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub test_image: usize,
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
    pub validation_accuracy: f64,
    pub prediction: LabelMap,
    pub metrics: Metrics,
}

pub fn run_fold(
    cfg: &PipelineConfig,
    images: &[(SpectralCube, LabelMap)],
    test_image: usize,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<FoldResult> {
    let plan = SplitPlan {
        test_image,
        train_fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let split = split_loio(images, &plan, cfg.model.patch_size)?;
    let seed = cfg.fold_seed(test_image);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut net = Cnn::new(cfg.model.clone(), seed)?;
    let history = train(&mut net, &split.train, Some(&split.val), &train_cfg, on_epoch)?;
    let validation_accuracy = match history.last().and_then(|h| h.val_accuracy) {
        Some(v) => v,
        None => net.accuracy(split.val.patches())?,
    };
    let (cube, gt) = &images[test_image];
    let classes = gt.classes().to_vec();
    let band_stats = split.train.band_stats().clone();
    let prediction = classify_image(&net, cube, &band_stats, &classes)?;
    let metrics = evaluate(&prediction, gt)?;
    Ok(FoldResult {
        test_image,
        model: TrainedModel {
            net,
            band_stats,
            classes,
            seed,
        },
        history,
        validation_accuracy,
        prediction,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub test_image: usize,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

/// Write `summary.csv` with one row per fold.
pub fn write_summary(rows: &[FoldSummary], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except `skip`, keyed by the path
/// relative to `dir` with `/` separators.
pub fn hash_tree(dir: &Path, skip: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        if f == skip {
            continue;
        }
        let rel = f.strip_prefix(dir).expect("walked below dir");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, sha256_file(&f)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub folds: Vec<FoldSummary>,
    pub manifest: BTreeMap<String, String>,
}

/// Run every stage and write all artifacts under `out_dir`:
///
/// ```text
/// config.json, endmembers.csv
/// scene<i>/truth.*          rendered cube, true fractions, true labels
/// scene<i>/unmixed.*        estimated fractions and unmix_report.csv
/// scene<i>/adapted.*        coarse cube
/// scene<i>/gt.*             synthesized labels (+ gt.png)
/// fold<i>/model.*           checkpoint, history.csv
/// fold<i>/pred.*            predicted labels (+ pred.png)
/// fold<i>/metrics.json, fold<i>/confusion.csv
/// summary.csv, manifest.json
/// ```
pub fn run_all(
    cfg: &PipelineConfig,
    lib: &EndmemberLibrary,
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<RunSummary> {
    cfg.validate(lib)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cube_io::write_json(&out_dir.join("config.json"), cfg)?;
    write_endmembers(lib, &out_dir.join("endmembers.csv"))?;
    let names = lib.names().to_vec();

    let mut images = Vec::with_capacity(cfg.scene_count);
    for i in 0..cfg.scene_count {
        let prep = prepare_image(cfg, lib, i)?;
        let dir = out_dir.join(format!("scene{i}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_cube(&prep.scene.cube, &dir.join("truth"))?;
        write_fraction_map(&prep.scene.fractions, &names, &dir.join("truth"))?;
        write_label_map(&prep.truth_labels, &dir.join("truth"))?;
        write_fraction_map(&prep.unmixed.map, &names, &dir.join("unmixed"))?;
        write_unmix_report(&prep.unmixed, &dir.join("unmix_report.csv"))?;
        write_cube(&prep.adapted, &dir.join("adapted"))?;
        write_label_map(&prep.ground_truth, &dir.join("gt"))?;
        cube_io::render_label_map(&prep.ground_truth, &dir.join("gt.png"))?;
        log(&format!(
            "scene {i}: mean iterations {:.2}, non-converged {}",
            prep.unmixed.mean_iterations(),
            prep.unmixed.non_converged
        ));
        images.push((prep.adapted, prep.ground_truth));
    }

    let mut folds = Vec::with_capacity(cfg.scene_count);
    for f in 0..cfg.scene_count {
        let result = run_fold(cfg, &images, f, |e| {
            log(&format!(
                "fold {f} epoch {}: loss {:.4}, train {:.4}, val {:.4}",
                e.epoch,
                e.loss,
                e.train_accuracy,
                e.val_accuracy.unwrap_or(f64::NAN)
            ))
        })?;
        let dir = out_dir.join(format!("fold{f}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_checkpoint(&result.model, &dir.join("model"))?;
        write_history(&result.history, &dir.join("history.csv"))?;
        write_label_map(&result.prediction, &dir.join("pred"))?;
        cube_io::render_label_map(&result.prediction, &dir.join("pred.png"))?;
        cube_io::write_json(&dir.join("metrics.json"), &result.metrics)?;
        write_confusion_csv(&result.metrics, &names, &dir.join("confusion.csv"))?;
        log(&format!(
            "fold {f}: validation {:.4}, test {:.4}",
            result.validation_accuracy, result.metrics.overall_accuracy
        ));
        folds.push(FoldSummary {
            test_image: f,
            validation_accuracy: result.validation_accuracy,
            test_accuracy: result.metrics.overall_accuracy,
        });
    }
    write_summary(&folds, &out_dir.join("summary.csv"))?;
    let manifest_path = out_dir.join("manifest.json");
    let manifest = hash_tree(out_dir, &manifest_path)?;
    cube_io::write_json(&manifest_path, &manifest)?;
    Ok(RunSummary { folds, manifest })
}

/// One-row CSV: `pixels,mean_iterations,non_converged`.
pub fn write_unmix_report(result: &ImageUnmix, path: &Path) -> Result<()> {
    let text = format!(
        "pixels,mean_iterations,non_converged\n{},{},{}\n",
        result.pixels(),
        result.mean_iterations(),
        result.non_converged
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
