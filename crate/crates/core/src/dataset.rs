//! Patch corpus: standardization, patch extraction, augmentation, balanced
//! epoch sampling and leave-one-image-out splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cube_io::{self, with_suffix, LabelMap, SpectralCube, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng, Stream};

/// Per-band mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    /// Statistics pooled over every pixel of every cube.
    pub fn from_cubes(cubes: &[&SpectralCube]) -> Result<Self> {
        let first = cubes
            .first()
            .ok_or_else(|| Error::invalid("band statistics", "no cubes given"))?;
        let bands = first.bands();
        if let Some(c) = cubes.iter().find(|c| c.bands() != bands) {
            return Err(Error::invalid(
                "band statistics",
                format!("cubes disagree on band count ({bands} vs {})", c.bands()),
            ));
        }
        let mut mean = vec![0.0; bands];
        let mut std = vec![0.0; bands];
        for b in 0..bands {
            let count: usize = cubes.iter().map(|c| c.band_plane(b).len()).sum();
            let m = cubes.iter().flat_map(|c| c.band_plane(b)).sum::<f64>() / count as f64;
            let var = cubes
                .iter()
                .flat_map(|c| c.band_plane(b))
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / count as f64;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::invalid(
                    "band statistics",
                    format!("band {b} ({} nm) has zero variance", first.band_centers()[b]),
                ));
            }
            mean[b] = m;
            std[b] = s;
        }
        Ok(Self { mean, std })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` per band.
    pub fn apply(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        if cube.bands() != self.bands() {
            return Err(Error::invalid(
                "band statistics",
                format!("cube has {} bands, statistics {}", cube.bands(), self.bands()),
            ));
        }
        let plane = cube.rows() * cube.cols();
        let values = cube
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let b = i / plane;
                (v - self.mean[b]) / self.std[b]
            })
            .collect();
        SpectralCube::new(
            cube.rows(),
            cube.cols(),
            cube.band_centers().to_vec(),
            cube.band_widths().to_vec(),
            values,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::invalid("band statistics", "mean and std lengths differ"));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("band statistics", "std entries must be positive"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("band statistics", "non-finite mean"));
        }
        Ok(())
    }
}

/// Standardize every band of `cube` to zero mean and unit population std.
pub fn standardize(cube: &SpectralCube) -> Result<(SpectralCube, BandStats)> {
    let stats = BandStats::from_cubes(&[cube])?;
    Ok((stats.apply(cube)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// An odd-sized square window, stored row, column, band (channels last).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    bands: usize,
    values: Vec<f64>,
    pub label: u8,
    pub source: PatchSource,
}

impl Patch {
    pub fn new(size: usize, bands: usize, values: Vec<f64>, label: u8, source: PatchSource) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid("patch", format!("size {size} must be odd")));
        }
        if values.len() != size * size * bands {
            return Err(Error::invalid(
                "patch",
                format!("{size}x{size}x{bands} needs {} values, got {}", size * size * bands, values.len()),
            ));
        }
        Ok(Self {
            size,
            bands,
            values,
            label,
            source,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[(row * self.size + col) * self.bands + band]
    }
}

/// Patches sharing one geometry, with the class list and the standardization
/// statistics their values were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    patch_size: usize,
    bands: usize,
    class_names: Vec<String>,
    band_stats: BandStats,
    patches: Vec<Patch>,
}

impl PatchDataset {
    pub fn new(
        patch_size: usize,
        bands: usize,
        class_names: Vec<String>,
        band_stats: BandStats,
        patches: Vec<Patch>,
    ) -> Result<Self> {
        band_stats.validate()?;
        if band_stats.bands() != bands {
            return Err(Error::invalid("dataset", "band statistics do not match band count"));
        }
        if patch_size % 2 == 0 {
            return Err(Error::invalid("dataset", format!("patch size {patch_size} must be odd")));
        }
        for p in &patches {
            if p.size != patch_size || p.bands != bands {
                return Err(Error::invalid("dataset", "patches differ in geometry"));
            }
            if p.label as usize >= class_names.len() {
                return Err(Error::invalid(
                    "dataset",
                    format!("label {} exceeds {} classes", p.label, class_names.len()),
                ));
            }
        }
        Ok(Self {
            patch_size,
            bands,
            class_names,
            band_stats,
            patches,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn band_stats(&self) -> &BandStats {
        &self.band_stats
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Number of patches per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count()];
        for p in &self.patches {
            h[p.label as usize] += 1;
        }
        h
    }
}

/// One patch per pixel whose full `n x n` window fits inside the image.
/// Pixels carrying the label map's sentinel are skipped.
pub fn extract_patches(cube: &SpectralCube, labels: &LabelMap, n: usize, image: usize) -> Result<Vec<Patch>> {
    if n % 2 == 0 {
        return Err(Error::invalid("patch size", format!("{n} must be odd")));
    }
    if (cube.rows(), cube.cols()) != (labels.rows(), labels.cols()) {
        return Err(Error::invalid(
            "patch extraction",
            format!(
                "cube is {}x{} but labels are {}x{}",
                cube.rows(),
                cube.cols(),
                labels.rows(),
                labels.cols()
            ),
        ));
    }
    if n > cube.rows() || n > cube.cols() {
        return Err(Error::invalid(
            "patch size",
            format!("{n} exceeds image size {}x{}", cube.rows(), cube.cols()),
        ));
    }
    let half = n / 2;
    let bands = cube.bands();
    let mut patches = Vec::new();
    let mut spectrum = vec![0.0; bands];
    for r in half..cube.rows() - half {
        for c in half..cube.cols() - half {
            let label = labels.get(r, c);
            if labels.is_sentinel(label) {
                continue;
            }
            let mut values = Vec::with_capacity(n * n * bands);
            for pr in r - half..=r + half {
                for pc in c - half..=c + half {
                    cube.pixel_into(pr, pc, &mut spectrum);
                    values.extend_from_slice(&spectrum);
                }
            }
            patches.push(Patch {
                size: n,
                bands,
                values,
                label,
                source: PatchSource { image, row: r, col: c },
            });
        }
    }
    Ok(patches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AugmentationOp {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
    GaussianNoise { sigma: f64 },
}

impl AugmentationOp {
    /// The seven operations, noise last.
    pub fn catalog(noise_sigma: f64) -> [AugmentationOp; 7] {
        use AugmentationOp::*;
        [
            Identity,
            FlipH,
            FlipV,
            Rot90,
            Rot180,
            Rot270,
            GaussianNoise { sigma: noise_sigma },
        ]
    }

    pub fn is_spatial(&self) -> bool {
        !matches!(self, AugmentationOp::GaussianNoise { .. })
    }
}

/// Apply one augmentation. Spatial operations permute pixel positions
/// (counter-clockwise rotations, `FlipH` mirrors columns); noise adds
/// i.i.d. `N(0, sigma^2)` to every value. The label is never changed.
pub fn augment(patch: &Patch, op: AugmentationOp, rng: &mut impl Rng) -> Patch {
    let n = patch.size;
    let b = patch.bands;
    let mut out = patch.clone();
    let source_of = |r: usize, c: usize| -> (usize, usize) {
        match op {
            AugmentationOp::FlipH => (r, n - 1 - c),
            AugmentationOp::FlipV => (n - 1 - r, c),
            AugmentationOp::Rot90 => (c, n - 1 - r),
            AugmentationOp::Rot180 => (n - 1 - r, n - 1 - c),
            AugmentationOp::Rot270 => (n - 1 - c, r),
            AugmentationOp::Identity | AugmentationOp::GaussianNoise { .. } => (r, c),
        }
    };
    match op {
        AugmentationOp::Identity => {}
        AugmentationOp::GaussianNoise { sigma } => {
            for v in out.values.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        _ => {
            for r in 0..n {
                for c in 0..n {
                    let (sr, sc) = source_of(r, c);
                    let dst = (r * n + c) * b;
                    let src = (sr * n + sc) * b;
                    out.values[dst..dst + b].copy_from_slice(&patch.values[src..src + b]);
                }
            }
        }
    }
    out
}

/// How a balanced epoch draws augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Probability of adding noise on top of a spatial operation.
    pub compose_noise_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            compose_noise_prob: 0.5,
        }
    }
}

/// Exactly `per_label` augmented samples of every class, shuffled.
///
/// Each sample picks a base patch of its class uniformly, then one of the
/// seven operations uniformly; spatial operations are followed by noise
/// with probability `compose_noise_prob`.
pub fn balanced_epoch(
    ds: &PatchDataset,
    per_label: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Patch>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, p) in ds.patches.iter().enumerate() {
        by_class[p.label as usize].push(i);
    }
    let missing: Vec<&str> = by_class
        .iter()
        .zip(&ds.class_names)
        .filter(|(v, _)| v.is_empty())
        .map(|(_, n)| n.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(
            "balanced epoch",
            format!("no patches for classes: {}", missing.join(", ")),
        ));
    }
    let ops = AugmentationOp::catalog(cfg.noise_sigma);
    let noise = AugmentationOp::GaussianNoise { sigma: cfg.noise_sigma };
    let mut out = Vec::with_capacity(per_label * ds.class_count());
    for members in &by_class {
        for _ in 0..per_label {
            let base = &ds.patches[members[rng.random_range(0..members.len())]];
            let op = ops[rng.random_range(0..ops.len())];
            let mut sample = augment(base, op, rng);
            if op.is_spatial() && rng.random_bool(cfg.compose_noise_prob) {
                sample = augment(&sample, noise, rng);
            }
            out.push(sample);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Leave-one-image-out split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_image: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(test_image: usize, seed: u64) -> Self {
        Self {
            test_image,
            train_fraction: 0.9,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoioSplit {
    pub train: PatchDataset,
    pub val: PatchDataset,
    pub test: PatchDataset,
}

/// Hold out one image for testing; pool, shuffle and split the patches of
/// the others into train and validation sets.
///
/// Standardization statistics come from the non-test images only and are
/// applied to all images. Neighbouring train and validation patches overlap
/// spatially because the split is per pixel.
pub fn split_loio(images: &[(SpectralCube, LabelMap)], plan: &SplitPlan, patch_size: usize) -> Result<LoioSplit> {
    if images.len() < 2 {
        return Err(Error::invalid("split", "needs at least two images"));
    }
    if plan.test_image >= images.len() {
        return Err(Error::invalid(
            "split",
            format!("test image {} out of range for {} images", plan.test_image, images.len()),
        ));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::invalid("split", "train_fraction must lie in (0, 1)"));
    }
    let class_names: Vec<String> = images[0].1.classes().iter().map(|p| p.name.clone()).collect();
    for (i, (_, labels)) in images.iter().enumerate() {
        let names: Vec<&str> = labels.classes().iter().map(|p| p.name.as_str()).collect();
        if names != class_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::invalid("split", format!("image {i} has a different class list")));
        }
    }
    let train_cubes: Vec<&SpectralCube> = images
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != plan.test_image)
        .map(|(_, (c, _))| c)
        .collect();
    let stats = BandStats::from_cubes(&train_cubes)?;
    let bands = stats.bands();

    let mut pooled = Vec::new();
    let mut test = Vec::new();
    for (i, (cube, labels)) in images.iter().enumerate() {
        let patches = extract_patches(&stats.apply(cube)?, labels, patch_size, i)?;
        if i == plan.test_image {
            test = patches;
        } else {
            pooled.extend(patches);
        }
    }
    let mut rng = rng::stream(plan.seed, Stream::Split, plan.test_image as u64);
    pooled.shuffle(&mut rng);
    let n_train = (plan.train_fraction * pooled.len() as f64).round() as usize;
    let val = pooled.split_off(n_train);
    let make = |patches| PatchDataset::new(patch_size, bands, class_names.clone(), stats.clone(), patches);
    Ok(LoioSplit {
        train: make(pooled)?,
        val: make(val)?,
        test: make(test)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchRecord {
    label: u8,
    image: usize,
    row: usize,
    col: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    patch_size: usize,
    bands: usize,
    class_names: Vec<String>,
    band_stats: BandStats,
    dtype: String,
    order: String,
    patches: Vec<PatchRecord>,
}

/// Write `<path>.bin` (patch values, channels last, concatenated) and the
/// `<path>.json` manifest.
pub fn write_dataset(ds: &PatchDataset, path: &Path) -> Result<()> {
    let values: Vec<f64> = ds.patches.iter().flat_map(|p| p.values.iter().copied()).collect();
    cube_io::write_f64_le(&with_suffix(path, ".bin"), &values)?;
    cube_io::write_json(
        &with_suffix(path, ".json"),
        &DatasetManifest {
            version: FORMAT_VERSION,
            patch_size: ds.patch_size,
            bands: ds.bands,
            class_names: ds.class_names.clone(),
            band_stats: ds.band_stats.clone(),
            dtype: "f64le".into(),
            order: "hwc".into(),
            patches: ds
                .patches
                .iter()
                .map(|p| PatchRecord {
                    label: p.label,
                    image: p.source.image,
                    row: p.source.row,
                    col: p.source.col,
                })
                .collect(),
        },
    )
}

pub fn read_dataset(path: &Path) -> Result<PatchDataset> {
    let manifest_path = with_suffix(path, ".json");
    let manifest: DatasetManifest = cube_io::read_json(&manifest_path)?;
    if manifest.version != FORMAT_VERSION || manifest.dtype != "f64le" || manifest.order != "hwc" {
        return Err(Error::format(&manifest_path, "unsupported dataset encoding"));
    }
    let per_patch = manifest.patch_size * manifest.patch_size * manifest.bands;
    let values = cube_io::read_f64_le(&with_suffix(path, ".bin"), per_patch * manifest.patches.len())?;
    let patches = manifest
        .patches
        .iter()
        .zip(values.chunks_exact(per_patch.max(1)))
        .map(|(rec, v)| {
            Patch::new(
                manifest.patch_size,
                manifest.bands,
                v.to_vec(),
                rec.label,
                PatchSource {
                    image: rec.image,
                    row: rec.row,
                    col: rec.col,
                },
            )
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    PatchDataset::new(
        manifest.patch_size,
        manifest.bands,
        manifest.class_names,
        manifest.band_stats,
        patches,
    )
    .map_err(|e| Error::format(&manifest_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::default_palette;
    use rand::SeedableRng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn ramp_cube(rows: usize, cols: usize, bands: usize) -> SpectralCube {
        let values = (0..rows * cols * bands).map(|i| (i as f64 * 0.37).sin()).collect();
        let centers = (0..bands).map(|b| 400.0 + 10.0 * b as f64).collect();
        SpectralCube::new(rows, cols, centers, vec![5.0; bands], values).unwrap()
    }

    fn labels(rows: usize, cols: usize, classes: usize) -> LabelMap {
        let l = (0..rows * cols).map(|i| (i % classes) as u8).collect();
        LabelMap::new(rows, cols, l, default_palette(&names(classes))).unwrap()
    }

    fn random_patch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Patch {
        let v = (0..n * n * b).map(|_| rng.random_range(-1.0..1.0)).collect();
        Patch::new(n, b, v, 2, PatchSource { image: 0, row: 0, col: 0 }).unwrap()
    }

    #[test]
    fn standardize_small_band() {
        let cube = SpectralCube::new(1, 3, vec![500.0], vec![5.0], vec![1.0, 2.0, 3.0]).unwrap();
        let (out, stats) = standardize(&cube).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-15);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        for (v, want) in out.values().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((v - want).abs() < 1e-4);
        }
        let (again, _) = standardize(&out).unwrap();
        for (a, b) in again.values().iter().zip(out.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let flat = SpectralCube::new(1, 3, vec![500.0], vec![5.0], vec![0.3; 3]).unwrap();
        let msg = standardize(&flat).unwrap_err().to_string();
        assert!(msg.contains("band 0"), "{msg}");
    }

    #[test]
    fn standardized_bands_have_unit_moments() {
        let (out, _) = standardize(&ramp_cube(9, 7, 4)).unwrap();
        for b in 0..4 {
            let p = out.band_plane(b);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
            assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_counts_and_windows() {
        let one = extract_patches(&ramp_cube(5, 5, 2), &labels(5, 5, 3), 5, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].source.row, one[0].source.col), (2, 2));

        let cube = ramp_cube(7, 7, 3);
        let lm = labels(7, 7, 3);
        let patches = extract_patches(&cube, &lm, 5, 4).unwrap();
        assert_eq!(patches.len(), 9);
        for p in &patches {
            assert_eq!(p.label, lm.get(p.source.row, p.source.col));
            assert_eq!(p.source.image, 4);
            for dr in 0..5 {
                for dc in 0..5 {
                    for b in 0..3 {
                        let want = cube.get(p.source.row + dr - 2, p.source.col + dc - 2, b);
                        assert_eq!(p.get(dr, dc, b), want);
                    }
                }
            }
        }
        assert!(extract_patches(&cube, &lm, 4, 0).is_err());
        assert!(extract_patches(&cube, &lm, 9, 0).is_err());
    }

    #[test]
    fn spatial_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_patch(&mut rng, 5, 3);
        let apply = |p: &Patch, op, times: usize, rng: &mut ChaCha8Rng| {
            (0..times).fold(p.clone(), |acc, _| augment(&acc, op, rng))
        };
        assert_eq!(apply(&p, AugmentationOp::Rot90, 4, &mut rng), p);
        assert_eq!(apply(&p, AugmentationOp::FlipH, 2, &mut rng), p);
        assert_eq!(apply(&p, AugmentationOp::FlipV, 2, &mut rng), p);
        assert_eq!(apply(&p, AugmentationOp::Rot90, 2, &mut rng), augment(&p, AugmentationOp::Rot180, &mut rng));
        assert_eq!(apply(&p, AugmentationOp::Rot90, 3, &mut rng), augment(&p, AugmentationOp::Rot270, &mut rng));
        assert_eq!(augment(&p, AugmentationOp::Identity, &mut rng), p);
        for op in AugmentationOp::catalog(0.1).into_iter().filter(AugmentationOp::is_spatial) {
            let q = augment(&p, op, &mut rng);
            assert_eq!(q.label, p.label);
            let mut a = p.values().to_vec();
            let mut b = q.values().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rotation_direction() {
        let v: Vec<f64> = (0..9).map(f64::from).collect();
        let p = Patch::new(3, 1, v, 0, PatchSource { image: 0, row: 0, col: 0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Counter-clockwise: the top row becomes the left column read bottom-up.
        let r = augment(&p, AugmentationOp::Rot90, &mut rng);
        assert_eq!(r.values(), &[2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0]);
        let f = augment(&p, AugmentationOp::FlipH, &mut rng);
        assert_eq!(f.values(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn gaussian_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Patch::new(5, 40, vec![0.5; 1000], 0, PatchSource { image: 0, row: 0, col: 0 }).unwrap();
        let mut diffs = Vec::with_capacity(100_000);
        for _ in 0..100 {
            let q = augment(&p, AugmentationOp::GaussianNoise { sigma: 0.1 }, &mut rng);
            diffs.extend(q.values().iter().zip(p.values()).map(|(a, b)| a - b));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002, "{mean}");
        assert!((std - 0.1).abs() < 0.003, "{std}");
    }

    fn toy_dataset(classes: usize, per_class: usize) -> PatchDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = (0..classes * per_class)
            .map(|i| {
                let mut p = random_patch(&mut rng, 3, 2);
                p.label = (i % classes) as u8;
                p
            })
            .collect();
        let stats = BandStats { mean: vec![0.0; 2], std: vec![1.0; 2] };
        PatchDataset::new(3, 2, names(classes), stats, patches).unwrap()
    }

    #[test]
    fn balanced_epoch_counts_and_determinism() {
        let ds = toy_dataset(7, 3);
        let cfg = AugmentConfig::default();
        let epoch = balanced_epoch(&ds, 10, &cfg, &mut rng::stream(5, Stream::Epoch, 0)).unwrap();
        assert_eq!(epoch.len(), 70);
        let mut hist = [0; 7];
        epoch.iter().for_each(|p| hist[p.label as usize] += 1);
        assert_eq!(hist, [10; 7]);

        let again = balanced_epoch(&ds, 10, &cfg, &mut rng::stream(5, Stream::Epoch, 0)).unwrap();
        assert_eq!(epoch, again);
        let other = balanced_epoch(&ds, 10, &cfg, &mut rng::stream(6, Stream::Epoch, 0)).unwrap();
        assert_ne!(
            epoch.iter().map(|p| p.label).collect::<Vec<_>>(),
            other.iter().map(|p| p.label).collect::<Vec<_>>()
        );

        let big = balanced_epoch(&ds, 30_000, &cfg, &mut rng::stream(1, Stream::Epoch, 0)).unwrap();
        assert_eq!(big.len(), 210_000);
    }

    #[test]
    fn balanced_epoch_names_missing_classes() {
        let mut ds = toy_dataset(3, 2);
        ds.class_names.push("ghost".into());
        let msg = balanced_epoch(&ds, 1, &AugmentConfig::default(), &mut rng::stream(0, Stream::Epoch, 0))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("ghost"), "{msg}");
    }

    fn image_set(count: usize, rows: usize, cols: usize) -> Vec<(SpectralCube, LabelMap)> {
        (0..count)
            .map(|i| {
                let values = (0..rows * cols * 2).map(|j| ((j + 31 * i) as f64 * 0.11).cos()).collect();
                let cube = SpectralCube::new(rows, cols, vec![500.0, 600.0], vec![5.0; 2], values).unwrap();
                (cube, labels(rows, cols, 3))
            })
            .collect()
    }

    #[test]
    fn loio_counts_and_partition() {
        // 12x12 with 3x3 patches gives 10x10 = 100 patches per image.
        let images = image_set(2, 12, 12);
        let split = split_loio(&images, &SplitPlan::new(1, 9), 3).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (90, 10, 100));
        assert!(split.test.patches().iter().all(|p| p.source.image == 1));

        let images = image_set(6, 9, 9);
        for test_image in 0..6 {
            let plan = SplitPlan::new(test_image, 4);
            let split = split_loio(&images, &plan, 5).unwrap();
            assert!(split.test.patches().iter().all(|p| p.source.image == test_image));
            let mut keys: Vec<(usize, usize, usize)> = [&split.train, &split.val, &split.test]
                .iter()
                .flat_map(|d| d.patches().iter().map(|p| (p.source.image, p.source.row, p.source.col)))
                .collect();
            let total = keys.len();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), total);
            assert_eq!(total, 6 * 25);
            assert_eq!(split, split_loio(&images, &plan, 5).unwrap());
        }
        assert!(split_loio(&images, &SplitPlan::new(6, 0), 5).is_err());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds");
        let ds = toy_dataset(3, 4);
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
        let bin = with_suffix(&p, ".bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_dataset(&p).is_err());
    }
}
