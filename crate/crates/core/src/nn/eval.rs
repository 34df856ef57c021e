use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Cnn;
use super::tensor::Tensor4;
use crate::cube_io::{FractionMap, LabelMap, PaletteEntry, SpectralCube};
use crate::dataset::BandStats;
use crate::error::{Error, Result};
use crate::par;
use crate::resolution::argmax;

fn check_inputs(net: &Cnn, cube: &SpectralCube, band_stats: &BandStats, classes: &[PaletteEntry]) -> Result<()> {
    let c = net.config();
    if cube.bands() != c.bands || band_stats.bands() != c.bands {
        return Err(Error::invalid(
            "classification",
            format!(
                "cube has {} bands and statistics {}, model expects {}",
                cube.bands(),
                band_stats.bands(),
                c.bands
            ),
        ));
    }
    if classes.len() != c.class_count {
        return Err(Error::invalid(
            "classification",
            format!("{} class names for a {}-class model", classes.len(), c.class_count),
        ));
    }
    Ok(())
}

/// Per-pixel class probabilities of the interior pixels; border pixels get
/// `None`.
fn probabilities(net: &Cnn, cube: &SpectralCube, band_stats: &BandStats) -> Result<Vec<Option<Vec<f64>>>> {
    let n = net.config().patch_size;
    let d = net.config().class_count;
    let (rows, cols, bands) = (cube.rows(), cube.cols(), cube.bands());
    let std = band_stats.apply(cube)?;
    let mut out = vec![None; rows * cols];
    if rows < n || cols < n {
        return Ok(out);
    }
    let half = n / 2;
    let inner_cols = cols - 2 * half;
    // Pixel-major copy so each window row is one contiguous slice.
    let mut pixels = vec![0.0; rows * cols * bands];
    for (i, px) in pixels.chunks_exact_mut(bands).enumerate() {
        std.pixel_into(i / cols, i % cols, px);
    }
    let row_probs = par::map_indexed(rows - 2 * half, |i| -> Result<Vec<f64>> {
        let r = i + half;
        let mut data = Vec::with_capacity(inner_cols * n * n * bands);
        for c in half..cols - half {
            for pr in r - half..=r + half {
                let start = (pr * cols + c - half) * bands;
                data.extend_from_slice(&pixels[start..start + n * bands]);
            }
        }
        net.predict(&Tensor4::new([inner_cols, n, n, bands], data)?)
    });
    for (i, probs) in row_probs.into_iter().enumerate() {
        let probs = probs?;
        for (j, p) in probs.chunks_exact(d).enumerate() {
            out[(i + half) * cols + j + half] = Some(p.to_vec());
        }
    }
    Ok(out)
}

/// Label every pixel whose full window fits inside the image with the
/// inference-mode argmax (lowest class index on ties). Border pixels get
/// the sentinel label, appended to `classes` in the palette.
///
/// `cube` is raw; it is standardized here with `band_stats`.
pub fn classify_image(
    net: &Cnn,
    cube: &SpectralCube,
    band_stats: &BandStats,
    classes: &[PaletteEntry],
) -> Result<LabelMap> {
    Ok(classify_image_with_probabilities(net, cube, band_stats, classes)?.0)
}

/// As [`classify_image`], also returning the class probabilities as a
/// fraction map (all zero on border pixels).
pub fn classify_image_with_probabilities(
    net: &Cnn,
    cube: &SpectralCube,
    band_stats: &BandStats,
    classes: &[PaletteEntry],
) -> Result<(LabelMap, FractionMap)> {
    check_inputs(net, cube, band_stats, classes)?;
    let d = classes.len();
    let sentinel = d as u8;
    let probs = probabilities(net, cube, band_stats)?;
    let labels = probs
        .iter()
        .map(|p| p.as_ref().map_or(sentinel, |p| argmax(p) as u8))
        .collect();
    let mut flat = Vec::with_capacity(probs.len() * d);
    for p in &probs {
        match p {
            Some(p) => flat.extend_from_slice(p),
            None => flat.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    // Softmax rows can exceed one by rounding; renormalize the tiny excess.
    for row in flat.chunks_exact_mut(d) {
        let s: f64 = row.iter().sum();
        if s > 1.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    let fm = FractionMap::new(cube.rows(), cube.cols(), d, flat)?;
    let lm = LabelMap::with_sentinel(cube.rows(), cube.cols(), labels, classes.to_vec())?;
    Ok((lm, fm))
}

/// Classification scores. Confusion rows are ground truth, columns are
/// predictions. Per-class accuracy is recall, `None` for classes absent
/// from the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub n_evaluated: u64,
    pub n_sentinel: u64,
}

/// Compare a prediction with ground truth, skipping pixels that carry a
/// sentinel in either map.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap) -> Result<Metrics> {
    if (pred.rows(), pred.cols()) != (gt.rows(), gt.cols()) {
        return Err(Error::invalid(
            "evaluation",
            format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.rows(),
                pred.cols(),
                gt.rows(),
                gt.cols()
            ),
        ));
    }
    let d = gt.class_count();
    if pred.class_count() != d {
        return Err(Error::invalid(
            "evaluation",
            format!("prediction has {} classes, ground truth {d}", pred.class_count()),
        ));
    }
    let mut confusion = vec![vec![0u64; d]; d];
    let mut n_sentinel = 0;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if pred.is_sentinel(p) || gt.is_sentinel(g) {
            n_sentinel += 1;
        } else {
            confusion[g as usize][p as usize] += 1;
        }
    }
    let n_evaluated: u64 = confusion.iter().flatten().sum();
    if n_evaluated == 0 {
        return Err(Error::invalid("evaluation", "no non-sentinel pixels to evaluate"));
    }
    let correct: u64 = (0..d).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[k] as f64 / support as f64)
        })
        .collect();
    Ok(Metrics {
        overall_accuracy: correct as f64 / n_evaluated as f64,
        per_class_accuracy,
        confusion_matrix: confusion,
        n_evaluated,
        n_sentinel,
    })
}

/// Confusion matrix as CSV: header `truth,<class names>`, one row per
/// ground-truth class.
pub fn write_confusion_csv(metrics: &Metrics, names: &[String], path: &Path) -> Result<()> {
    if names.len() != metrics.confusion_matrix.len() {
        return Err(Error::invalid("confusion matrix", "class name count does not match"));
    }
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["truth".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (name, row) in names.iter().zip(&metrics.confusion_matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::default_palette;
    use crate::nn::{patches_to_tensor, ModelConfig};
    use crate::dataset::{extract_patches, standardize};
    use crate::rng::{self, Stream};
    use rand::Rng;

    fn palette(d: usize) -> Vec<PaletteEntry> {
        default_palette(&(0..d).map(|i| format!("c{i}")).collect::<Vec<_>>())
    }

    fn lm(labels: Vec<u8>, d: usize) -> LabelMap {
        LabelMap::new(2, 2, labels, palette(d)).unwrap()
    }

    #[test]
    fn evaluate_counts() {
        let gt = lm(vec![0, 1, 2, 1], 3);
        let same = evaluate(&gt, &gt).unwrap();
        assert_eq!(same.overall_accuracy, 1.0);
        let wrong = evaluate(&lm(vec![1, 2, 0, 0], 3), &gt).unwrap();
        assert_eq!(wrong.overall_accuracy, 0.0);
        let m = evaluate(&lm(vec![0, 1, 2, 0], 3), &gt).unwrap();
        assert_eq!(m.overall_accuracy, 0.75);
        let supports: Vec<u64> = m.confusion_matrix.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(supports, vec![1, 2, 1]);
        assert_eq!(m.per_class_accuracy, vec![Some(1.0), Some(0.5), Some(1.0)]);
        assert_eq!(m.n_evaluated, 4);

        let other = LabelMap::new(1, 4, vec![0; 4], palette(3)).unwrap();
        assert!(evaluate(&other, &gt).is_err());
    }

    #[test]
    fn evaluate_skips_sentinels() {
        let pred = LabelMap::with_sentinel(2, 2, vec![3, 1, 1, 0], palette(3)).unwrap();
        let gt = lm(vec![0, 1, 2, 0], 3);
        let m = evaluate(&pred, &gt).unwrap();
        assert_eq!((m.n_evaluated, m.n_sentinel), (3, 1));
        assert!((m.overall_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class_accuracy[0], Some(1.0));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"overall_accuracy\""));
    }

    fn random_cube(rows: usize, cols: usize, bands: usize, seed: u64) -> SpectralCube {
        let mut rng = rng::stream(seed, Stream::Test, 20);
        let v = (0..rows * cols * bands).map(|_| rng.random_range(0.0..1.0)).collect();
        let centers = (0..bands).map(|b| 400.0 + 10.0 * b as f64).collect();
        SpectralCube::new(rows, cols, centers, vec![5.0; bands], v).unwrap()
    }

    #[test]
    fn classify_matches_per_pixel_forward() {
        let cube = random_cube(8, 9, 3, 0);
        let (_, stats) = standardize(&cube).unwrap();
        let net = Cnn::new(ModelConfig::new(5, 3, 4), 2).unwrap();
        let (labels, probs) = classify_image_with_probabilities(&net, &cube, &stats, &palette(4)).unwrap();
        assert_eq!(labels.sentinel(), Some(4));
        let dummy = LabelMap::new(8, 9, vec![0; 72], palette(4)).unwrap();
        let patches = extract_patches(&stats.apply(&cube).unwrap(), &dummy, 5, 0).unwrap();
        assert_eq!(patches.len(), 4 * 5);
        for p in &patches {
            let single = net.predict(&patches_to_tensor([p]).unwrap()).unwrap();
            let (r, c) = (p.source.row, p.source.col);
            assert_eq!(labels.get(r, c) as usize, argmax(&single));
            for (a, b) in probs.pixel(r, c).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for r in 0..8 {
            for c in 0..9 {
                let interior = (2..6).contains(&r) && (2..7).contains(&c);
                assert_eq!(labels.is_sentinel(labels.get(r, c)), !interior);
            }
        }
    }

    #[test]
    fn zeroed_model_picks_class_zero() {
        let cube = random_cube(6, 6, 2, 1);
        let (_, stats) = standardize(&cube).unwrap();
        let mut net = Cnn::new(ModelConfig::new(3, 2, 5), 0).unwrap();
        for d in net.denses_mut() {
            d.weight.value.iter_mut().for_each(|w| *w = 0.0);
        }
        let labels = classify_image(&net, &cube, &stats, &palette(5)).unwrap();
        assert!(labels.labels().iter().all(|&l| l == 0 || l == 5));
    }

    #[test]
    fn permuting_outputs_permutes_labels() {
        let cube = random_cube(7, 7, 2, 2);
        let (_, stats) = standardize(&cube).unwrap();
        let net = Cnn::new(ModelConfig::new(3, 2, 4), 5).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = net.clone();
        let last = permuted.denses_mut().last_mut().unwrap();
        let (inputs, d) = (last.inputs(), last.outputs());
        let orig_w = last.weight.value.clone();
        let orig_b = last.bias.value.clone();
        // New output k is old output perm[k].
        for i in 0..inputs {
            for k in 0..d {
                last.weight.value[i * d + k] = orig_w[i * d + perm[k]];
            }
        }
        for k in 0..d {
            last.bias.value[k] = orig_b[perm[k]];
        }
        let a = classify_image(&net, &cube, &stats, &palette(4)).unwrap();
        let b = classify_image(&permuted, &cube, &stats, &palette(4)).unwrap();
        for (&x, &y) in a.labels().iter().zip(b.labels()) {
            if a.is_sentinel(x) {
                assert!(b.is_sentinel(y));
            } else {
                assert_eq!(perm[y as usize], x as usize);
            }
        }
    }

    #[test]
    fn classify_rejects_band_mismatch() {
        let cube = random_cube(6, 6, 3, 3);
        let (_, stats) = standardize(&cube).unwrap();
        let net = Cnn::new(ModelConfig::new(3, 2, 4), 0).unwrap();
        assert!(classify_image(&net, &cube, &stats, &palette(4)).is_err());
    }
}
