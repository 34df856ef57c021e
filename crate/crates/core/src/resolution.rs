//! Adapting high-resolution rasters to a coarser sensor and synthesizing
//! labels from aggregated abundances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube_io::{self, default_palette, FractionMap, LabelMap, SpectralCube};
use crate::error::{Error, Result};

/// Target band grid. `excluded_indices` refer to positions in `centers_nm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub centers_nm: Vec<f64>,
    pub widths_nm: Vec<f64>,
    #[serde(default)]
    pub excluded_indices: Vec<usize>,
}

impl BandSpec {
    /// Twelve VNIR bands between 415 and 910 nm; the sixth duplicates the
    /// fifth and is excluded. Shipped as a default configuration, not as a
    /// sensor calibration table.
    pub fn venus_like() -> Self {
        Self {
            centers_nm: vec![
                420.0, 443.0, 490.0, 555.0, 620.0, 620.0, 667.0, 702.0, 742.0, 782.0, 865.0, 910.0,
            ],
            widths_nm: vec![
                40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 30.0, 24.0, 16.0, 16.0, 40.0, 20.0,
            ],
            excluded_indices: vec![5],
        }
    }

    /// The band grid of an existing cube, nothing excluded.
    pub fn of_cube(cube: &SpectralCube) -> Self {
        Self {
            centers_nm: cube.band_centers().to_vec(),
            widths_nm: cube.band_widths().to_vec(),
            excluded_indices: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers_nm.len() != self.widths_nm.len() {
            return Err(Error::invalid(
                "band spec",
                format!(
                    "{} centers but {} widths",
                    self.centers_nm.len(),
                    self.widths_nm.len()
                ),
            ));
        }
        if self.centers_nm.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("band spec", "centers must be non-decreasing"));
        }
        if self.widths_nm.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("band spec", "widths must be positive"));
        }
        if let Some(i) = self.excluded_indices.iter().find(|&&i| i >= self.centers_nm.len()) {
            return Err(Error::invalid("band spec", format!("excluded index {i} out of range")));
        }
        Ok(())
    }

    /// Number of bands after exclusion.
    pub fn output_bands(&self) -> usize {
        (0..self.centers_nm.len())
            .filter(|i| !self.excluded_indices.contains(i))
            .count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let spec: Self = cube_io::read_json(path)?;
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        cube_io::write_json(path, self)
    }
}

/// Block size for non-overlapping spatial aggregation (block mean).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub factor: usize,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self { factor: 5 }
    }
}

fn check_factor(factor: usize, rows: usize, cols: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::invalid("aggregation", "factor must be at least 1"));
    }
    if factor > rows || factor > cols {
        return Err(Error::invalid(
            "aggregation",
            format!("factor {factor} exceeds image size {rows}x{cols}"),
        ));
    }
    Ok(())
}

/// Mean of each `factor x factor` block of a row-major plane; remainder rows and columns dropped.
fn block_means(plane: &[f64], rows: usize, cols: usize, factor: usize) -> Vec<f64> {
    let (out_rows, out_cols) = (rows / factor, cols / factor);
    let area = (factor * factor) as f64;
    let mut out = vec![0.0; out_rows * out_cols];
    for (i, o) in out.iter_mut().enumerate() {
        let (br, bc) = (i / out_cols, i % out_cols);
        let mut sum = 0.0;
        for r in br * factor..(br + 1) * factor {
            sum += plane[r * cols + bc * factor..r * cols + (bc + 1) * factor].iter().sum::<f64>();
        }
        *o = sum / area;
    }
    out
}

/// Block-mean downsampling of every band.
pub fn aggregate_spatial(cube: &SpectralCube, spec: AggregationSpec) -> Result<SpectralCube> {
    check_factor(spec.factor, cube.rows(), cube.cols())?;
    let mut values = Vec::new();
    for b in 0..cube.bands() {
        values.extend(block_means(cube.band_plane(b), cube.rows(), cube.cols(), spec.factor));
    }
    SpectralCube::new(
        cube.rows() / spec.factor,
        cube.cols() / spec.factor,
        cube.band_centers().to_vec(),
        cube.band_widths().to_vec(),
        values,
    )
}

/// Source bands feeding each target band: those whose centers fall in the
/// target's boxcar window, or the nearest one when the window is empty.
pub fn band_mapping(source_centers: &[f64], spec: &BandSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let (lo, hi) = match (source_centers.first(), source_centers.last()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => return Err(Error::invalid("band spec", "source has no bands")),
    };
    let mut mapping = Vec::new();
    for (i, (&center, &width)) in spec.centers_nm.iter().zip(&spec.widths_nm).enumerate() {
        if spec.excluded_indices.contains(&i) {
            continue;
        }
        if center < lo - 1e-9 || center > hi + 1e-9 {
            return Err(Error::invalid(
                "band spec",
                format!("target center {center} nm lies outside the source range [{lo}, {hi}] nm"),
            ));
        }
        let half = width / 2.0;
        let inside: Vec<usize> = source_centers
            .iter()
            .enumerate()
            .filter(|(_, &s)| (s - center).abs() <= half + 1e-9)
            .map(|(j, _)| j)
            .collect();
        if inside.is_empty() {
            let nearest = source_centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - center).abs().total_cmp(&(b.1 - center).abs()))
                .map(|(j, _)| j)
                .expect("non-empty source");
            mapping.push(vec![nearest]);
        } else {
            mapping.push(inside);
        }
    }
    Ok(mapping)
}

/// Boxcar band selection onto the target grid.
pub fn resample_spectral(cube: &SpectralCube, spec: &BandSpec) -> Result<SpectralCube> {
    let mapping = band_mapping(cube.band_centers(), spec)?;
    let plane = cube.rows() * cube.cols();
    let mut values = Vec::with_capacity(plane * mapping.len());
    for sources in &mapping {
        let n = sources.len() as f64;
        for p in 0..plane {
            let sum: f64 = sources.iter().map(|&b| cube.band_plane(b)[p]).sum();
            values.push(sum / n);
        }
    }
    let kept = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .enumerate()
            .filter(|(i, _)| !spec.excluded_indices.contains(i))
            .map(|(_, x)| *x)
            .collect()
    };
    SpectralCube::new(
        cube.rows(),
        cube.cols(),
        kept(&spec.centers_nm),
        kept(&spec.widths_nm),
        values,
    )
}

/// Block means of each endmember plane. Averages of feasible vectors stay feasible.
pub fn aggregate_fractions(fm: &FractionMap, spec: AggregationSpec) -> Result<FractionMap> {
    check_factor(spec.factor, fm.rows(), fm.cols())?;
    let (rows, cols, d) = (fm.rows(), fm.cols(), fm.d());
    let (out_rows, out_cols) = (rows / spec.factor, cols / spec.factor);
    let mut out = vec![0.0; out_rows * out_cols * d];
    for k in 0..d {
        let plane: Vec<f64> = fm.fractions().iter().skip(k).step_by(d).copied().collect();
        for (i, v) in block_means(&plane, rows, cols, spec.factor).into_iter().enumerate() {
            out[i * d + k] = v;
        }
    }
    FractionMap::new(out_rows, out_cols, d, out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Label each pixel with its dominant endmember.
pub fn synthesize_labels(fm: &FractionMap, names: &[String]) -> Result<LabelMap> {
    if names.len() != fm.d() {
        return Err(Error::invalid(
            "palette",
            format!("{} names for {} endmembers", names.len(), fm.d()),
        ));
    }
    if fm.d() > 255 {
        return Err(Error::invalid("palette", "more than 255 classes"));
    }
    let labels = fm
        .fractions()
        .chunks_exact(fm.d())
        .map(|f| argmax(f) as u8)
        .collect();
    LabelMap::new(fm.rows(), fm.cols(), labels, default_palette(names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(rows: usize, cols: usize, centers: Vec<f64>, values: Vec<f64>) -> SpectralCube {
        let widths = vec![5.0; centers.len()];
        SpectralCube::new(rows, cols, centers, widths, values).unwrap()
    }

    #[test]
    fn constant_block_and_identity_factor() {
        let c = cube(5, 5, vec![500.0], vec![0.2; 25]);
        let out = aggregate_spatial(&c, AggregationSpec { factor: 5 }).unwrap();
        assert_eq!((out.rows(), out.cols()), (1, 1));
        assert!((out.get(0, 0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(aggregate_spatial(&c, AggregationSpec { factor: 1 }).unwrap(), c);
        assert!(aggregate_spatial(&c, AggregationSpec { factor: 6 }).is_err());
    }

    #[test]
    fn block_means_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..10 * 10 * 3).map(|_| rng.random()).collect();
        let c = cube(10, 10, vec![400.0, 500.0, 600.0], values);
        let out = aggregate_spatial(&c, AggregationSpec { factor: 5 }).unwrap();
        assert_eq!((out.rows(), out.cols(), out.bands()), (2, 2, 3));
        for b in 0..3 {
            for br in 0..2 {
                for bc in 0..2 {
                    let mut s = 0.0;
                    for r in 0..5 {
                        for cc in 0..5 {
                            s += c.get(br * 5 + r, bc * 5 + cc, b);
                        }
                    }
                    assert!((out.get(br, bc, b) - s / 25.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn remainder_rows_are_dropped() {
        let c = cube(7, 11, vec![500.0], (0..77).map(f64::from).collect());
        let out = aggregate_spatial(&c, AggregationSpec { factor: 5 }).unwrap();
        assert_eq!((out.rows(), out.cols()), (1, 2));
    }

    proptest! {
        #[test]
        fn aggregation_preserves_global_mean(seed in any::<u64>(), br in 1usize..4, bc in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, cols) = (br * 3, bc * 3);
            let values: Vec<f64> = (0..rows * cols * 2).map(|_| rng.random()).collect();
            let c = cube(rows, cols, vec![500.0, 600.0], values);
            let out = aggregate_spatial(&c, AggregationSpec { factor: 3 }).unwrap();
            for b in 0..2 {
                let before = c.band_plane(b).iter().sum::<f64>() / (rows * cols) as f64;
                let after = out.band_plane(b).iter().sum::<f64>() / (br * bc) as f64;
                prop_assert!((before - after).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_identity_and_window_mean() {
        let c = cube(1, 2, vec![400.0, 405.0, 410.0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(resample_spectral(&c, &BandSpec::of_cube(&c)).unwrap(), c);

        let spec = BandSpec {
            centers_nm: vec![405.0],
            widths_nm: vec![10.0],
            excluded_indices: vec![],
        };
        let out = resample_spectral(&c, &spec).unwrap();
        assert_eq!(out.bands(), 1);
        assert!((out.get(0, 0, 0) - 3.0).abs() < 1e-15);
        assert!((out.get(0, 1, 0) - 4.0).abs() < 1e-15);

        let outside = BandSpec {
            centers_nm: vec![420.0],
            widths_nm: vec![10.0],
            excluded_indices: vec![],
        };
        assert!(resample_spectral(&c, &outside).is_err());
    }

    #[test]
    fn nearest_band_fallback() {
        let c = cube(1, 1, vec![400.0, 450.0, 500.0], vec![1.0, 2.0, 3.0]);
        let spec = BandSpec {
            centers_nm: vec![470.0],
            widths_nm: vec![10.0],
            excluded_indices: vec![],
        };
        assert_eq!(resample_spectral(&c, &spec).unwrap().values(), &[2.0]);
    }

    #[test]
    fn twelve_band_target_with_exclusion_gives_eleven() {
        let centers: Vec<f64> = (0..41).map(|i| 400.0 + 50.0 * i as f64).collect();
        let c = cube(2, 2, centers, vec![0.3; 4 * 41]);
        let spec = BandSpec::venus_like();
        assert_eq!(spec.centers_nm.len(), 12);
        let out = resample_spectral(&c, &spec).unwrap();
        assert_eq!(out.bands(), 11);
        assert!(out.band_centers().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn fraction_aggregation_examples() {
        let same = FractionMap::new(2, 2, 2, [1.0, 0.0].repeat(4)).unwrap();
        let out = aggregate_fractions(&same, AggregationSpec { factor: 2 }).unwrap();
        assert_eq!(out.pixel(0, 0), &[1.0, 0.0]);

        let mixed = FractionMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = AggregationSpec { factor: 1 };
        assert_eq!(aggregate_fractions(&mixed, spec).unwrap(), mixed);
        let two = FractionMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = aggregate_fractions(&two, AggregationSpec { factor: 2 }).unwrap();
        assert_eq!(out.pixel(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn aggregated_random_maps_stay_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let d = rng.random_range(1..6);
            let fr: Vec<f64> = (0..16)
                .flat_map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.0)).collect();
                    crate::unmixing::project_feasible(&v)
                })
                .collect();
            let fm = FractionMap::new(4, 4, d, fr).unwrap();
            let out = aggregate_fractions(&fm, AggregationSpec { factor: 2 }).unwrap();
            for f in out.fractions().chunks(d) {
                assert!(f.iter().all(|x| *x >= -1e-12));
                assert!(f.iter().sum::<f64>() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn labels_follow_argmax_with_low_index_ties() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let fm = FractionMap::new(1, 2, 3, vec![0.1, 0.7, 0.2, 0.4, 0.2, 0.4]).unwrap();
        assert_eq!(synthesize_labels(&fm, &names).unwrap().labels(), &[1, 0]);
        let tie = FractionMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(synthesize_labels(&tie, &names[..2]).unwrap().labels(), &[0]);
        assert!(synthesize_labels(&tie, &names).is_err());
    }

    #[test]
    fn labels_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let names: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        for _ in 0..50 {
            // Continuous random fractions make exact ties improbable.
            let fr: Vec<f64> = (0..25)
                .flat_map(|_| {
                    let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..0.25)).collect();
                    v
                })
                .collect();
            let fm = FractionMap::new(5, 5, 4, fr.clone()).unwrap();
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<f64> = fr.chunks(4).flat_map(|f| perm.map(|p| f[p])).collect();
            let pm = FractionMap::new(5, 5, 4, permuted).unwrap();
            let a = synthesize_labels(&fm, &names).unwrap();
            let b = synthesize_labels(&pm, &names).unwrap();
            for (la, lb) in a.labels().iter().zip(b.labels()) {
                assert_eq!(perm[*lb as usize], *la as usize);
            }
            // Summing instead of averaging blocks does not move the argmax.
            let summed: Vec<f64> = fr.iter().map(|x| x * 0.5).collect();
            let sm = FractionMap::new(5, 5, 4, summed).unwrap();
            assert_eq!(synthesize_labels(&sm, &names).unwrap().labels(), a.labels());
        }
    }
}
