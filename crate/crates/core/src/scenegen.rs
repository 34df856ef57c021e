//! Synthetic high-resolution scenes from the linear mixture model.
//!
//! A scene is an abundance field (smoothed Gaussian noise per endmember,
//! mapped onto the feasible set) rendered through an endmember library with
//! additive zero-mean Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cube_io::{EndmemberLibrary, FractionMap, SpectralCube};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::unmixing::{project_feasible, project_simplex, sam};

/// Minimum pairwise spectral angle of the built-in library, in radians.
pub const MIN_LIBRARY_ANGLE: f64 = 0.1;

pub const DEFAULT_CLASS_NAMES: [&str; 7] = [
    "Brown Soil",
    "Light Soil",
    "Rock",
    "Tall Tree/Shrub",
    "Dwarf Shrub",
    "Herbaceous",
    "Dense Shrub/Burned Area",
];

/// 41 band centers from 400 to 2400 nm, 5 nm wide.
pub fn default_band_grid() -> (Vec<f64>, Vec<f64>) {
    let centers: Vec<f64> = (0..41).map(|i| 400.0 + 50.0 * i as f64).collect();
    let widths = vec![5.0; centers.len()];
    (centers, widths)
}

fn bump(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp()
}

/// Seven smooth analytic reflectance curves on [`default_band_grid`].
///
/// Each class has one narrow feature in the 400-900 nm range (visible to
/// the coarse sensor) and one broad feature beyond 1000 nm, over a small
/// baseline and a class-specific slope.
pub fn default_library() -> EndmemberLibrary {
    const VNIR: [f64; 7] = [420.0, 500.0, 580.0, 660.0, 740.0, 820.0, 900.0];
    const SWIR: [f64; 7] = [1100.0, 1700.0, 2300.0, 1300.0, 1900.0, 1500.0, 2100.0];
    const SLOPE: [f64; 7] = [0.06, 0.03, 0.04, -0.02, 0.0, -0.01, 0.02];
    let (centers, widths) = default_band_grid();
    let spectra = (0..7)
        .map(|k| {
            centers
                .iter()
                .map(|&w| {
                    0.04 + SLOPE[k].max(0.0) * (w - 400.0) / 2000.0
                        + SLOPE[k].min(0.0) * (2400.0 - w) / 2000.0
                        + 0.30 * bump(w, VNIR[k], 45.0)
                        + 0.25 * bump(w, SWIR[k], 120.0)
                })
                .collect()
        })
        .collect();
    let lib = EndmemberLibrary::new(
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        centers,
        widths,
        spectra,
    )
    .expect("built-in library is valid");
    let angle = min_pairwise_angle(&lib);
    assert!(
        angle >= MIN_LIBRARY_ANGLE,
        "built-in library separation {angle} below {MIN_LIBRARY_ANGLE}"
    );
    lib
}

/// Smallest spectral angle between two distinct endmembers (infinite for `d = 1`).
pub fn min_pairwise_angle(lib: &EndmemberLibrary) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..lib.d() {
        for j in i + 1..lib.d() {
            let a = sam(lib.spectrum(i), lib.spectrum(j)).expect("library spectra have nonzero norm");
            best = best.min(a);
        }
    }
    best
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    /// Gaussian correlation length of the abundance fields, in pixels; 0 gives i.i.d. pixels.
    pub smoothness: f64,
    /// Standard deviation of the additive reflectance noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Scale applied to the unit-variance fields before projection. Larger
    /// values give purer pixels.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Project onto the unit-sum face (every pixel fully covered) instead of
    /// the whole feasible set.
    #[serde(default = "default_full_cover")]
    pub full_cover: bool,
}

fn default_contrast() -> f64 {
    3.0
}

fn default_full_cover() -> bool {
    true
}

impl SceneSpec {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            smoothness: 4.0,
            noise_sigma: 0.0,
            seed,
            contrast: default_contrast(),
            full_cover: default_full_cover(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("scene spec", "rows and cols must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("scene spec", "noise_sigma must be >= 0"));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::invalid("scene spec", "smoothness must be >= 0"));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::invalid("scene spec", "contrast must be positive"));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| bump(i as f64, radius as f64, sigma))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Separable Gaussian blur of a row-major plane, clamping at the borders.
fn blur(plane: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * plane[r * cols + clamp(c as isize + i as isize - radius, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clamp(r as isize + i as isize - radius, rows) * cols + c])
                .sum();
        }
    }
    out
}

/// Spatially correlated random abundances for `d` endmembers.
pub fn generate_fraction_field(spec: &SceneSpec, d: usize) -> Result<FractionMap> {
    spec.validate()?;
    if d == 0 {
        return Err(Error::invalid("scene spec", "needs at least one endmember"));
    }
    let n = spec.rows * spec.cols;
    let mut rng = rng::stream(spec.seed, Stream::FractionField, 0);
    let mut fields = Vec::with_capacity(d);
    for _ in 0..d {
        let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut field = blur(&white, spec.rows, spec.cols, spec.smoothness);
        let mean = field.iter().sum::<f64>() / n as f64;
        let var = field.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { spec.contrast / var.sqrt() } else { spec.contrast };
        field.iter_mut().for_each(|x| *x = (*x - mean) * scale);
        fields.push(field);
    }
    let mut fractions = Vec::with_capacity(n * d);
    let mut v = vec![0.0; d];
    for p in 0..n {
        for (k, field) in fields.iter().enumerate() {
            v[k] = field[p];
        }
        let f = if spec.full_cover {
            project_simplex(&v)
        } else {
            project_feasible(&v)
        };
        fractions.extend_from_slice(&f);
    }
    FractionMap::new(spec.rows, spec.cols, d, fractions)
}

/// `m = E f + n` per pixel with `n ~ N(0, noise_sigma^2)` i.i.d. per band.
pub fn render_scene(
    fm: &FractionMap,
    lib: &EndmemberLibrary,
    noise_sigma: f64,
    seed: u64,
) -> Result<SpectralCube> {
    if fm.d() != lib.d() {
        return Err(Error::invalid(
            "scene",
            format!("fraction map has {} endmembers, library {}", fm.d(), lib.d()),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("scene", "noise_sigma must be >= 0"));
    }
    let bands = lib.bands();
    let mut rng = rng::stream(seed, Stream::SceneNoise, 0);
    let mut pixels = vec![0.0; fm.rows() * fm.cols() * bands];
    for (p, spectrum) in pixels.chunks_exact_mut(bands).enumerate() {
        lib.mix_into(&fm.fractions()[p * lib.d()..(p + 1) * lib.d()], spectrum);
        if noise_sigma > 0.0 {
            for v in spectrum.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_sigma * z;
            }
        }
    }
    SpectralCube::from_pixels(
        fm.rows(),
        fm.cols(),
        lib.band_centers().to_vec(),
        lib.band_widths().to_vec(),
        &pixels,
    )
}

/// Noise standard deviation that gives `snr_db` against the mean signal power of `cube`.
pub fn noise_sigma_for_snr(cube: &SpectralCube, snr_db: f64) -> f64 {
    let power = cube.values().iter().map(|v| v * v).sum::<f64>() / cube.values().len() as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// A generated scene: true abundances and the rendered cube.
#[derive(Debug, Clone)]
pub struct Scene {
    pub fractions: FractionMap,
    pub cube: SpectralCube,
}

pub fn generate_scene(spec: &SceneSpec, lib: &EndmemberLibrary) -> Result<Scene> {
    let fractions = generate_fraction_field(spec, lib.d())?;
    let cube = render_scene(&fractions, lib, spec.noise_sigma, spec.seed)?;
    Ok(Scene { fractions, cube })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::check_feasible;

    #[test]
    fn builtin_library_is_separated() {
        let lib = default_library();
        assert_eq!((lib.d(), lib.bands()), (7, 41));
        assert!(min_pairwise_angle(&lib) >= MIN_LIBRARY_ANGLE);
        assert!(lib.spectra().iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn fields_are_feasible_and_deterministic() {
        for seed in 0..5 {
            for (smoothness, full_cover) in [(0.0, true), (3.0, true), (2.0, false)] {
                let spec = SceneSpec {
                    smoothness,
                    full_cover,
                    ..SceneSpec::new(12, 9, seed)
                };
                let a = generate_fraction_field(&spec, 4).unwrap();
                assert!(a.fractions().chunks(4).all(|f| check_feasible(f).is_ok()));
                assert_eq!(a, generate_fraction_field(&spec, 4).unwrap());
                if full_cover {
                    assert!(a.fractions().chunks(4).all(|f| (f.iter().sum::<f64>() - 1.0).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn smoothness_controls_spatial_correlation() {
        let lag1 = |smoothness: f64| {
            let spec = SceneSpec {
                smoothness,
                ..SceneSpec::new(64, 64, 3)
            };
            let fm = generate_fraction_field(&spec, 3).unwrap();
            let plane: Vec<f64> = fm.fractions().iter().step_by(3).copied().collect();
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            let var: f64 = plane.iter().map(|x| (x - mean).powi(2)).sum();
            let cov: f64 = (0..64)
                .flat_map(|r| (0..63).map(move |c| (r, c)))
                .map(|(r, c)| (plane[r * 64 + c] - mean) * (plane[r * 64 + c + 1] - mean))
                .sum();
            cov / var
        };
        assert!(lag1(0.0).abs() < 0.1);
        assert!(lag1(4.0) > 0.7);
    }

    #[test]
    fn noise_free_rendering_is_the_mixture() {
        let lib = default_library();
        let mut unit = vec![0.0; 7];
        unit[3] = 1.0;
        let fm = FractionMap::new(1, 1, 7, unit).unwrap();
        let cube = render_scene(&fm, &lib, 0.0, 1).unwrap();
        assert_eq!(cube.pixel(0, 0), lib.spectrum(3));

        let spec = SceneSpec::new(6, 5, 8);
        let fm = generate_fraction_field(&spec, 7).unwrap();
        let cube = render_scene(&fm, &lib, 0.0, 1).unwrap();
        for r in 0..6 {
            for c in 0..5 {
                let f = fm.pixel(r, c);
                for b in 0..lib.bands() {
                    let mut want = 0.0;
                    for k in 0..7 {
                        want += lib.spectrum(k)[b] * f[k];
                    }
                    assert!((cube.get(r, c, b) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn rendering_is_linear_in_fractions() {
        let lib = default_library();
        let a = generate_fraction_field(&SceneSpec::new(4, 4, 1), 7).unwrap();
        let b = generate_fraction_field(&SceneSpec::new(4, 4, 2), 7).unwrap();
        let alpha = 0.3;
        let mix: Vec<f64> = a
            .fractions()
            .iter()
            .zip(b.fractions())
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        let mixed = render_scene(&FractionMap::new(4, 4, 7, mix).unwrap(), &lib, 0.0, 0).unwrap();
        let ra = render_scene(&a, &lib, 0.0, 0).unwrap();
        let rb = render_scene(&b, &lib, 0.0, 0).unwrap();
        for ((m, x), y) in mixed.values().iter().zip(ra.values()).zip(rb.values()) {
            assert!((m - (alpha * x + (1.0 - alpha) * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn noise_matches_half_normal_mean() {
        let lib = default_library();
        let spec = SceneSpec::new(50, 50, 4);
        let fm = generate_fraction_field(&spec, 7).unwrap();
        let clean = render_scene(&fm, &lib, 0.0, 5).unwrap();
        let noisy = render_scene(&fm, &lib, 0.01, 5).unwrap();
        let n = 100_000;
        let mad = noisy.values()[..n]
            .iter()
            .zip(&clean.values()[..n])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
        let expected = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad - expected).abs() <= 0.05 * expected, "{mad} vs {expected}");
        assert_eq!(noisy, render_scene(&fm, &lib, 0.01, 5).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let fm = FractionMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert!(render_scene(&fm, &default_library(), 0.0, 0).is_err());
    }
}
