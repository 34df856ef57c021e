//! Browser front end for three pipeline steps on a small synthetic scene:
//! rendering the scene, unmixing a clicked pixel, and simulating coarse
//! ground truth at a chosen aggregation factor.
//!
//! [`Demo`] holds the scene. Its `try_*` methods are plain Rust and are what
//! the native tests exercise; the exported methods wrap them for JavaScript.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use specgt::cube_io::{EndmemberLibrary, FractionMap, LabelMap, SpectralCube};
use specgt::resolution::{aggregate_fractions, synthesize_labels, AggregationSpec};
use specgt::scenegen::{default_library, generate_scene, Scene, SceneSpec};
use specgt::unmixing::{unmix_image, unmix_pixel, UnmixOptions};

/// Largest scene the page offers; unmixing all of it takes a few seconds.
pub const MAX_SIDE: usize = 200;

#[derive(Debug, Serialize)]
pub struct PixelReport {
    pub row: usize,
    pub col: usize,
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct LegendEntry<'a> {
    name: &'a str,
    rgb: [u8; 3],
}

#[wasm_bindgen]
pub struct Demo {
    lib: EndmemberLibrary,
    scene: Scene,
    truth_labels: LabelMap,
    /// Unmixed fractions of the whole scene, computed on first use.
    unmixed: Option<FractionMap>,
}

impl Demo {
    pub fn try_new(rows: usize, cols: usize, seed: u64, noise_sigma: f64) -> specgt::Result<Demo> {
        if rows > MAX_SIDE || cols > MAX_SIDE {
            return Err(specgt::Error::Usage(format!("scene side is limited to {MAX_SIDE}")));
        }
        let lib = default_library();
        let spec = SceneSpec {
            noise_sigma,
            ..SceneSpec::new(rows, cols, seed)
        };
        let scene = generate_scene(&spec, &lib)?;
        let truth_labels = synthesize_labels(&scene.fractions, lib.names())?;
        Ok(Demo {
            lib,
            scene,
            truth_labels,
            unmixed: None,
        })
    }

    pub fn cube(&self) -> &SpectralCube {
        &self.scene.cube
    }

    pub fn try_unmix_pixel(&self, row: usize, col: usize, euclidean: bool) -> specgt::Result<PixelReport> {
        let cube = &self.scene.cube;
        if row >= cube.rows() || col >= cube.cols() {
            return Err(specgt::Error::Usage(format!(
                "pixel ({row}, {col}) outside {}x{}",
                cube.rows(),
                cube.cols()
            )));
        }
        let result = unmix_pixel(&cube.pixel(row, col), &self.lib, &options(euclidean))?;
        Ok(PixelReport {
            row,
            col,
            names: self.lib.names().to_vec(),
            truth: self.scene.fractions.pixel(row, col).to_vec(),
            estimate: result.fractions,
            iterations: result.iterations,
            converged: result.converged,
            objective_trace: result.objective_trace,
        })
    }

    /// Coarse labels from the aggregated unmixed fractions.
    pub fn try_simulate_gt(&mut self, factor: usize) -> specgt::Result<LabelMap> {
        if self.unmixed.is_none() {
            self.unmixed = Some(unmix_image(&self.scene.cube, &self.lib, &UnmixOptions::default())?.map);
        }
        let fm = self.unmixed.as_ref().expect("filled above");
        synthesize_labels(&aggregate_fractions(fm, AggregationSpec { factor })?, self.lib.names())
    }
}

fn options(euclidean: bool) -> UnmixOptions {
    if euclidean {
        UnmixOptions::euclidean()
    } else {
        UnmixOptions::default()
    }
}

fn js_err(e: specgt::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA false-color rendering from the bands nearest 650, 550 and 450 nm,
/// each stretched by its own maximum.
pub fn false_color(cube: &SpectralCube) -> Vec<u8> {
    let nearest = |nm: f64| {
        let centers = cube.band_centers();
        (0..centers.len())
            .min_by(|&a, &b| (centers[a] - nm).abs().total_cmp(&(centers[b] - nm).abs()))
            .expect("cube has bands")
    };
    let planes: Vec<&[f64]> = [650.0, 550.0, 450.0].iter().map(|&nm| cube.band_plane(nearest(nm))).collect();
    let scales: Vec<f64> = planes
        .iter()
        .map(|p| p.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE))
        .collect();
    let mut out = Vec::with_capacity(cube.rows() * cube.cols() * 4);
    for i in 0..cube.rows() * cube.cols() {
        for (p, s) in planes.iter().zip(&scales) {
            out.push((p[i] / s).clamp(0.0, 1.0).mul_add(255.0, 0.5) as u8);
        }
        out.push(255);
    }
    out
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(rows: usize, cols: usize, seed: u32, noise_sigma: f64) -> Result<Demo, JsError> {
        Demo::try_new(rows, cols, seed as u64, noise_sigma).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.scene.cube.rows()
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.scene.cube.cols()
    }

    /// RGBA pixels of the false-color scene.
    pub fn scene_rgba(&self) -> Vec<u8> {
        false_color(&self.scene.cube)
    }

    /// RGBA pixels of the dominant true endmember.
    pub fn truth_rgba(&self) -> Vec<u8> {
        self.truth_labels.to_rgba()
    }

    /// JSON array of `{name, rgb}` class entries.
    pub fn legend(&self) -> String {
        let entries: Vec<LegendEntry> = self
            .truth_labels
            .classes()
            .iter()
            .map(|c| LegendEntry { name: &c.name, rgb: c.rgb })
            .collect();
        serde_json::to_string(&entries).expect("plain data serializes")
    }

    /// JSON report of unmixing one pixel: true and estimated fractions and
    /// the objective after every accepted step.
    pub fn unmix_pixel(&self, row: usize, col: usize, euclidean: bool) -> Result<String, JsError> {
        let report = self.try_unmix_pixel(row, col, euclidean).map_err(js_err)?;
        Ok(serde_json::to_string(&report).expect("plain data serializes"))
    }

    /// RGBA pixels of the simulated coarse ground truth; the image is
    /// `floor(rows / factor)` by `floor(cols / factor)`.
    pub fn simulate_gt(&mut self, factor: usize) -> Result<Vec<u8>, JsError> {
        Ok(self.try_simulate_gt(factor).map_err(js_err)?.to_rgba())
    }
}
