//! In-memory containers for spectral rasters and their on-disk formats.
//!
//! Cubes are stored as a raw band-sequential little-endian `f64` payload
//! (`<prefix>.bin`) next to a JSON header (`<prefix>.json`). Label maps use
//! one `u8` per pixel in row-major order (`<prefix>.labels.bin`) with a JSON
//! palette (`<prefix>.labels.json`). Fraction maps follow the cube layout
//! with one plane per endmember (`<prefix>.fractions.{bin,json}`).

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Lower bound accepted for a single abundance.
pub const FRACTION_MIN_TOL: f64 = -1e-12;
/// Upper bound accepted for the sum of abundances of one pixel.
pub const FRACTION_SUM_TOL: f64 = 1e-9;

/// `path` with `suffix` appended to its final component (`a/b` -> `a/b.json`).
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_band_grid(centers: &[f64], widths: &[f64]) -> Result<()> {
    if centers.len() != widths.len() {
        return Err(Error::invalid(
            "band metadata",
            format!(
                "{} band centers but {} band widths",
                centers.len(),
                widths.len()
            ),
        ));
    }
    if let Some(i) = centers.iter().position(|c| !c.is_finite()) {
        return Err(Error::invalid("band metadata", format!("band center {i} is not finite")));
    }
    if let Some(i) = centers.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "band metadata",
            format!(
                "band centers must be strictly increasing ({} nm then {} nm at index {})",
                centers[i],
                centers[i + 1],
                i + 1
            ),
        ));
    }
    if let Some(i) = widths.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid(
            "band metadata",
            format!("band width {i} must be positive, got {}", widths[i]),
        ));
    }
    Ok(())
}

/// True when two band-center lists describe the same grid.
pub fn same_band_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0))
}

/// A `rows x cols x bands` reflectance raster, stored band-sequential.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    rows: usize,
    cols: usize,
    band_centers: Vec<f64>,
    band_widths: Vec<f64>,
    values: Vec<f64>,
}

impl SpectralCube {
    /// `values` is band-sequential: index `band * rows * cols + row * cols + col`.
    pub fn new(
        rows: usize,
        cols: usize,
        band_centers: Vec<f64>,
        band_widths: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || band_centers.is_empty() {
            return Err(Error::invalid(
                "cube",
                format!(
                    "dimensions must be positive, got {rows}x{cols}x{}",
                    band_centers.len()
                ),
            ));
        }
        check_band_grid(&band_centers, &band_widths)?;
        let expected = rows * cols * band_centers.len();
        if values.len() != expected {
            return Err(Error::invalid(
                "cube",
                format!(
                    "{rows}x{cols}x{} needs {expected} values, got {}",
                    band_centers.len(),
                    values.len()
                ),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("cube", format!("value {i} is not finite")));
        }
        Ok(Self {
            rows,
            cols,
            band_centers,
            band_widths,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.band_centers.len()
    }

    pub fn band_centers(&self) -> &[f64] {
        &self.band_centers
    }

    pub fn band_widths(&self) -> &[f64] {
        &self.band_widths
    }

    /// Band-sequential values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[band * self.rows * self.cols + row * self.cols + col]
    }

    /// One band as a row-major `rows x cols` plane.
    pub fn band_plane(&self, band: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.values[band * n..(band + 1) * n]
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bands()];
        self.pixel_into(row, col, &mut out);
        out
    }

    pub fn pixel_into(&self, row: usize, col: usize, out: &mut [f64]) {
        let plane = self.rows * self.cols;
        let offset = row * self.cols + col;
        for (b, v) in out.iter_mut().enumerate() {
            *v = self.values[b * plane + offset];
        }
    }

    /// Build a cube from per-pixel spectra in row-major pixel order.
    pub fn from_pixels(
        rows: usize,
        cols: usize,
        band_centers: Vec<f64>,
        band_widths: Vec<f64>,
        pixels: &[f64],
    ) -> Result<Self> {
        let bands = band_centers.len();
        if pixels.len() != rows * cols * bands {
            return Err(Error::invalid(
                "cube",
                format!(
                    "{rows}x{cols}x{bands} needs {} pixel values, got {}",
                    rows * cols * bands,
                    pixels.len()
                ),
            ));
        }
        let plane = rows * cols;
        let mut values = vec![0.0; pixels.len()];
        for p in 0..plane {
            for b in 0..bands {
                values[b * plane + p] = pixels[p * bands + b];
            }
        }
        Self::new(rows, cols, band_centers, band_widths, values)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeHeader {
    version: u32,
    rows: usize,
    cols: usize,
    bands: usize,
    band_centers_nm: Vec<f64>,
    band_widths_nm: Vec<f64>,
    dtype: String,
    order: String,
}

pub(crate) fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read exactly `expected` little-endian `f64` values.
pub(crate) fn read_f64_le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = expected * 8;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("value {i} is not finite")));
    }
    Ok(values)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_encoding(path: &Path, dtype: &str, order: &str, want_order: &str) -> Result<()> {
    if dtype != "f64le" {
        return Err(Error::format(path, format!("unsupported dtype {dtype:?}")));
    }
    if order != want_order {
        return Err(Error::format(path, format!("unsupported order {order:?}")));
    }
    Ok(())
}

/// Write `<path>.bin` and `<path>.json`.
pub fn write_cube(cube: &SpectralCube, path: &Path) -> Result<()> {
    let header = CubeHeader {
        version: FORMAT_VERSION,
        rows: cube.rows,
        cols: cube.cols,
        bands: cube.bands(),
        band_centers_nm: cube.band_centers.clone(),
        band_widths_nm: cube.band_widths.clone(),
        dtype: "f64le".into(),
        order: "bsq".into(),
    };
    write_f64_le(&with_suffix(path, ".bin"), &cube.values)?;
    write_json(&with_suffix(path, ".json"), &header)
}

pub fn read_cube(path: &Path) -> Result<SpectralCube> {
    let header_path = with_suffix(path, ".json");
    let header: CubeHeader = read_json(&header_path)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            &header_path,
            format!("unsupported version {}", header.version),
        ));
    }
    check_encoding(&header_path, &header.dtype, &header.order, "bsq")?;
    if header.bands != header.band_centers_nm.len() || header.bands != header.band_widths_nm.len()
    {
        return Err(Error::format(
            &header_path,
            format!(
                "bands={} but {} band centers and {} band widths",
                header.bands,
                header.band_centers_nm.len(),
                header.band_widths_nm.len()
            ),
        ));
    }
    let bin = with_suffix(path, ".bin");
    let values = read_f64_le(&bin, header.rows * header.cols * header.bands)?;
    SpectralCube::new(
        header.rows,
        header.cols,
        header.band_centers_nm,
        header.band_widths_nm,
        values,
    )
    .map_err(|e| Error::format(&header_path, e.to_string()))
}

/// `d` named endmember spectra sampled on a common band grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberLibrary {
    names: Vec<String>,
    band_centers: Vec<f64>,
    band_widths: Vec<f64>,
    spectra: Vec<Vec<f64>>,
}

impl EndmemberLibrary {
    pub fn new(
        names: Vec<String>,
        band_centers: Vec<f64>,
        band_widths: Vec<f64>,
        spectra: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("endmember library", "needs at least one endmember"));
        }
        if names.len() != spectra.len() {
            return Err(Error::invalid(
                "endmember library",
                format!("{} names for {} spectra", names.len(), spectra.len()),
            ));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(
                    "endmember library",
                    format!("duplicate endmember name {n:?}"),
                ));
            }
        }
        if band_centers.is_empty() {
            return Err(Error::invalid("endmember library", "needs at least one band"));
        }
        check_band_grid(&band_centers, &band_widths)?;
        for (name, s) in names.iter().zip(&spectra) {
            if s.len() != band_centers.len() {
                return Err(Error::invalid(
                    "endmember library",
                    format!(
                        "spectrum {name:?} has {} values for {} bands",
                        s.len(),
                        band_centers.len()
                    ),
                ));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "endmember library",
                    format!("spectrum {name:?} has a non-finite value"),
                ));
            }
            if s.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(
                    "endmember library",
                    format!("spectrum {name:?} has zero norm"),
                ));
            }
        }
        Ok(Self {
            names,
            band_centers,
            band_widths,
            spectra,
        })
    }

    /// Number of endmembers.
    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn bands(&self) -> usize {
        self.band_centers.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn band_centers(&self) -> &[f64] {
        &self.band_centers
    }

    pub fn band_widths(&self) -> &[f64] {
        &self.band_widths
    }

    pub fn spectrum(&self, k: usize) -> &[f64] {
        &self.spectra[k]
    }

    pub fn spectra(&self) -> &[Vec<f64>] {
        &self.spectra
    }

    /// `E f`: the mixed spectrum for abundances `f`.
    pub fn mix(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bands()];
        self.mix_into(f, &mut out);
        out
    }

    pub fn mix_into(&self, f: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (fk, s) in f.iter().zip(&self.spectra) {
            for (o, e) in out.iter_mut().zip(s) {
                *o += fk * e;
            }
        }
    }

    /// Same library with endmembers reordered: output endmember `i` is input `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            order.iter().map(|&i| self.names[i].clone()).collect(),
            self.band_centers.clone(),
            self.band_widths.clone(),
            order.iter().map(|&i| self.spectra[i].clone()).collect(),
        )
    }
}

/// Nominal width for bands read from CSV: distance to the nearest neighbour center.
fn widths_from_centers(centers: &[f64]) -> Vec<f64> {
    (0..centers.len())
        .map(|i| {
            let left = i.checked_sub(1).map(|j| centers[i] - centers[j]);
            let right = centers.get(i + 1).map(|c| c - centers[i]);
            match (left, right) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => 1.0,
            }
        })
        .collect()
}

/// Read a CSV with header `wavelength_nm,<name1>,...,<nameD>` and one row per band.
pub fn read_endmembers(path: &Path) -> Result<EndmemberLibrary> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "wavelength_nm" {
        return Err(Error::format(
            path,
            "header must be `wavelength_nm,<name1>,...,<nameD>`",
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut centers = Vec::new();
    let mut spectra = vec![Vec::new(); names.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != names.len() + 1 {
            return Err(Error::format(
                path,
                format!("row {} has {} fields, expected {}", line + 1, record.len(), names.len() + 1),
            ));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("row {}: cannot parse {s:?}", line + 1)))
        };
        centers.push(parse(&record[0])?);
        for (k, field) in record.iter().skip(1).enumerate() {
            spectra[k].push(parse(field)?);
        }
    }
    let widths = widths_from_centers(&centers);
    EndmemberLibrary::new(names, centers, widths, spectra)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_endmembers(lib: &EndmemberLibrary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec!["wavelength_nm".to_owned()];
    header.extend(lib.names.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for (b, c) in lib.band_centers.iter().enumerate() {
        let mut row = vec![c.to_string()];
        row.extend(lib.spectra.iter().map(|s| s[b].to_string()));
        w.write_record(&row)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-pixel abundances, pixel-major: index `(row * cols + col) * d + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionMap {
    rows: usize,
    cols: usize,
    d: usize,
    fractions: Vec<f64>,
}

impl FractionMap {
    pub fn new(rows: usize, cols: usize, d: usize, fractions: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("fraction map", "needs at least one endmember"));
        }
        if fractions.len() != rows * cols * d {
            return Err(Error::invalid(
                "fraction map",
                format!(
                    "{rows}x{cols}x{d} needs {} values, got {}",
                    rows * cols * d,
                    fractions.len()
                ),
            ));
        }
        for (p, f) in fractions.chunks_exact(d).enumerate() {
            if let Err(reason) = check_feasible(f) {
                return Err(Error::invalid(
                    "fraction map",
                    format!("pixel ({}, {}): {reason}", p / cols, p % cols),
                ));
            }
        }
        Ok(Self {
            rows,
            cols,
            d,
            fractions,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.d;
        &self.fractions[start..start + self.d]
    }
}

/// Feasibility within the accepted floating-point tolerances.
pub fn check_feasible(f: &[f64]) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for (k, v) in f.iter().enumerate() {
        if !v.is_finite() {
            return Err(format!("fraction {k} is not finite"));
        }
        if *v < FRACTION_MIN_TOL {
            return Err(format!("fraction {k} is negative ({v})"));
        }
        sum += v;
    }
    if sum > 1.0 + FRACTION_SUM_TOL {
        return Err(format!("fractions sum to {sum} > 1"));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FractionHeader {
    version: u32,
    rows: usize,
    cols: usize,
    endmembers: Vec<String>,
    dtype: String,
    order: String,
}

/// Write `<path>.fractions.bin` (one plane per endmember) and `<path>.fractions.json`.
pub fn write_fraction_map(map: &FractionMap, names: &[String], path: &Path) -> Result<()> {
    if names.len() != map.d {
        return Err(Error::invalid(
            "fraction map",
            format!("{} names for {} endmembers", names.len(), map.d),
        ));
    }
    let plane = map.rows * map.cols;
    let mut bsq = vec![0.0; map.fractions.len()];
    for p in 0..plane {
        for k in 0..map.d {
            bsq[k * plane + p] = map.fractions[p * map.d + k];
        }
    }
    write_f64_le(&with_suffix(path, ".fractions.bin"), &bsq)?;
    write_json(
        &with_suffix(path, ".fractions.json"),
        &FractionHeader {
            version: FORMAT_VERSION,
            rows: map.rows,
            cols: map.cols,
            endmembers: names.to_vec(),
            dtype: "f64le".into(),
            order: "bsq".into(),
        },
    )
}

/// Returns the map and the endmember names stored alongside it.
pub fn read_fraction_map(path: &Path) -> Result<(FractionMap, Vec<String>)> {
    let header_path = with_suffix(path, ".fractions.json");
    let header: FractionHeader = read_json(&header_path)?;
    check_encoding(&header_path, &header.dtype, &header.order, "bsq")?;
    let d = header.endmembers.len();
    let plane = header.rows * header.cols;
    let bsq = read_f64_le(&with_suffix(path, ".fractions.bin"), plane * d)?;
    let mut fractions = vec![0.0; bsq.len()];
    for p in 0..plane {
        for k in 0..d {
            fractions[p * d + k] = bsq[k * plane + p];
        }
    }
    let map = FractionMap::new(header.rows, header.cols, d, fractions)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    Ok((map, header.endmembers))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

const COLORS: [[u8; 3]; 12] = [
    [140, 81, 10],
    [223, 194, 125],
    [128, 128, 128],
    [1, 102, 94],
    [90, 180, 172],
    [199, 234, 70],
    [84, 39, 136],
    [230, 97, 1],
    [33, 102, 172],
    [178, 24, 43],
    [255, 255, 153],
    [0, 0, 0],
];

/// Name assigned to the reserved "no label" palette entry.
pub const SENTINEL_NAME: &str = "unlabeled";
const SENTINEL_RGB: [u8; 3] = [0, 0, 0];

/// Default palette: one fixed color per class index.
pub fn default_palette(names: &[String]) -> Vec<PaletteEntry> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| PaletteEntry {
            name: name.clone(),
            rgb: COLORS[i % (COLORS.len() - 1)],
        })
        .collect()
}

/// Per-pixel class indices with a color palette.
///
/// When `sentinel` is set, that index is the last palette entry and marks
/// pixels that carry no class (image borders after patch classification).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<u8>,
    palette: Vec<PaletteEntry>,
    sentinel: Option<u8>,
}

impl LabelMap {
    pub fn new(rows: usize, cols: usize, labels: Vec<u8>, palette: Vec<PaletteEntry>) -> Result<Self> {
        Self::build(rows, cols, labels, palette, None)
    }

    /// Label map whose palette gains a trailing sentinel entry at index `classes.len()`.
    pub fn with_sentinel(
        rows: usize,
        cols: usize,
        labels: Vec<u8>,
        classes: Vec<PaletteEntry>,
    ) -> Result<Self> {
        let sentinel = u8::try_from(classes.len())
            .map_err(|_| Error::invalid("label map", "too many classes for a u8 label"))?;
        let mut palette = classes;
        palette.push(PaletteEntry {
            name: SENTINEL_NAME.into(),
            rgb: SENTINEL_RGB,
        });
        Self::build(rows, cols, labels, palette, Some(sentinel))
    }

    fn build(
        rows: usize,
        cols: usize,
        labels: Vec<u8>,
        palette: Vec<PaletteEntry>,
        sentinel: Option<u8>,
    ) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::invalid(
                "label map",
                format!("{rows}x{cols} needs {} labels, got {}", rows * cols, labels.len()),
            ));
        }
        if palette.len() > 256 {
            return Err(Error::invalid("label map", "palette longer than 256 entries"));
        }
        if let Some(s) = sentinel {
            if s as usize + 1 != palette.len() {
                return Err(Error::invalid("label map", "sentinel must be the last palette entry"));
            }
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= palette.len()) {
            return Err(Error::invalid(
                "label map",
                format!(
                    "label {} at pixel {i} exceeds palette of {} entries",
                    labels[i],
                    palette.len()
                ),
            ));
        }
        Ok(Self {
            rows,
            cols,
            labels,
            palette,
            sentinel,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.cols + col]
    }

    pub fn palette(&self) -> &[PaletteEntry] {
        &self.palette
    }

    pub fn sentinel(&self) -> Option<u8> {
        self.sentinel
    }

    /// Palette entries that are real classes (the sentinel excluded).
    pub fn classes(&self) -> &[PaletteEntry] {
        match self.sentinel {
            Some(_) => &self.palette[..self.palette.len() - 1],
            None => &self.palette,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes().len()
    }

    pub fn is_sentinel(&self, label: u8) -> bool {
        self.sentinel == Some(label)
    }

    /// Labels as RGBA pixels, row-major.
    pub fn to_rgba(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * 4);
        for &l in &self.labels {
            let [r, g, b] = self.palette[l as usize].rgb;
            out.extend_from_slice(&[r, g, b, 255]);
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    version: u32,
    rows: usize,
    cols: usize,
    palette: Vec<PaletteEntry>,
    sentinel: Option<u8>,
}

/// Write `<path>.labels.bin` (u8, row-major) and `<path>.labels.json`.
pub fn write_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    let bin = with_suffix(path, ".labels.bin");
    fs::write(&bin, &map.labels).map_err(|e| Error::io(&bin, e))?;
    write_json(
        &with_suffix(path, ".labels.json"),
        &LabelHeader {
            version: FORMAT_VERSION,
            rows: map.rows,
            cols: map.cols,
            palette: map.palette.clone(),
            sentinel: map.sentinel,
        },
    )
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let header_path = with_suffix(path, ".labels.json");
    let header: LabelHeader = read_json(&header_path)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            &header_path,
            format!("unsupported version {}", header.version),
        ));
    }
    let bin = with_suffix(path, ".labels.bin");
    let labels = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if labels.len() != header.rows * header.cols {
        return Err(Error::format(
            &bin,
            format!(
                "expected {} bytes, found {}",
                header.rows * header.cols,
                labels.len()
            ),
        ));
    }
    LabelMap::build(header.rows, header.cols, labels, header.palette, header.sentinel)
        .map_err(|e| Error::format(&header_path, e.to_string()))
}

/// Encode the map as an RGB PNG, one pixel per label.
pub fn render_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    if map.rows == 0 || map.cols == 0 {
        return Err(Error::invalid("label map", "cannot render an empty map"));
    }
    let rgb: Vec<u8> = map
        .labels
        .iter()
        .flat_map(|&l| map.palette[l as usize].rgb)
        .collect();
    write_png_rgb(path, map.cols as u32, map.rows as u32, &rgb)
}

pub(crate) fn write_png_rgb(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}
