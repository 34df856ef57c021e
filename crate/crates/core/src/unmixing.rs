//! Fully constrained per-pixel unmixing.
//!
//! Abundances live in `{f >= 0, sum(f) <= 1}`. Each pixel is solved by
//! projected gradient descent with a golden-section line search along the
//! projected arc `alpha -> P(f - alpha * g)`. The default objective is the
//! spectral angle between the pixel `m` and its reconstruction `E f`; the
//! squared Euclidean residual is available as a cross-check.
//!
//! Inside the solver both objectives are evaluated through the Gram matrix
//! `G = E^T E` and `b = E^T m`, so a function evaluation costs `O(d^2)`
//! instead of `O(bands * d)`.

use serde::{Deserialize, Serialize};

use crate::cube_io::{same_band_grid, EndmemberLibrary, FractionMap, SpectralCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Angle between `m` and `E f`, in radians.
    SpectralAngle,
    /// `||m - E f||^2`.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineSearchKind {
    GoldenSection,
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `f_i = 1 / (2d)`.
    UniformInterior,
    /// Unconstrained least squares, projected onto the feasible set.
    ProjectedLeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmixOptions {
    pub objective: Objective,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub obj_tol: f64,
    pub line_search: LineSearchKind,
    pub init: Init,
    /// Norms at or below this are treated as zero.
    pub epsilon_norm: f64,
}

impl Default for UnmixOptions {
    fn default() -> Self {
        Self {
            objective: Objective::SpectralAngle,
            max_iters: 500,
            grad_tol: 1e-8,
            obj_tol: 1e-10,
            line_search: LineSearchKind::GoldenSection,
            init: Init::UniformInterior,
            epsilon_norm: 1e-12,
        }
    }
}

impl UnmixOptions {
    pub fn euclidean() -> Self {
        Self {
            objective: Objective::Euclidean,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("unmix options", "max_iters must be at least 1"));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("obj_tol", self.obj_tol),
            ("epsilon_norm", self.epsilon_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("unmix options", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Spectral angle between two spectra, in `[0, pi]`.
///
/// Evaluated as `2 atan2(|a^ - b^|, |a^ + b^|)` on the unit vectors, which
/// equals `acos(<a,b> / (|a||b|))` but stays accurate for nearly parallel
/// spectra and is exactly zero for identical ones.
pub fn sam(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "spectra",
            format!("length mismatch {} vs {}", a.len(), b.len()),
        ));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Domain("spectral angle of a zero-norm spectrum".into()));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).clamp(0.0, std::f64::consts::PI))
}

fn check_problem(f: &[f64], m: &[f64], lib: &EndmemberLibrary) -> Result<()> {
    if f.len() != lib.d() {
        return Err(Error::invalid(
            "fractions",
            format!("{} fractions for {} endmembers", f.len(), lib.d()),
        ));
    }
    if m.len() != lib.bands() {
        return Err(Error::invalid(
            "spectrum",
            format!("{} values for {} library bands", m.len(), lib.bands()),
        ));
    }
    Ok(())
}

/// Objective value at `f` for pixel `m`, computed directly from `E f`.
pub fn objective(f: &[f64], m: &[f64], lib: &EndmemberLibrary, opts: &UnmixOptions) -> Result<f64> {
    check_problem(f, m, lib)?;
    let y = lib.mix(f);
    match opts.objective {
        Objective::SpectralAngle => {
            if norm(m) <= opts.epsilon_norm {
                return Err(Error::Domain("zero-norm pixel".into()));
            }
            if norm(&y) <= opts.epsilon_norm {
                return Err(Error::Domain("singular point: |E f| is zero".into()));
            }
            sam(m, &y)
        }
        Objective::Euclidean => Ok(m.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum()),
    }
}

/// Analytic gradient of [`objective`] with respect to `f`.
///
/// For the spectral angle, the gradient is zero where `E f` is parallel to
/// `m`: the angle has a cone-shaped minimum there and zero is a subgradient.
pub fn gradient(f: &[f64], m: &[f64], lib: &EndmemberLibrary, opts: &UnmixOptions) -> Result<Vec<f64>> {
    check_problem(f, m, lib)?;
    let y = lib.mix(f);
    let dy: Vec<f64> = match opts.objective {
        Objective::Euclidean => y.iter().zip(m).map(|(a, b)| 2.0 * (a - b)).collect(),
        Objective::SpectralAngle => {
            let nm = norm(m);
            let ny = norm(&y);
            if nm <= opts.epsilon_norm {
                return Err(Error::Domain("zero-norm pixel".into()));
            }
            if ny <= opts.epsilon_norm {
                return Err(Error::Domain("singular point: |E f| is zero".into()));
            }
            let theta = sam(m, &y)?;
            let s = theta.sin();
            if theta == 0.0 || s == 0.0 {
                return Ok(vec![0.0; f.len()]);
            }
            let c = (dot(m, &y) / (nm * ny)).clamp(-1.0, 1.0);
            m.iter()
                .zip(&y)
                .map(|(mi, yi)| -(mi / (nm * ny) - c * yi / (ny * ny)) / s)
                .collect()
        }
    };
    Ok(lib.spectra().iter().map(|e| dot(e, &dy)).collect())
}

/// Euclidean projection onto `{f >= 0, sum(f) <= 1}`.
///
/// Negatives are clipped; if the clipped vector already sums to at most one
/// it is the projection, otherwise the result is the projection onto the
/// unit simplex. Entries are exactly non-negative and the sum exceeds one
/// by at most a few ulps, which keeps the map exactly idempotent.
pub fn project_feasible(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= 1.0 + sum_slack(v.len()) {
        clipped
    } else {
        project_simplex(v)
    }
}

fn sum_slack(d: usize) -> f64 {
    4.0 * d as f64 * f64::EPSILON
}

/// Euclidean projection onto the unit simplex `{f >= 0, sum(f) = 1}` by sorting.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// `G = E^T E`, row-major `d x d`.
pub fn gram_matrix(lib: &EndmemberLibrary) -> Vec<f64> {
    let d = lib.d();
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v = dot(lib.spectrum(i), lib.spectrum(j));
            g[i * d + j] = v;
            g[j * d + i] = v;
        }
    }
    g
}

/// One pixel's objective in Gram form.
struct PixelProblem<'a> {
    gram: &'a [f64],
    b: Vec<f64>,
    m_norm: f64,
    m_sq: f64,
    objective: Objective,
    eps: f64,
}

impl<'a> PixelProblem<'a> {
    fn new(m: &[f64], lib: &EndmemberLibrary, gram: &'a [f64], opts: &UnmixOptions) -> Result<Self> {
        let m_sq = dot(m, m);
        let m_norm = m_sq.sqrt();
        if !(m_norm > opts.epsilon_norm) {
            return Err(Error::Domain("zero-norm pixel".into()));
        }
        Ok(Self {
            gram,
            b: lib.spectra().iter().map(|e| dot(e, m)).collect(),
            m_norm,
            m_sq,
            objective: opts.objective,
            eps: opts.epsilon_norm,
        })
    }

    fn d(&self) -> usize {
        self.b.len()
    }

    fn gram_times(&self, f: &[f64]) -> Vec<f64> {
        let d = self.d();
        (0..d).map(|i| dot(&self.gram[i * d..(i + 1) * d], f)).collect()
    }

    /// `None` at a singular point of the spectral angle.
    fn value(&self, f: &[f64]) -> Option<f64> {
        let gf = self.gram_times(f);
        let quad = dot(f, &gf);
        match self.objective {
            Objective::Euclidean => Some(self.m_sq - 2.0 * dot(&self.b, f) + quad),
            Objective::SpectralAngle => {
                let s = quad.max(0.0).sqrt();
                if s <= self.eps {
                    return None;
                }
                let c = dot(&self.b, f) / (self.m_norm * s);
                Some(c.clamp(-1.0, 1.0).acos())
            }
        }
    }

    fn grad(&self, f: &[f64]) -> Option<Vec<f64>> {
        let gf = self.gram_times(f);
        match self.objective {
            Objective::Euclidean => Some(gf.iter().zip(&self.b).map(|(a, b)| 2.0 * (a - b)).collect()),
            Objective::SpectralAngle => {
                let quad = dot(f, &gf);
                let s = quad.max(0.0).sqrt();
                if s <= self.eps {
                    return None;
                }
                let bf = dot(&self.b, f);
                let c = bf / (self.m_norm * s);
                let sin = (1.0 - c * c).max(0.0).sqrt();
                if c >= 1.0 || sin == 0.0 {
                    return Some(vec![0.0; self.d()]);
                }
                Some(
                    self.b
                        .iter()
                        .zip(&gf)
                        .map(|(bk, gk)| -(bk / (self.m_norm * s) - bf * gk / (self.m_norm * s * s * s)) / sin)
                        .collect(),
                )
            }
        }
    }

    fn arc_value(&self, f: &[f64], g: &[f64], alpha: f64) -> f64 {
        let trial: Vec<f64> = f.iter().zip(g).map(|(x, gx)| x - alpha * gx).collect();
        self.value(&project_feasible(&trial)).unwrap_or(f64::INFINITY)
    }
}

/// Result of a line search along the projected arc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    /// Selected step; zero when no descent was found.
    pub step: f64,
    /// Upper end of the interval that was searched.
    pub alpha_max: f64,
    /// Objective at the selected step.
    pub value: f64,
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;
const MAX_BRACKET: usize = 80;

fn golden_section(phi: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let mut f1 = phi(x1);
    let mut f2 = phi(x2);
    while b - a > tol {
        // Ties shrink towards the smaller step.
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = phi(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = phi(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn search(
    problem: &PixelProblem<'_>,
    f: &[f64],
    g: &[f64],
    phi0: f64,
    hint: Option<f64>,
    kind: LineSearchKind,
) -> LineSearchOutcome {
    let none = LineSearchOutcome {
        step: 0.0,
        alpha_max: 0.0,
        value: phi0,
    };
    let gn = norm(g);
    if gn == 0.0 || !gn.is_finite() {
        return none;
    }
    let phi = |alpha: f64| problem.arc_value(f, g, alpha);
    let start = hint.map_or(1.0 / gn, |h| 2.0 * h);

    match kind {
        LineSearchKind::Backtracking => {
            let mut alpha = start;
            for _ in 0..MAX_BRACKET {
                let trial: Vec<f64> = f.iter().zip(g).map(|(x, gx)| x - alpha * gx).collect();
                let p = project_feasible(&trial);
                let decrease: f64 = g.iter().zip(f.iter().zip(&p)).map(|(gx, (x, px))| gx * (x - px)).sum();
                let value = problem.value(&p).unwrap_or(f64::INFINITY);
                if value < phi0 && value <= phi0 - 1e-4 * decrease {
                    return LineSearchOutcome {
                        step: alpha,
                        alpha_max: start,
                        value,
                    };
                }
                alpha *= 0.5;
            }
            none
        }
        LineSearchKind::GoldenSection => {
            let cap = 1e8 / gn;
            let mut hi = start.min(cap);
            let mut f_hi = phi(hi);
            let alpha_max = if f_hi < phi0 {
                // Expand while the objective still drops by more than rounding noise;
                // plateaus (projection saturated at a vertex) end the expansion.
                let mut top = hi;
                while hi < cap {
                    let next = (2.0 * hi).min(cap);
                    let f_next = phi(next);
                    top = next;
                    if f_next < f_hi - 1e-12 * f_hi.abs() {
                        hi = next;
                        f_hi = f_next;
                    } else {
                        break;
                    }
                }
                top
            } else {
                let mut found = false;
                for _ in 0..MAX_BRACKET {
                    hi *= 0.5;
                    f_hi = phi(hi);
                    if f_hi < phi0 {
                        found = true;
                        break;
                    }
                }
                if !found {
                    return none;
                }
                2.0 * hi
            };
            let (alpha, value) = golden_section(phi, 0.0, alpha_max, 1e-8 * alpha_max);
            let (step, value) = if value <= f_hi { (alpha, value) } else { (hi, f_hi) };
            if value < phi0 {
                LineSearchOutcome {
                    step,
                    alpha_max,
                    value,
                }
            } else {
                LineSearchOutcome { alpha_max, ..none }
            }
        }
    }
}

/// Step length along `alpha -> P(f - alpha g)` that approximately minimizes
/// the objective. Never increases the objective; returns a zero step when
/// no descent is found.
pub fn line_search(
    f: &[f64],
    g: &[f64],
    m: &[f64],
    lib: &EndmemberLibrary,
    opts: &UnmixOptions,
) -> Result<LineSearchOutcome> {
    check_problem(f, m, lib)?;
    if g.len() != f.len() {
        return Err(Error::invalid("gradient", "length differs from fractions"));
    }
    let gram = gram_matrix(lib);
    let problem = PixelProblem::new(m, lib, &gram, opts)?;
    let phi0 = problem
        .value(f)
        .ok_or_else(|| Error::Domain("singular point: |E f| is zero".into()))?;
    Ok(search(&problem, f, g, phi0, None, opts.line_search))
}

/// Outcome of unmixing one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelUnmix {
    pub fractions: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step
    /// (before the final unit-sum rescaling of the spectral-angle mode).
    pub objective_trace: Vec<f64>,
}

fn solve_cholesky(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| l[k * d + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * d + i];
    }
    Some(x)
}

fn initial_point(problem: &PixelProblem<'_>, init: Init) -> Vec<f64> {
    let d = problem.d();
    let uniform = vec![1.0 / (2.0 * d as f64); d];
    match init {
        Init::UniformInterior => uniform,
        Init::ProjectedLeastSquares => {
            let trace: f64 = (0..d).map(|i| problem.gram[i * d + i]).sum();
            let mut ridged = problem.gram.to_vec();
            for i in 0..d {
                ridged[i * d + i] += 1e-12 * trace;
            }
            match solve_cholesky(&ridged, &problem.b) {
                Some(x) => {
                    let p = project_feasible(&x);
                    if problem.value(&p).is_some() {
                        p
                    } else {
                        uniform
                    }
                }
                None => uniform,
            }
        }
    }
}

fn solve_pixel(problem: &PixelProblem<'_>, opts: &UnmixOptions) -> Result<PixelUnmix> {
    let mut f = initial_point(problem, opts.init);
    let mut value = problem
        .value(&f)
        .ok_or_else(|| Error::Domain("singular starting point: |E f| is zero".into()))?;
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut hint = None;

    for it in 1..=opts.max_iters {
        let g = problem
            .grad(&f)
            .ok_or_else(|| Error::Numerical("gradient evaluated at a singular point".into()))?;
        let shifted: Vec<f64> = f.iter().zip(&g).map(|(x, gx)| x - gx).collect();
        let projected = project_feasible(&shifted);
        let pg: f64 = f.iter().zip(&projected).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if pg < opts.grad_tol {
            converged = true;
            break;
        }
        let ls = search(problem, &f, &g, value, hint, opts.line_search);
        if ls.step == 0.0 || ls.value >= value {
            // No representable descent along the projected arc.
            converged = true;
            break;
        }
        let trial: Vec<f64> = f.iter().zip(&g).map(|(x, gx)| x - ls.step * gx).collect();
        f = project_feasible(&trial);
        iterations = it;
        trace.push(ls.value);
        let change = value - ls.value;
        value = ls.value;
        hint = Some(ls.step);
        if change < opts.obj_tol {
            converged = true;
            break;
        }
    }

    if opts.objective == Objective::SpectralAngle {
        let sum: f64 = f.iter().sum();
        if sum > 0.0 {
            f.iter_mut().for_each(|x| *x /= sum);
        }
    }
    Ok(PixelUnmix {
        fractions: f,
        iterations,
        converged,
        objective_trace: trace,
    })
}

fn check_grid(bands: usize, centers: &[f64], lib: &EndmemberLibrary) -> Result<()> {
    if bands != lib.bands() || !same_band_grid(centers, lib.band_centers()) {
        return Err(Error::invalid(
            "band grid",
            format!(
                "cube has {bands} bands, endmember library has {} on a different grid",
                lib.bands()
            ),
        ));
    }
    Ok(())
}

/// Fully constrained abundances of one pixel spectrum `m`.
///
/// In spectral-angle mode the minimizer is only defined up to scale, so the
/// converged vector is rescaled to sum to one.
pub fn unmix_pixel(m: &[f64], lib: &EndmemberLibrary, opts: &UnmixOptions) -> Result<PixelUnmix> {
    opts.validate()?;
    if m.len() != lib.bands() {
        return Err(Error::invalid(
            "spectrum",
            format!("{} values for {} library bands", m.len(), lib.bands()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("spectrum", "non-finite value"));
    }
    let gram = gram_matrix(lib);
    let problem = PixelProblem::new(m, lib, &gram, opts)?;
    solve_pixel(&problem, opts)
}

/// Fraction map of a whole image plus convergence statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageUnmix {
    pub map: FractionMap,
    pub total_iterations: u64,
    pub non_converged: usize,
}

impl ImageUnmix {
    pub fn pixels(&self) -> usize {
        self.map.rows() * self.map.cols()
    }

    pub fn mean_iterations(&self) -> f64 {
        self.total_iterations as f64 / self.pixels().max(1) as f64
    }
}

/// Unmix every pixel independently. The result does not depend on how many
/// worker threads evaluate it.
pub fn unmix_image(cube: &SpectralCube, lib: &EndmemberLibrary, opts: &UnmixOptions) -> Result<ImageUnmix> {
    opts.validate()?;
    check_grid(cube.bands(), cube.band_centers(), lib)?;
    let gram = gram_matrix(lib);
    let cols = cube.cols();
    let results = crate::par::map_indexed(cube.rows() * cols, |p| {
        let (r, c) = (p / cols, p % cols);
        let m = cube.pixel(r, c);
        PixelProblem::new(&m, lib, &gram, opts)
            .and_then(|problem| solve_pixel(&problem, opts))
            .map_err(|e| Error::Numerical(format!("pixel ({r}, {c}): {e}")))
    });
    let d = lib.d();
    let mut fractions = Vec::with_capacity(results.len() * d);
    let mut total_iterations = 0u64;
    let mut non_converged = 0;
    for res in results {
        let px = res?;
        fractions.extend_from_slice(&px.fractions);
        total_iterations += px.iterations as u64;
        non_converged += usize::from(!px.converged);
    }
    Ok(ImageUnmix {
        map: FractionMap::new(cube.rows(), cols, d, fractions)?,
        total_iterations,
        non_converged,
    })
}

/// Exhaustive search over the feasible grid `{k * step : k >= 0, sum <= 1}`.
///
/// Test oracle only: the grid has `O(step^-d)` points, so `d` is limited to
/// four. `1 / grid_step` must be an integer. The spectral angle is scale
/// invariant, so in that mode only the unit-sum face of the grid is
/// searched, matching the normalization of [`unmix_pixel`]. Ties keep the
/// lexicographically first point.
pub fn brute_force_unmix(
    m: &[f64],
    lib: &EndmemberLibrary,
    grid_step: f64,
    opts: &UnmixOptions,
) -> Result<Vec<f64>> {
    let d = lib.d();
    if d > 4 {
        return Err(Error::invalid("brute force", format!("d = {d} exceeds 4")));
    }
    let n = (1.0 / grid_step).round();
    if !(grid_step > 0.0) || n < 1.0 || (n * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("brute force", "1 / grid_step must be a positive integer"));
    }
    let n = n as usize;
    if m.len() != lib.bands() {
        return Err(Error::invalid("spectrum", "band count differs from library"));
    }
    let gram = gram_matrix(lib);
    let problem = PixelProblem::new(m, lib, &gram, opts)?;

    let mut counts = vec![0usize; d];
    let mut f = vec![0.0; d];
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        for (x, k) in f.iter_mut().zip(&counts) {
            *x = *k as f64 / n as f64;
        }
        let on_face = opts.objective == Objective::Euclidean || counts.iter().sum::<usize>() == n;
        if let Some(v) = on_face.then(|| problem.value(&f)).flatten() {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, f.clone()));
            }
        }
        // Odometer increment over {sum(counts) <= n}, last index fastest.
        let mut i = d;
        loop {
            if i == 0 {
                return best
                    .map(|(_, f)| f)
                    .ok_or_else(|| Error::Domain("every grid point is singular".into()));
            }
            i -= 1;
            let total: usize = counts.iter().sum();
            if total < n {
                counts[i] += 1;
                break;
            }
            counts[i] = 0;
        }
    }
}
