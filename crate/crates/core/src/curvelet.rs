//! Fast discrete curvelet transform via wrapping.
//!
//! The spectrum of the input is split by smooth Cartesian coronae (one per
//! scale) and, inside each corona, by smooth angular windows laid out on a
//! pseudo-polar angle that runs around the four sides of the frequency square.
//! Both partitions are squared partitions of unity, so the product windows
//! `W_j · V_{j,l}` satisfy `Σ |W_j V_{j,l}|² = 1` at every discrete frequency.
//! Each windowed wedge is wrapped (periodized) onto a rectangle small enough
//! to hold its support without collisions and brought back to space with a
//! unitary inverse FFT. Analysis is therefore an isometry and synthesis is its
//! adjoint: the transform is a tight frame with exact reconstruction.
//!
//! Scales are numbered from 1 (coarsest, no angular split) to `n_scales`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::fft2::{bin_frequency, fft2, Direction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveletError {
    #[error("image {rows}x{cols} too small for {n_scales} scales (need each side >= {min})")]
    ImageTooSmall {
        rows: usize,
        cols: usize,
        n_scales: usize,
        min: usize,
    },
    #[error("invalid curvelet configuration: {0}")]
    InvalidConfig(String),
    #[error("pyramid geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("scale {scale} out of range 1..={n_scales}")]
    ScaleOutOfRange { scale: usize, n_scales: usize },
    #[error("malformed coefficient file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveletConfig {
    pub n_scales: usize,
    /// Angles at the second coarsest scale.
    pub n_angles_coarse: usize,
    /// Directional wedges at the finest scale instead of a single isotropic band.
    pub finest_is_curvelets: bool,
}

impl Default for CurveletConfig {
    fn default() -> Self {
        Self {
            n_scales: 4,
            n_angles_coarse: 16,
            finest_is_curvelets: true,
        }
    }
}

impl CurveletConfig {
    pub fn validate(&self) -> Result<(), CurveletError> {
        if self.n_scales < 2 {
            return Err(CurveletError::InvalidConfig(format!(
                "n_scales must be >= 2, got {}",
                self.n_scales
            )));
        }
        if self.n_scales > 12 {
            return Err(CurveletError::InvalidConfig(format!(
                "n_scales must be <= 12, got {}",
                self.n_scales
            )));
        }
        if self.n_angles_coarse < 8 || !self.n_angles_coarse.is_multiple_of(4) {
            return Err(CurveletError::InvalidConfig(format!(
                "n_angles_coarse must be >= 8 and a multiple of 4, got {}",
                self.n_angles_coarse
            )));
        }
        Ok(())
    }

    /// Number of angular wedges at scale `j` (1-based). The count doubles every
    /// other scale going outward from the second coarsest.
    pub fn angles_at(&self, j: usize) -> usize {
        if j <= 1 {
            return 1;
        }
        if j == self.n_scales && !self.finest_is_curvelets {
            return 1;
        }
        self.n_angles_coarse << (j - 2).div_ceil(2)
    }

    /// Smallest image side accepted for this scale count.
    pub fn min_side(&self) -> usize {
        1 << (self.n_scales + 1)
    }
}

/// Smooth complementary pair on `[0, 1]`: `left` rises 0 → 1, `right` falls 1 → 0,
/// and `left² + right² = 1` everywhere.
pub(crate) fn window_pair(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0);
    }
    let right = (1.0 - 1.0 / (1.0 - (1.0 - 1.0 / x).exp())).exp();
    let left = (1.0 - 1.0 / (1.0 - (1.0 - 1.0 / (1.0 - x)).exp())).exp();
    let norm = (left * left + right * right).sqrt();
    (left / norm, right / norm)
}

/// One-dimensional lowpass profile: 1 on `[0, 1]`, smooth decay to 0 at 2.
fn lowpass_profile(t: f64) -> f64 {
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        window_pair(t - 1.0).1
    }
}

/// Pseudo-polar angle in `[0, 4)`: one unit per side of the frequency square,
/// linear in slope within a side, counter-clockwise from the direction (1, -1).
/// `x` is the horizontal and `y` the vertical normalized frequency.
pub(crate) fn pseudo_angle(x: f64, y: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let p = if x >= y.abs() {
        (y / x + 1.0) / 2.0
    } else if y >= x.abs() {
        1.0 + (1.0 - x / y) / 2.0
    } else if -x >= y.abs() {
        2.0 + (y / x + 1.0) / 2.0
    } else {
        3.0 + (1.0 - x / y) / 2.0
    };
    if p >= 4.0 {
        p - 4.0
    } else {
        p
    }
}

/// Direction (radians, counter-clockwise from the horizontal frequency axis)
/// of pseudo-angle `p`.
fn pseudo_angle_direction(p: f64) -> f64 {
    let side = (p.floor() as i64).rem_euclid(4);
    let f = p - p.floor();
    let s = 2.0 * f - 1.0;
    let (x, y) = match side {
        0 => (1.0, s),
        1 => (-s, 1.0),
        2 => (-1.0, -s),
        _ => (s, -1.0),
    };
    y.atan2(x)
}

/// Angular weight of wedge `l` out of `n` at pseudo-angle `p`.
fn angular_weight(p: f64, l: usize, n: usize) -> f64 {
    let w = 4.0 / n as f64;
    let center = (l as f64 + 0.5) * w;
    let mut d = (p - center).rem_euclid(4.0);
    if d >= 2.0 {
        d -= 4.0;
    }
    if d <= -w || d >= w {
        0.0
    } else if d <= 0.0 {
        window_pair((d + w) / w).0
    } else {
        window_pair(d / w).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SupportPoint {
    /// Row-major index into the full FFT-ordered frequency grid.
    grid: u32,
    /// Row-major index into the wedge's wrapped rectangle.
    wrapped: u32,
    weight: f64,
}

/// Frequency support of one coefficient array and the wrapping rule that maps
/// it onto a `rows × cols` rectangle.
#[derive(Debug, Clone)]
pub struct Wedge {
    pub scale: usize,
    pub angle: usize,
    pub rows: usize,
    pub cols: usize,
    /// Direction of the wedge's frequency axis in radians, `None` for isotropic bands.
    pub orientation: Option<f64>,
    support: Vec<SupportPoint>,
}

impl Wedge {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }
}

/// Window layout for one image size and configuration.
#[derive(Debug)]
pub struct CurveletGeometry {
    pub rows: usize,
    pub cols: usize,
    pub config: CurveletConfig,
    /// `wedges[j - 1][l]`.
    pub wedges: Vec<Vec<Wedge>>,
}

type GeometryKey = (usize, usize, CurveletConfig);

fn geometry_cache() -> &'static Mutex<HashMap<GeometryKey, Arc<CurveletGeometry>>> {
    static CACHE: OnceLock<Mutex<HashMap<GeometryKey, Arc<CurveletGeometry>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl CurveletGeometry {
    /// Shared geometry for the given size, built once per process.
    pub fn cached(
        rows: usize,
        cols: usize,
        config: CurveletConfig,
    ) -> Result<Arc<CurveletGeometry>, CurveletError> {
        let key = (rows, cols, config);
        if let Some(g) = geometry_cache().lock().unwrap().get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(Self::build(rows, cols, config)?);
        geometry_cache().lock().unwrap().insert(key, g.clone());
        Ok(g)
    }

    pub fn build(
        rows: usize,
        cols: usize,
        config: CurveletConfig,
    ) -> Result<CurveletGeometry, CurveletError> {
        config.validate()?;
        let min = config.min_side();
        if rows < min || cols < min {
            return Err(CurveletError::ImageTooSmall {
                rows,
                cols,
                n_scales: config.n_scales,
                min,
            });
        }
        let n_scales = config.n_scales;
        // Lowpass corner of the Cartesian corona below scale j + 1, as a
        // fraction of the Nyquist half-width.
        let corner = |j: usize| (1.0 / 3.0) * 0.5f64.powi((n_scales - 1 - j) as i32);
        let half_rows = rows as f64 / 2.0;
        let half_cols = cols as f64 / 2.0;

        // Per scale j (0-based here), for each grid point: radial weight.
        let lowpass = |j: usize, s1: f64, s2: f64| -> f64 {
            if j + 1 >= n_scales {
                return 1.0;
            }
            let a = corner(j + 1);
            lowpass_profile(s1 / a) * lowpass_profile(s2 / a)
        };

        let mut wedges: Vec<Vec<Wedge>> = Vec::with_capacity(n_scales);
        for j in 1..=n_scales {
            let n_angles = config.angles_at(j);
            let mut supports: Vec<Vec<(i64, i64, u32, f64)>> = vec![Vec::new(); n_angles];
            for r in 0..rows {
                let k1 = bin_frequency(r, rows);
                let y = k1 as f64 / half_rows;
                for c in 0..cols {
                    let k2 = bin_frequency(c, cols);
                    let x = k2 as f64 / half_cols;
                    let (s1, s2) = (y.abs(), x.abs());
                    let outer = lowpass(j - 1, s1, s2);
                    let inner = if j == 1 { 0.0 } else { lowpass(j - 2, s1, s2) };
                    let radial = (outer * outer - inner * inner).max(0.0).sqrt();
                    if radial <= 0.0 {
                        continue;
                    }
                    let grid = (r * cols + c) as u32;
                    if n_angles == 1 {
                        supports[0].push((k1, k2, grid, radial));
                        continue;
                    }
                    let p = pseudo_angle(x, y);
                    let w = 4.0 / n_angles as f64;
                    let l0 = ((p / w).floor() as usize).min(n_angles - 1);
                    let center = (l0 as f64 + 0.5) * w;
                    let l1 = if p >= center {
                        (l0 + 1) % n_angles
                    } else {
                        (l0 + n_angles - 1) % n_angles
                    };
                    for l in [l0, l1] {
                        let v = angular_weight(p, l, n_angles);
                        let weight = radial * v;
                        if weight > 0.0 {
                            supports[l].push((k1, k2, grid, weight));
                        }
                    }
                }
            }
            let scale_wedges = supports
                .into_iter()
                .enumerate()
                .map(|(l, pts)| {
                    let orientation = (n_angles > 1).then(|| {
                        let w = 4.0 / n_angles as f64;
                        pseudo_angle_direction((l as f64 + 0.5) * w)
                    });
                    wrap_wedge(j, l, orientation, pts)
                })
                .collect();
            wedges.push(scale_wedges);
        }
        Ok(CurveletGeometry {
            rows,
            cols,
            config,
            wedges,
        })
    }

    pub fn n_scales(&self) -> usize {
        self.wedges.len()
    }

    pub fn total_coefficients(&self) -> usize {
        self.wedges.iter().flatten().map(Wedge::len).sum()
    }
}

/// Chooses the smaller of the two collision-free wrapping rectangles for a
/// wedge: either every row of the support fits in `cols` consecutive columns
/// and the rows span at most `rows`, or the transposed statement.
fn wrap_wedge(
    scale: usize,
    angle: usize,
    orientation: Option<f64>,
    pts: Vec<(i64, i64, u32, f64)>,
) -> Wedge {
    if pts.is_empty() {
        return Wedge {
            scale,
            angle,
            rows: 1,
            cols: 1,
            orientation,
            support: Vec::new(),
        };
    }
    let span = |key: fn(&(i64, i64, u32, f64)) -> i64| {
        let (lo, hi) = pts
            .iter()
            .map(key)
            .fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi - lo + 1) as usize
    };
    let max_inner_span = |outer: fn(&(i64, i64, u32, f64)) -> i64,
                          inner: fn(&(i64, i64, u32, f64)) -> i64| {
        let mut ranges: HashMap<i64, (i64, i64)> = HashMap::new();
        for p in &pts {
            let e = ranges.entry(outer(p)).or_insert((i64::MAX, i64::MIN));
            let v = inner(p);
            e.0 = e.0.min(v);
            e.1 = e.1.max(v);
        }
        ranges
            .values()
            .map(|(lo, hi)| (hi - lo + 1) as usize)
            .max()
            .unwrap_or(1)
    };
    let row_of = |p: &(i64, i64, u32, f64)| p.0;
    let col_of = |p: &(i64, i64, u32, f64)| p.1;

    let vertical = (span(row_of), max_inner_span(row_of, col_of));
    let horizontal = (max_inner_span(col_of, row_of), span(col_of));
    let (rows, cols) = if horizontal.0 * horizontal.1 < vertical.0 * vertical.1 {
        horizontal
    } else {
        vertical
    };
    let support = pts
        .into_iter()
        .map(|(k1, k2, grid, weight)| {
            let r = k1.rem_euclid(rows as i64) as usize;
            let c = k2.rem_euclid(cols as i64) as usize;
            SupportPoint {
                grid,
                wrapped: (r * cols + c) as u32,
                weight,
            }
        })
        .collect();
    Wedge {
        scale,
        angle,
        rows,
        cols,
        orientation,
        support,
    }
}

/// Complex coefficients `c(j, l, k)` of one wedge, row-major over `k = (k1, k2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffArray {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CoeffArray {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn get(&self, k1: usize, k2: usize) -> Complex64 {
        self.data[k1 * self.cols + k2]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Curvelet coefficients of one image together with the geometry used to compute them.
#[derive(Debug, Clone)]
pub struct CurveletPyramid {
    pub geometry: Arc<CurveletGeometry>,
    /// `coeffs[j - 1][l]`.
    pub coeffs: Vec<Vec<CoeffArray>>,
}

impl CurveletPyramid {
    pub fn zeros(geometry: Arc<CurveletGeometry>) -> Self {
        let coeffs = geometry
            .wedges
            .iter()
            .map(|s| {
                s.iter()
                    .map(|w| CoeffArray::zeros(w.rows, w.cols))
                    .collect()
            })
            .collect();
        Self { geometry, coeffs }
    }

    pub fn n_scales(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient array at 1-based scale `j` and angle `l`.
    pub fn wedge(&self, j: usize, l: usize) -> &CoeffArray {
        &self.coeffs[j - 1][l]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().flatten().map(CoeffArray::energy).sum()
    }

    pub fn scale_energy(&self, j: usize) -> f64 {
        self.coeffs[j - 1].iter().map(CoeffArray::energy).sum()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &CurveletPyramid) -> Result<(), CurveletError> {
        self.check_same_layout(other)?;
        for (x, y) in self
            .coeffs
            .iter_mut()
            .flatten()
            .zip(other.coeffs.iter().flatten())
        {
            for (u, v) in x.data.iter_mut().zip(&y.data) {
                *u += v * a;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for c in self.coeffs.iter_mut().flatten() {
            for v in &mut c.data {
                *v *= a;
            }
        }
    }

    fn check_same_layout(&self, other: &CurveletPyramid) -> Result<(), CurveletError> {
        let same = self.coeffs.len() == other.coeffs.len()
            && self.coeffs.iter().zip(&other.coeffs).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.data.len() == y.data.len())
            });
        if same {
            Ok(())
        } else {
            Err(CurveletError::GeometryMismatch(
                "pyramids have different layouts".into(),
            ))
        }
    }

    /// Verifies that the coefficient arrays agree with the stored geometry.
    pub fn check_geometry(&self) -> Result<(), CurveletError> {
        let g = &self.geometry;
        if self.coeffs.len() != g.wedges.len() {
            return Err(CurveletError::GeometryMismatch(format!(
                "{} scales in coefficients, {} in geometry",
                self.coeffs.len(),
                g.wedges.len()
            )));
        }
        for (j, (cs, ws)) in self.coeffs.iter().zip(&g.wedges).enumerate() {
            if cs.len() != ws.len() {
                return Err(CurveletError::GeometryMismatch(format!(
                    "scale {}: {} angles in coefficients, {} in geometry",
                    j + 1,
                    cs.len(),
                    ws.len()
                )));
            }
            for (l, (c, w)) in cs.iter().zip(ws).enumerate() {
                if c.rows != w.rows || c.cols != w.cols || c.data.len() != w.len() {
                    return Err(CurveletError::GeometryMismatch(format!(
                        "scale {} angle {l}: array {}x{} (len {}) but wedge is {}x{}",
                        j + 1,
                        c.rows,
                        c.cols,
                        c.data.len(),
                        w.rows,
                        w.cols
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward transform of a real `rows × cols` row-major image.
pub fn fdct_forward(
    image: &[f64],
    rows: usize,
    cols: usize,
    cfg: &CurveletConfig,
) -> Result<CurveletPyramid, CurveletError> {
    if image.len() != rows * cols {
        return Err(CurveletError::GeometryMismatch(format!(
            "image buffer has {} values, expected {}",
            image.len(),
            rows * cols
        )));
    }
    let geometry = CurveletGeometry::cached(rows, cols, *cfg)?;
    Ok(forward_with(geometry, image))
}

pub fn forward_with(geometry: Arc<CurveletGeometry>, image: &[f64]) -> CurveletPyramid {
    let (rows, cols) = (geometry.rows, geometry.cols);
    let mut spectrum: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut spectrum, rows, cols, Direction::Forward);
    let norm = 1.0 / ((rows * cols) as f64).sqrt();
    spectrum.iter_mut().for_each(|v| *v *= norm);

    let coeffs = geometry
        .wedges
        .iter()
        .map(|scale| {
            scale
                .par_iter()
                .map(|w| analyze_wedge(w, &spectrum))
                .collect()
        })
        .collect();
    CurveletPyramid { geometry, coeffs }
}

fn analyze_wedge(w: &Wedge, spectrum: &[Complex64]) -> CoeffArray {
    let mut out = CoeffArray::zeros(w.rows, w.cols);
    for s in &w.support {
        out.data[s.wrapped as usize] = spectrum[s.grid as usize] * s.weight;
    }
    fft2(&mut out.data, w.rows, w.cols, Direction::Inverse);
    let norm = 1.0 / (w.len() as f64).sqrt();
    out.data.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Adjoint (= inverse) transform; returns the real part of the synthesized image.
pub fn fdct_inverse(pyr: &CurveletPyramid) -> Result<Vec<f64>, CurveletError> {
    synthesize(pyr, |_| true)
}

/// Image synthesized from scale `j` alone (all other scales zeroed).
pub fn reconstruct_scale(pyr: &CurveletPyramid, j: usize) -> Result<Vec<f64>, CurveletError> {
    let n_scales = pyr.n_scales();
    if j < 1 || j > n_scales {
        return Err(CurveletError::ScaleOutOfRange { scale: j, n_scales });
    }
    synthesize(pyr, |s| s == j)
}

fn synthesize(
    pyr: &CurveletPyramid,
    keep_scale: impl Fn(usize) -> bool,
) -> Result<Vec<f64>, CurveletError> {
    pyr.check_geometry()?;
    let g = &pyr.geometry;
    let (rows, cols) = (g.rows, g.cols);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); rows * cols];
    for (j, (ws, cs)) in g.wedges.iter().zip(&pyr.coeffs).enumerate() {
        if !keep_scale(j + 1) {
            continue;
        }
        let pieces: Vec<Vec<Complex64>> = ws
            .par_iter()
            .zip(cs.par_iter())
            .map(|(w, c)| {
                let mut buf = c.data.clone();
                fft2(&mut buf, w.rows, w.cols, Direction::Forward);
                let norm = 1.0 / (w.len() as f64).sqrt();
                buf.iter_mut().for_each(|v| *v *= norm);
                buf
            })
            .collect();
        // Fixed wedge order keeps the accumulation bitwise reproducible.
        for (w, buf) in ws.iter().zip(&pieces) {
            for s in &w.support {
                spectrum[s.grid as usize] += buf[s.wrapped as usize] * s.weight;
            }
        }
    }
    fft2(&mut spectrum, rows, cols, Direction::Inverse);
    let norm = 1.0 / ((rows * cols) as f64).sqrt();
    Ok(spectrum.iter().map(|v| v.re * norm).collect())
}

/// Log-magnitude display of all coefficients laid out in the frequency plane
/// (low frequencies at the centre, finer coronae outward). Each frequency
/// sample shows `ln(1 + |c|)` of the coefficient it wraps onto in the wedge
/// with the largest window weight there. Values are scaled to `[0, 1]`.
pub fn coefficient_mosaic(pyr: &CurveletPyramid) -> Vec<f64> {
    let g = &pyr.geometry;
    let (rows, cols) = (g.rows, g.cols);
    let mut best = vec![0.0f64; rows * cols];
    let mut value = vec![0.0f64; rows * cols];
    for (ws, cs) in g.wedges.iter().zip(&pyr.coeffs) {
        for (w, c) in ws.iter().zip(cs) {
            for s in &w.support {
                let g = s.grid as usize;
                if s.weight > best[g] {
                    best[g] = s.weight;
                    value[g] = c.data[s.wrapped as usize].norm().ln_1p();
                }
            }
        }
    }
    let max = value.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    // fftshift so that the zero frequency sits at the centre.
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let rr = (r + rows / 2) % rows;
        for c in 0..cols {
            let cc = (c + cols / 2) % cols;
            out[rr * cols + cc] = value[r * cols + c] * scale;
        }
    }
    out
}

const COEFF_MAGIC: &[u8; 4] = b"FDCT";
const COEFF_VERSION: u32 = 1;

/// Little-endian binary dump: magic, version, image rows/cols, scale count,
/// coarse angle count, finest flag, per-scale angle counts, per-wedge dims,
/// then interleaved re/im doubles in (scale, angle, row-major) order.
pub fn encode_coefficients(pyr: &CurveletPyramid) -> Vec<u8> {
    let g = &pyr.geometry;
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(COEFF_MAGIC);
    put(&mut out, COEFF_VERSION);
    put(&mut out, g.rows as u32);
    put(&mut out, g.cols as u32);
    put(&mut out, g.config.n_scales as u32);
    put(&mut out, g.config.n_angles_coarse as u32);
    put(&mut out, g.config.finest_is_curvelets as u32);
    for cs in &pyr.coeffs {
        put(&mut out, cs.len() as u32);
    }
    for c in pyr.coeffs.iter().flatten() {
        put(&mut out, c.rows as u32);
        put(&mut out, c.cols as u32);
    }
    for c in pyr.coeffs.iter().flatten() {
        for v in &c.data {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CurveletError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CurveletError::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CurveletError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, CurveletError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_coefficients(bytes: &[u8]) -> Result<CurveletPyramid, CurveletError> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != COEFF_MAGIC {
        return Err(CurveletError::Format("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != COEFF_VERSION as usize {
        return Err(CurveletError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let rows = rd.u32()?;
    let cols = rd.u32()?;
    let config = CurveletConfig {
        n_scales: rd.u32()?,
        n_angles_coarse: rd.u32()?,
        finest_is_curvelets: rd.u32()? != 0,
    };
    let geometry = CurveletGeometry::cached(rows, cols, config)?;
    let angle_counts = (0..config.n_scales)
        .map(|_| rd.u32())
        .collect::<Result<Vec<_>, _>>()?;
    let mut dims = Vec::with_capacity(angle_counts.len());
    for &n in &angle_counts {
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            s.push((rd.u32()?, rd.u32()?));
        }
        dims.push(s);
    }
    let mut coeffs = Vec::with_capacity(dims.len());
    for s in &dims {
        let mut arrays = Vec::with_capacity(s.len());
        for &(r, c) in s {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                let re = rd.f64()?;
                let im = rd.f64()?;
                data.push(Complex64::new(re, im));
            }
            arrays.push(CoeffArray {
                rows: r,
                cols: c,
                data,
            });
        }
        coeffs.push(arrays);
    }
    if rd.pos != bytes.len() {
        return Err(CurveletError::Format(format!(
            "{} trailing bytes",
            bytes.len() - rd.pos
        )));
    }
    let pyr = CurveletPyramid { geometry, coeffs };
    pyr.check_geometry()?;
    Ok(pyr)
}

/// Angular direction (radians) of a pseudo-angle wedge centre; exposed for display.
pub fn wedge_orientation(n_angles: usize, l: usize) -> f64 {
    let w = 4.0 / n_angles as f64;
    pseudo_angle_direction((l as f64 + 0.5) * w)
}
