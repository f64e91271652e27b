//! Ground-truth error metrics, trajectories, map accumulation and a synthetic
//! terrain scanner.

use indexmap::IndexMap;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_distance, Point3, PointCloud, RigidTransform};
use crate::range_image::ProjectionModel;

/// Rotation error above which a registration counts as failed (radians).
pub const FAILURE_THRESHOLD_RAD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no error samples")]
    EmptySamples,
    #[error("{scans} scans but {poses} poses")]
    LengthMismatch { scans: usize, poses: usize },
    #[error("sensor at ({x:.3}, {y:.3}, {z:.3}) is not above the terrain surface")]
    SensorBelowTerrain { x: f64, y: f64, z: f64 },
    #[error("invalid terrain: {0}")]
    InvalidTerrain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub pair_id: String,
    /// Meters.
    pub translation: f64,
    /// Radians.
    pub rotation: f64,
}

/// Euclidean translation error and geodesic rotation error between two transforms.
pub fn pair_error(estimated: &RigidTransform, truth: &RigidTransform) -> ErrorSample {
    ErrorSample {
        pair_id: String::new(),
        translation: (estimated.translation - truth.translation).norm(),
        rotation: rotation_distance(&estimated.rotation, &truth.rotation),
    }
}

/// Root mean square of the translation and rotation channels.
pub fn rmse(samples: &[ErrorSample]) -> Result<(f64, f64), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let n = samples.len() as f64;
    let t = samples
        .iter()
        .map(|s| s.translation * s.translation)
        .sum::<f64>()
        / n;
    let r = samples.iter().map(|s| s.rotation * s.rotation).sum::<f64>() / n;
    Ok((t.sqrt(), r.sqrt()))
}

/// Empirical CDF as `(threshold, proportion ≤ threshold)` steps at each
/// distinct sample value.
pub fn ecdf(samples: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == *v {
            continue;
        }
        out.push((*v, (i + 1) as f64 / n as f64));
    }
    Ok(out)
}

/// Fraction of samples strictly above `threshold`.
pub fn failure_rate(samples: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    Ok(samples.iter().filter(|s| **s > threshold).count() as f64 / samples.len() as f64)
}

/// Absolute poses from pairwise transforms, where transform `i` maps scan `i`
/// into the frame of scan `i - 1`. Returns one more pose than inputs, starting
/// at the identity.
pub fn integrate_trajectory(pairwise: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut poses = Vec::with_capacity(pairwise.len() + 1);
    poses.push(RigidTransform::identity());
    for t in pairwise {
        let next = poses[poses.len() - 1].compose(t);
        poses.push(next);
    }
    poses
}

/// Union of all scans in the global frame. With `voxel` set, points sharing a
/// cubic cell of that size are replaced by their centroid (cells in order of
/// first occupancy).
pub fn accumulate_map(
    scans: &[PointCloud],
    poses: &[RigidTransform],
    voxel: Option<f64>,
) -> Result<PointCloud, EvalError> {
    if scans.len() != poses.len() {
        return Err(EvalError::LengthMismatch {
            scans: scans.len(),
            poses: poses.len(),
        });
    }
    let points = scans
        .iter()
        .zip(poses)
        .flat_map(|(s, p)| s.points.iter().map(move |q| p.apply(q)));
    let Some(cell) = voxel.filter(|c| *c > 0.0) else {
        return Ok(PointCloud::new(points.collect()));
    };
    let mut cells: IndexMap<(i64, i64, i64), (Vector3<f64>, usize)> = IndexMap::new();
    for p in points {
        let key = (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    Ok(PointCloud::new(
        cells
            .into_values()
            .map(|(sum, n)| Point3::from(sum / n as f64))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Gaussian bump of the given peak height.
    Hill {
        center: (f64, f64),
        radius: f64,
        height: f64,
    },
    /// Bowl of the given depth with a raised rim.
    Crater {
        center: (f64, f64),
        radius: f64,
        depth: f64,
        rim: f64,
    },
    /// Solid sphere; ray-cast analytically rather than rasterized into the DEM.
    Rock {
        center: (f64, f64, f64),
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainSpec {
    /// Meters along x and y, centred on the origin.
    pub extent: (f64, f64),
    /// DEM cell size in meters.
    pub resolution: f64,
    pub base_height: f64,
    /// Peak amplitude of the value-noise heightfield in meters.
    pub roughness: f64,
    /// Wavelength of the coarsest noise octave in meters.
    pub noise_wavelength: f64,
    pub octaves: usize,
    pub primitives: Vec<Primitive>,
    /// Standard deviation of additive range noise in meters.
    pub noise_sigma: f64,
    /// Returns farther than this are discarded.
    pub max_range: f64,
    pub rng_seed: u64,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            extent: (60.0, 60.0),
            resolution: 0.1,
            base_height: 0.0,
            roughness: 0.0,
            noise_wavelength: 8.0,
            octaves: 3,
            primitives: Vec::new(),
            noise_sigma: 0.0,
            max_range: 200.0,
            rng_seed: 0,
        }
    }
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidTerrain(m.to_string()));
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return bad("extent must be positive");
        }
        if !(self.resolution > 0.0) {
            return bad("resolution must be positive");
        }
        if !(self.noise_wavelength > 0.0) {
            return bad("noise_wavelength must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_range > 0.0) {
            return bad("noise_sigma must be non-negative and max_range positive");
        }
        Ok(())
    }

    /// Mars-yard-like terrain of 120 m × 120 m, see [`TerrainSpec::random_sized`].
    pub fn random(seed: u64) -> Self {
        Self::random_sized(seed, 120.0)
    }

    /// Square terrain with rolling noise, hills, craters and scattered rocks,
    /// all drawn from `seed`. Primitive counts scale with the area.
    pub fn random_sized(seed: u64, side: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e11_a1ed);
        let (ex, ey) = (side, side);
        let per_area = |n: f64| ((n * side * side / 3600.0).round() as usize).max(1);
        let mut primitives = Vec::new();
        let xy = |rng: &mut ChaCha8Rng, margin: f64| {
            (
                rng.random_range(-ex / 2.0 + margin..ex / 2.0 - margin),
                rng.random_range(-ey / 2.0 + margin..ey / 2.0 - margin),
            )
        };
        for _ in 0..per_area(6.0) {
            primitives.push(Primitive::Hill {
                center: xy(&mut rng, 5.0),
                radius: rng.random_range(3.0..8.0),
                height: rng.random_range(0.5..2.5),
            });
        }
        for _ in 0..per_area(2.0) {
            primitives.push(Primitive::Crater {
                center: xy(&mut rng, 8.0),
                radius: rng.random_range(3.0..6.0),
                depth: rng.random_range(0.5..1.2),
                rim: rng.random_range(0.2..0.6),
            });
        }
        let mut spec = Self {
            extent: (ex, ey),
            roughness: 0.3,
            noise_wavelength: 6.0,
            octaves: 3,
            primitives,
            noise_sigma: 0.02,
            rng_seed: seed,
            ..Self::default()
        };
        // Rocks sit partly buried in the surface they land on.
        let dem = Terrain::heightfield_only(&spec);
        for _ in 0..per_area(375.0) {
            let (x, y) = xy(&mut rng, 1.0);
            let radius = rng.random_range(0.2..0.9);
            let z = dem.height(x, y).unwrap_or(0.0) + radius * rng.random_range(0.0..0.6);
            spec.primitives.push(Primitive::Rock {
                center: (x, y, z),
                radius,
            });
        }
        spec
    }
}

/// Rasterized DEM plus the rock spheres of a [`TerrainSpec`].
#[derive(Debug, Clone)]
pub struct Terrain {
    spec: TerrainSpec,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
    max_height: f64,
    /// Upper bound on the DEM's horizontal gradient magnitude.
    max_slope: f64,
    rocks: Vec<(Point3, f64)>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Terrain {
    pub fn new(spec: &TerrainSpec) -> Result<Self, EvalError> {
        spec.validate()?;
        Ok(Self::heightfield_only(spec))
    }

    fn heightfield_only(spec: &TerrainSpec) -> Self {
        let nx = (spec.extent.0 / spec.resolution).ceil() as usize + 1;
        let ny = (spec.extent.1 / spec.resolution).ceil() as usize + 1;
        let x0 = -spec.extent.0 / 2.0;
        let y0 = -spec.extent.1 / 2.0;

        // One random lattice per octave.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let mut octaves = Vec::new();
        let mut wavelength = spec.noise_wavelength;
        let mut amplitude = 1.0;
        let mut total_amp = 0.0;
        for _ in 0..spec.octaves {
            let lx = (spec.extent.0 / wavelength).ceil() as usize + 2;
            let ly = (spec.extent.1 / wavelength).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..lx * ly).map(|_| rng.random_range(-1.0..1.0)).collect();
            octaves.push((wavelength, amplitude, lx, lattice));
            total_amp += amplitude;
            wavelength /= 2.0;
            amplitude /= 2.0;
        }
        let noise = |x: f64, y: f64| -> f64 {
            let mut h = 0.0;
            for (wl, amp, lx, lat) in &octaves {
                let fx = (x - x0) / wl;
                let fy = (y - y0) / wl;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
                let at = |i: usize, j: usize| lat[j * lx + i];
                let a = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let b = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                h += amp * (a * (1.0 - ty) + b * ty);
            }
            h / total_amp
        };

        let mut heights = vec![0.0; nx * ny];
        let mut rocks = Vec::new();
        for p in &spec.primitives {
            if let Primitive::Rock { center, radius } = p {
                rocks.push((Point3::new(center.0, center.1, center.2), *radius));
            }
        }
        let surface: Vec<&Primitive> = spec
            .primitives
            .iter()
            .filter(|p| !matches!(p, Primitive::Rock { .. }))
            .collect();
        heights.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            let y = y0 + j as f64 * spec.resolution;
            for (i, h) in row.iter_mut().enumerate() {
                let x = x0 + i as f64 * spec.resolution;
                let mut z = spec.base_height;
                if spec.roughness != 0.0 {
                    z += spec.roughness * noise(x, y);
                }
                for p in &surface {
                    match **p {
                        Primitive::Hill {
                            center,
                            radius,
                            height,
                        } => {
                            let d2 = (x - center.0).powi(2) + (y - center.1).powi(2);
                            z += height * (-d2 / (radius * radius)).exp();
                        }
                        Primitive::Crater {
                            center,
                            radius,
                            depth,
                            rim,
                        } => {
                            let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                            if d < radius {
                                z -= depth * (1.0 - (d / radius).powi(2));
                            }
                            z += rim * (-((d - radius) / (0.3 * radius)).powi(2)).exp();
                        }
                        Primitive::Rock { .. } => {}
                    }
                }
                *h = z;
            }
        });
        let max_height = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut max_diff: f64 = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                let h = heights[j * nx + i];
                if i + 1 < nx {
                    max_diff = max_diff.max((heights[j * nx + i + 1] - h).abs());
                }
                if j + 1 < ny {
                    max_diff = max_diff.max((heights[(j + 1) * nx + i] - h).abs());
                }
            }
        }
        let max_slope = std::f64::consts::SQRT_2 * max_diff / spec.resolution;
        Self {
            spec: spec.clone(),
            nx,
            ny,
            heights,
            max_height,
            max_slope,
            rocks,
        }
    }

    /// Bilinearly interpolated DEM height, `None` outside the extent.
    pub fn height(&self, x: f64, y: f64) -> Option<f64> {
        let fx = (x + self.spec.extent.0 / 2.0) / self.spec.resolution;
        let fy = (y + self.spec.extent.1 / 2.0) / self.spec.resolution;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        if ix + 1 >= self.nx || iy + 1 >= self.ny {
            // The far edge itself is still inside.
            if ix + 1 == self.nx && fx == ix as f64 || iy + 1 == self.ny && fy == iy as f64 {
                let (ix, iy) = (ix.min(self.nx - 1), iy.min(self.ny - 1));
                return Some(self.heights[iy * self.nx + ix]);
            }
            return None;
        }
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let at = |i: usize, j: usize| self.heights[j * self.nx + i];
        let a = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
        let b = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
        Some(a + (b - a) * ty)
    }

    /// Surface height including rocks; `None` outside the extent.
    pub fn surface_height(&self, x: f64, y: f64) -> Option<f64> {
        let mut h = self.height(x, y)?;
        for (c, r) in &self.rocks {
            let d2 = (x - c.x).powi(2) + (y - c.y).powi(2);
            if d2 < r * r {
                h = h.max(c.z + (r * r - d2).sqrt());
            }
        }
        Some(h)
    }

    pub fn spec(&self) -> &TerrainSpec {
        &self.spec
    }

    /// Distance along the unit ray `dir` from `origin` to the first surface hit.
    pub fn cast(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        self.cast_among(origin, dir, 0..self.rocks.len())
    }

    /// Like [`Terrain::cast`], testing only the listed rocks.
    fn cast_among(
        &self,
        origin: &Point3,
        dir: &Vector3<f64>,
        rocks: impl IntoIterator<Item = usize>,
    ) -> Option<f64> {
        let max_t = self.spec.max_range;
        let mut best = self.cast_dem(origin, dir, max_t);
        for k in rocks {
            let (c, r) = &self.rocks[k];
            if let Some(t) = ray_sphere(origin, dir, c, *r) {
                if t <= max_t && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }

    fn cast_dem(&self, o: &Point3, d: &Vector3<f64>, max_t: f64) -> Option<f64> {
        let above = |t: f64| -> Option<f64> {
            let p = o + d * t;
            self.height(p.x, p.y).map(|h| p.z - h)
        };
        // Skip straight to where the ray first dips below the highest cell.
        let mut t = 0.0;
        if o.z > self.max_height {
            if d.z >= 0.0 {
                return None;
            }
            t = (o.z - self.max_height) / -d.z;
        }
        // Far above the surface the slope bound gives a step that cannot cross
        // it; close to it, march in half-cell steps (growing slowly with
        // distance) and bisect once the sign flips.
        let base_step = 0.5 * self.spec.resolution;
        let horiz = d.x.hypot(d.y);
        let closing = self.max_slope * horiz - d.z;
        let mut prev: Option<(f64, f64)> = None;
        while t <= max_t {
            match above(t) {
                Some(g) => {
                    if g <= 0.0 {
                        let (mut lo, mut hi) = match prev {
                            Some((pt, _)) => (pt, t),
                            None => return if g == 0.0 { Some(t) } else { None },
                        };
                        for _ in 0..200 {
                            let mid = 0.5 * (lo + hi);
                            if mid <= lo || mid >= hi {
                                break;
                            }
                            match above(mid) {
                                Some(gm) if gm > 0.0 => lo = mid,
                                _ => hi = mid,
                            }
                        }
                        return Some(hi);
                    }
                    prev = Some((t, g));
                }
                None => {
                    // Left the DEM; a ray leaving horizontally cannot come back.
                    if prev.is_some() {
                        return None;
                    }
                }
            }
            if d.z >= 0.0 && o.z + d.z * t > self.max_height {
                return None;
            }
            let fine = base_step.max(1e-3 * t);
            let safe = match prev {
                Some((_, g)) if closing > 0.0 => g / closing,
                _ => 0.0,
            };
            t += fine.max(safe);
        }
        None
    }
}

/// Nearest positive intersection of a unit ray with a sphere.
pub fn ray_sphere(o: &Point3, d: &Vector3<f64>, c: &Point3, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    if cc <= 0.0 {
        return Some(-b + s);
    }
    if b >= 0.0 {
        return None;
    }
    // Roots multiply to `cc`; dividing avoids cancellation in `-b - s`.
    Some(cc / (-b + s))
}

fn mix_seed(seed: u64, pose: &RigidTransform) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    let words = pose
        .rotation_row_major()
        .into_iter()
        .chain(pose.translation.iter().copied());
    for w in words {
        h ^= w.to_bits();
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31);
    }
    h
}

/// Scans `terrain` from `sensor_pose` (sensor frame to world) with one ray per
/// pixel centre of `model`. Points are in the sensor frame, ordered row-major
/// by pixel. Range noise is drawn per point in that order from a stream seeded
/// by `TerrainSpec::rng_seed` and the pose, so different poses get independent noise.
pub fn scan_terrain(
    terrain: &Terrain,
    sensor_pose: &RigidTransform,
    model: &ProjectionModel,
) -> Result<PointCloud, EvalError> {
    model
        .validate()
        .map_err(|e| EvalError::InvalidTerrain(e.to_string()))?;
    let origin = Point3::from(sensor_pose.translation);
    let below = match terrain.surface_height(origin.x, origin.y) {
        Some(h) => origin.z <= h,
        None => false,
    } || terrain.rocks.iter().any(|(c, r)| (origin - c).norm() <= *r);
    if below {
        return Err(EvalError::SensorBelowTerrain {
            x: origin.x,
            y: origin.y,
            z: origin.z,
        });
    }
    let (w, h) = (model.width(), model.height());
    let bins = rock_bins(terrain, sensor_pose, model);
    let hits: Vec<Option<(Vector3<f64>, f64)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let local = model.pixel_ray(i % w, i / w);
            let world = sensor_pose.rotation * local;
            let rocks = bins[i].iter().map(|k| *k as usize);
            terrain
                .cast_among(&origin, &world, rocks)
                .map(|t| (local, t))
        })
        .collect();
    let sigma = terrain.spec.noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(terrain.spec.rng_seed, sensor_pose));
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let points = hits
        .into_iter()
        .flatten()
        .map(|(dir, t)| {
            let r = if sigma > 0.0 {
                t + normal.sample(&mut rng)
            } else {
                t
            };
            Point3::from(dir * r)
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// For every pixel, the rocks whose angular footprint seen from the sensor
/// may cover its ray. Footprints are padded generously; the exact test
/// happens per ray.
fn rock_bins(
    terrain: &Terrain,
    sensor_pose: &RigidTransform,
    model: &ProjectionModel,
) -> Vec<Vec<u32>> {
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    let (w, h) = (model.width(), model.height());
    let mut bins = vec![Vec::new(); w * h];
    let full_circle = (model.azimuth_span.1 - model.azimuth_span.0 - TAU).abs() < 1e-9;
    let pad = 2.0 * model.azimuth_resolution.max(model.elevation_resolution);
    let inv = sensor_pose.inverse();
    for (k, (c, r)) in terrain.rocks.iter().enumerate() {
        let local = inv.apply(c).coords;
        let dist = local.norm();
        if dist - r > terrain.spec.max_range {
            continue;
        }
        let alpha = if dist > *r { (r / dist).asin() } else { PI } + pad;
        let az = local.y.atan2(local.x);
        let el = (local.z / dist).asin();
        let (el_lo, el_hi) = (el - alpha, el + alpha);
        let (e0, e1) = model.elevation_span;
        if el_hi < e0 || el_lo > e1 {
            continue;
        }
        let v_lo =
            (((e1 - el_hi.min(e1)) / model.elevation_resolution).floor() as usize).min(h - 1);
        let v_hi =
            (((e1 - el_lo.max(e0)) / model.elevation_resolution).floor() as usize).min(h - 1);
        let widest = el_lo.abs().max(el_hi.abs());
        let half = if widest >= FRAC_PI_2 - 1e-9 {
            PI
        } else {
            (1.5 * alpha / widest.cos()).min(PI)
        };
        let cols: Vec<usize> = if half >= PI {
            (0..w).collect()
        } else {
            let (a0, res) = (model.azimuth_span.0, model.azimuth_resolution);
            let lo = ((az - half - a0) / res).floor() as i64;
            let hi = ((az + half - a0) / res).floor() as i64;
            (lo..=hi)
                .filter_map(|u| {
                    if full_circle {
                        Some(u.rem_euclid(w as i64) as usize)
                    } else {
                        // Azimuth may sit a full turn away from the span start.
                        [
                            u,
                            u + (TAU / res).round() as i64,
                            u - (TAU / res).round() as i64,
                        ]
                        .into_iter()
                        .find(|x| (0..w as i64).contains(x))
                        .map(|x| x as usize)
                    }
                })
                .collect()
        };
        for v in v_lo..=v_hi {
            for &u in &cols {
                let bin = &mut bins[v * w + u];
                if bin.last() != Some(&(k as u32)) {
                    bin.push(k as u32);
                }
            }
        }
    }
    bins
}

/// Builds the terrain of `spec` and scans it once.
pub fn synth_scan(
    spec: &TerrainSpec,
    sensor_pose: &RigidTransform,
    model: &ProjectionModel,
) -> Result<PointCloud, EvalError> {
    scan_terrain(&Terrain::new(spec)?, sensor_pose, model)
}

/// Ground-truth data→model transform for scans taken at two sensor poses.
pub fn relative_truth(model_pose: &RigidTransform, data_pose: &RigidTransform) -> RigidTransform {
    model_pose.inverse().compose(data_pose)
}

/// Sensor pose `height` above the surface at `(x, y)` with the given yaw.
pub fn pose_above(terrain: &Terrain, x: f64, y: f64, height: f64, yaw: f64) -> RigidTransform {
    let z = terrain
        .surface_height(x, y)
        .unwrap_or(terrain.spec.base_height)
        + height;
    RigidTransform::from_euler(0.0, 0.0, yaw, Vector3::new(x, y, z))
}

/// Random sensor poses `height` above the surface, starting near the terrain
/// centre, where consecutive poses differ by at most `max_translation` meters
/// and `max_rotation` radians of yaw.
pub fn random_trajectory(
    terrain: &Terrain,
    n: usize,
    max_translation: f64,
    max_rotation: f64,
    height: f64,
    seed: u64,
) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = 0.25 * terrain.spec.extent.0.min(terrain.spec.extent.1);
    let mut x = rng.random_range(-0.2 * reach..0.2 * reach);
    let mut y = rng.random_range(-0.2 * reach..0.2 * reach);
    let mut yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut poses = vec![pose_above(terrain, x, y, height, yaw)];
    while poses.len() < n {
        let prev = poses[poses.len() - 1];
        // Head back towards the centre when drifting out.
        let heading = if x.hypot(y) > reach {
            (-y).atan2(-x) + rng.random_range(-0.5..0.5)
        } else {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        };
        let mut dist = rng.random_range(0.5..1.0) * max_translation;
        let dyaw = rng.random_range(-max_rotation..max_rotation);
        let next = loop {
            let cand = pose_above(
                terrain,
                x + dist * heading.cos(),
                y + dist * heading.sin(),
                height,
                yaw + dyaw,
            );
            if (cand.translation - prev.translation).norm() <= max_translation {
                break cand;
            }
            dist *= 0.9;
        };
        x = next.translation.x;
        y = next.translation.y;
        yaw += dyaw;
        poses.push(next);
    }
    poses
}
