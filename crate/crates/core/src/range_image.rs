//! Spherical range images: projection, hole filling, smoothing and back-projection.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangeImageError {
    #[error("no point falls inside the projection's angular spans and range limits")]
    EmptyProjection,
    #[error("range image is constant; normalization undefined")]
    ConstantImage,
    #[error("no valid range measurement at or next to pixel ({u}, {v})")]
    NoValidRange { u: usize, v: usize },
    #[error("invalid projection model: {0}")]
    InvalidModel(String),
}

/// Angular layout of a range image. Columns follow azimuth (increasing to the
/// right), rows follow elevation (row 0 is the highest elevation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionModel {
    /// Radians, `[start, end)`.
    pub azimuth_span: (f64, f64),
    /// Radians, `[start, end]`.
    pub elevation_span: (f64, f64),
    pub azimuth_resolution: f64,
    pub elevation_resolution: f64,
}

impl Default for ProjectionModel {
    fn default() -> Self {
        Self::from_degrees((-180.0, 180.0), (-90.0, 90.0), 0.5, 0.5)
    }
}

impl ProjectionModel {
    pub fn from_degrees(
        azimuth_span: (f64, f64),
        elevation_span: (f64, f64),
        azimuth_resolution: f64,
        elevation_resolution: f64,
    ) -> Self {
        Self {
            azimuth_span: (azimuth_span.0.to_radians(), azimuth_span.1.to_radians()),
            elevation_span: (elevation_span.0.to_radians(), elevation_span.1.to_radians()),
            azimuth_resolution: azimuth_resolution.to_radians(),
            elevation_resolution: elevation_resolution.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<(), RangeImageError> {
        let bad = |m: &str| Err(RangeImageError::InvalidModel(m.to_string()));
        if !(self.azimuth_resolution > 0.0 && self.elevation_resolution > 0.0) {
            return bad("resolutions must be positive");
        }
        let (a0, a1) = self.azimuth_span;
        let (e0, e1) = self.elevation_span;
        if !(a1 > a0) || a1 - a0 > TAU + 1e-9 {
            return bad("azimuth span must be non-empty and at most 2π");
        }
        if !(e1 > e0) || e0 < -PI / 2.0 - 1e-9 || e1 > PI / 2.0 + 1e-9 {
            return bad("elevation span must be non-empty and within [-π/2, π/2]");
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        ((self.azimuth_span.1 - self.azimuth_span.0) / self.azimuth_resolution - 1e-9).ceil()
            as usize
    }

    pub fn height(&self) -> usize {
        ((self.elevation_span.1 - self.elevation_span.0) / self.elevation_resolution - 1e-9).ceil()
            as usize
    }

    fn full_circle(&self) -> bool {
        (self.azimuth_span.1 - self.azimuth_span.0 - TAU).abs() < 1e-9
    }

    /// Pixel hit by the ray with the given angles, if inside the spans.
    pub fn pixel_of(&self, azimuth: f64, elevation: f64) -> Option<(usize, usize)> {
        let (a0, a1) = self.azimuth_span;
        let (e0, e1) = self.elevation_span;
        let da = if self.full_circle() {
            (azimuth - a0).rem_euclid(TAU)
        } else if azimuth >= a0 && azimuth < a1 {
            azimuth - a0
        } else {
            return None;
        };
        if !(e0..=e1).contains(&elevation) {
            return None;
        }
        let u = ((da / self.azimuth_resolution).floor() as usize).min(self.width() - 1);
        let v = (((e1 - elevation) / self.elevation_resolution).floor() as usize)
            .min(self.height() - 1);
        Some((u, v))
    }

    /// Azimuth and elevation of the centre of pixel `(u, v)`.
    pub fn pixel_center(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.azimuth_span.0 + (u as f64 + 0.5) * self.azimuth_resolution,
            self.elevation_span.1 - (v as f64 + 0.5) * self.elevation_resolution,
        )
    }

    /// Unit direction of the ray through the centre of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> nalgebra::Vector3<f64> {
        let (az, el) = self.pixel_center(u, v);
        direction(az, el)
    }
}

pub fn direction(azimuth: f64, elevation: f64) -> nalgebra::Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    nalgebra::Vector3::new(ce * ca, ce * sa, se)
}

/// Accepted sensor ranges in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangeLimits {
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for RangeLimits {
    fn default() -> Self {
        Self {
            min_range: 0.5,
            max_range: 200.0,
        }
    }
}

/// Range image of one scan. All grids are row-major, `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub width: usize,
    pub height: usize,
    pub model: ProjectionModel,
    pub limits: RangeLimits,
    /// Meters; NaN where there is no return.
    pub raw_range: Vec<f64>,
    pub valid_mask: Vec<bool>,
    /// Valid pixels plus enclosed holes that were filled.
    pub filled_mask: Vec<bool>,
    /// Meters; equals `raw_range` on valid pixels, 0 on border-connected background.
    pub filled_range: Vec<f64>,
    /// Smoothed and normalized to `[0, 1]`; empty until [`smooth_and_normalize`] runs.
    pub normalized: Vec<f64>,
    /// Smoothed range values (meters) mapped to 0 and 1 by normalization.
    pub normalization: Option<(f64, f64)>,
}

impl RangeImage {
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid_mask[self.index(u, v)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }
}

/// Spherical projection; each pixel keeps the nearest return that lands in it.
pub fn project(
    cloud: &PointCloud,
    model: &ProjectionModel,
    limits: &RangeLimits,
) -> Result<RangeImage, RangeImageError> {
    model.validate()?;
    let (width, height) = (model.width(), model.height());
    let mut raw_range = vec![f64::NAN; width * height];
    for p in &cloud.points {
        let r = p.coords.norm();
        if !r.is_finite() || r < limits.min_range || r > limits.max_range {
            continue;
        }
        let az = p.y.atan2(p.x);
        let el = p.z.atan2((p.x * p.x + p.y * p.y).sqrt());
        if let Some((u, v)) = model.pixel_of(az, el) {
            let cell = &mut raw_range[v * width + u];
            if cell.is_nan() || r < *cell {
                *cell = r;
            }
        }
    }
    let valid_mask: Vec<bool> = raw_range.iter().map(|r| r.is_finite()).collect();
    if !valid_mask.iter().any(|v| *v) {
        return Err(RangeImageError::EmptyProjection);
    }
    let filled_range = raw_range
        .iter()
        .map(|r| if r.is_finite() { *r } else { 0.0 })
        .collect();
    Ok(RangeImage {
        width,
        height,
        model: *model,
        limits: *limits,
        raw_range,
        filled_mask: valid_mask.clone(),
        valid_mask,
        filled_range,
        normalized: Vec::new(),
        normalization: None,
    })
}

/// Fills invalid regions that are enclosed by valid pixels. Invalid regions
/// 4-connected to the image border are background and stay untouched.
///
/// Holes are grown inward from their rim: each pass assigns every hole pixel
/// that has known 4-neighbours the mean of those neighbours.
pub fn fill_holes(img: &RangeImage) -> RangeImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    let mut background = vec![false; w * h];
    let mut queue = VecDeque::new();
    for v in 0..h {
        for u in 0..w {
            if (u == 0 || v == 0 || u + 1 == w || v + 1 == h) && !img.valid_mask[v * w + u] {
                background[v * w + u] = true;
                queue.push_back((u, v));
            }
        }
    }
    while let Some((u, v)) = queue.pop_front() {
        for (nu, nv) in neighbours4(u, v, w, h) {
            let i = nv * w + nu;
            if !img.valid_mask[i] && !background[i] {
                background[i] = true;
                queue.push_back((nu, nv));
            }
        }
    }

    let mut known: Vec<bool> = img.valid_mask.clone();
    let mut pending: Vec<usize> = (0..w * h)
        .filter(|&i| !img.valid_mask[i] && !background[i])
        .collect();
    while !pending.is_empty() {
        let mut updates = Vec::new();
        for &i in &pending {
            let (u, v) = (i % w, i / w);
            let (mut sum, mut n) = (0.0, 0usize);
            for (nu, nv) in neighbours4(u, v, w, h) {
                let j = nv * w + nu;
                if known[j] {
                    sum += out.filled_range[j];
                    n += 1;
                }
            }
            if n > 0 {
                updates.push((i, sum / n as f64));
            }
        }
        // Every enclosed hole touches valid pixels, so each pass makes progress.
        debug_assert!(!updates.is_empty());
        if updates.is_empty() {
            break;
        }
        for &(i, val) in &updates {
            out.filled_range[i] = val;
            out.filled_mask[i] = true;
            known[i] = true;
        }
        pending.retain(|&i| !known[i]);
    }
    out
}

fn neighbours4(u: usize, v: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (u.wrapping_sub(1), v),
        (u + 1, v),
        (u, v.wrapping_sub(1)),
        (u, v + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < w && b < h)
}

/// Separable 3×3 Gaussian (σ = 0.5) normalized to unit sum.
pub fn gaussian_kernel_3() -> [f64; 3] {
    let side = (-1.0f64 / (2.0 * 0.25)).exp();
    let total = 1.0 + 2.0 * side;
    [side / total, 1.0 / total, side / total]
}

/// 3×3 Gaussian smoothing with edge replication.
pub fn gaussian_smooth(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_kernel_3();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = 0.0;
            for (o, kv) in k.iter().enumerate() {
                let uu = clamp(u as isize + o as isize - 1, width);
                acc += kv * data[v * width + uu];
            }
            tmp[v * width + u] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = 0.0;
            for (o, kv) in k.iter().enumerate() {
                let vv = clamp(v as isize + o as isize - 1, height);
                acc += kv * tmp[vv * width + u];
            }
            out[v * width + u] = acc;
        }
    }
    out
}

/// Smooths `filled_range` and maps it affinely onto `[0, 1]` using the extremes
/// over valid and filled pixels. Background pixels are clamped into range.
pub fn smooth_and_normalize(img: &RangeImage) -> Result<RangeImage, RangeImageError> {
    let smoothed = gaussian_smooth(&img.filled_range, img.width, img.height);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, known) in smoothed.iter().zip(&img.filled_mask) {
        if *known {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !(hi > lo) {
        return Err(RangeImageError::ConstantImage);
    }
    let span = hi - lo;
    let normalized = smoothed
        .iter()
        .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    Ok(RangeImage {
        normalized,
        normalization: Some((lo, hi)),
        ..img.clone()
    })
}

/// 3D point of pixel `(u, v)` from its raw range. When the pixel itself has no
/// return, the nearest raw measurement in its 8-neighbourhood is used
/// (edge neighbours before corners, in a fixed order).
pub fn back_project(img: &RangeImage, u: usize, v: usize) -> Result<Point3, RangeImageError> {
    if u >= img.width || v >= img.height {
        return Err(RangeImageError::NoValidRange { u, v });
    }
    const ORDER: [(isize, isize); 9] = [
        (0, 0),
        (-1, 0),
        (1, 0),
        (0, -1),
        (0, 1),
        (-1, -1),
        (1, -1),
        (-1, 1),
        (1, 1),
    ];
    for (du, dv) in ORDER {
        let (uu, vv) = (u as isize + du, v as isize + dv);
        if uu < 0 || vv < 0 || uu >= img.width as isize || vv >= img.height as isize {
            continue;
        }
        let (uu, vv) = (uu as usize, vv as usize);
        let i = vv * img.width + uu;
        if img.valid_mask[i] {
            let r = img.raw_range[i];
            return Ok(Point3::from(img.model.pixel_ray(uu, vv) * r));
        }
    }
    Err(RangeImageError::NoValidRange { u, v })
}

/// Projection, hole filling, smoothing and normalization in one call.
pub fn build_range_image(
    cloud: &PointCloud,
    model: &ProjectionModel,
    limits: &RangeLimits,
) -> Result<RangeImage, RangeImageError> {
    let projected = project(cloud, model, limits)?;
    smooth_and_normalize(&fill_holes(&projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn image_from(width: usize, height: usize, values: &[f64]) -> RangeImage {
        let model = ProjectionModel::from_degrees(
            (-(width as f64) / 2.0, width as f64 / 2.0),
            (-(height as f64) / 2.0, height as f64 / 2.0),
            1.0,
            1.0,
        );
        let raw: Vec<f64> = values.to_vec();
        let valid: Vec<bool> = raw.iter().map(|r| r.is_finite()).collect();
        RangeImage {
            width,
            height,
            model,
            limits: RangeLimits::default(),
            filled_range: raw
                .iter()
                .map(|r| if r.is_finite() { *r } else { 0.0 })
                .collect(),
            raw_range: raw,
            filled_mask: valid.clone(),
            valid_mask: valid,
            normalized: Vec::new(),
            normalization: None,
        }
    }

    #[test]
    fn default_model_dimensions() {
        let m = ProjectionModel::default();
        assert_eq!((m.width(), m.height()), (720, 360));
    }

    #[test]
    fn single_point_lands_at_centre() {
        let cloud = PointCloud::new(vec![Point3::new(10.0, 0.0, 0.0)]);
        let img = project(&cloud, &ProjectionModel::default(), &RangeLimits::default()).unwrap();
        assert_eq!(img.valid_count(), 1);
        assert!(img.is_valid(360, 180));
        assert_eq!(img.raw_range[img.index(360, 180)], 10.0);

        let p = back_project(&img, 360, 180).unwrap();
        let res = 0.5f64.to_radians();
        assert!((p.x - 10.0).abs() <= 10.0 * res);
        assert!(p.y.abs() <= 10.0 * res && p.z.abs() <= 10.0 * res);
    }

    #[test]
    fn nearest_return_wins() {
        let cloud = PointCloud::new(vec![Point3::new(7.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)]);
        let img = project(&cloud, &ProjectionModel::default(), &RangeLimits::default()).unwrap();
        assert_eq!(img.raw_range[img.index(360, 180)], 5.0);
    }

    #[test]
    fn full_sphere_grid_has_no_holes() {
        let model = ProjectionModel::default();
        let mut pts = Vec::new();
        for v in 0..model.height() {
            for u in 0..model.width() {
                pts.push(Point3::from(model.pixel_ray(u, v) * 20.0));
            }
        }
        let img = project(&PointCloud::new(pts), &model, &RangeLimits::default()).unwrap();
        assert!(img.valid_mask.iter().all(|v| *v));
    }

    #[test]
    fn out_of_span_cloud_is_empty_projection() {
        let model = ProjectionModel::from_degrees((-10.0, 10.0), (-10.0, 10.0), 0.5, 0.5);
        let cloud = PointCloud::new(vec![Point3::new(-10.0, 0.0, 0.0)]);
        assert_eq!(
            project(&cloud, &model, &RangeLimits::default()),
            Err(RangeImageError::EmptyProjection)
        );
        let too_close = PointCloud::new(vec![Point3::new(0.1, 0.0, 0.0)]);
        assert_eq!(
            project(&too_close, &model, &RangeLimits::default()),
            Err(RangeImageError::EmptyProjection)
        );
    }

    #[test]
    fn fill_leaves_full_image_alone() {
        let img = image_from(4, 3, &[1.0; 12]);
        assert_eq!(fill_holes(&img), img);
    }

    #[test]
    fn enclosed_hole_is_filled_with_ring_value() {
        let (w, h) = (7, 7);
        let mut vals = vec![5.0; w * h];
        for v in 2..5 {
            for u in 2..5 {
                vals[v * w + u] = f64::NAN;
            }
        }
        let filled = fill_holes(&image_from(w, h, &vals));
        for v in 2..5 {
            for u in 2..5 {
                assert!(filled.filled_mask[v * w + u]);
                assert_eq!(filled.filled_range[v * w + u], 5.0);
                assert!(!filled.valid_mask[v * w + u]);
            }
        }
    }

    #[test]
    fn border_connected_region_stays_invalid() {
        let (w, h) = (6, 6);
        let mut vals = vec![3.0; w * h];
        for v in 0..3 {
            vals[v * w + 2] = f64::NAN;
        }
        let img = image_from(w, h, &vals);
        let filled = fill_holes(&img);
        for v in 0..3 {
            assert!(!filled.filled_mask[v * w + 2]);
        }
        assert_eq!(filled.filled_range, img.filled_range);
    }

    #[test]
    fn kernel_centre_coefficient() {
        let k = gaussian_kernel_3();
        assert_relative_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // exp(0) / (1 + 2 exp(-2))², evaluated analytically.
        let centre = k[1] * k[1];
        assert_relative_eq!(centre, 0.619_347_1, epsilon = 1e-6);

        let mut impulse = vec![0.0; 25];
        impulse[12] = 1.0;
        let s = gaussian_smooth(&impulse, 5, 5);
        assert_relative_eq!(s[12], centre, epsilon = 1e-15);
    }

    #[test]
    fn constant_image_cannot_be_normalized() {
        let img = image_from(5, 5, &[5.0; 25]);
        assert_eq!(
            smooth_and_normalize(&img),
            Err(RangeImageError::ConstantImage)
        );
    }

    #[test]
    fn ramp_stays_monotone_and_spans_unit_interval() {
        let (w, h) = (9, 4);
        let vals: Vec<f64> = (0..w * h).map(|i| 1.0 + (i % w) as f64).collect();
        let out = smooth_and_normalize(&image_from(w, h, &vals)).unwrap();
        for v in 0..h {
            for u in 1..w {
                assert!(out.normalized[v * w + u] > out.normalized[v * w + u - 1]);
            }
        }
        let min = out.normalized.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.normalized.iter().cloned().fold(0.0, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn back_projection_needs_a_raw_neighbour() {
        let (w, h) = (9, 9);
        let mut vals = vec![4.0; w * h];
        for v in 2..7 {
            for u in 2..7 {
                vals[v * w + u] = f64::NAN;
            }
        }
        let filled = fill_holes(&image_from(w, h, &vals));
        assert_eq!(
            back_project(&filled, 4, 4),
            Err(RangeImageError::NoValidRange { u: 4, v: 4 })
        );
        // Rim of the hole borrows the adjacent raw measurement.
        let p = back_project(&filled, 2, 4).unwrap();
        assert_relative_eq!(p.coords.norm(), 4.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn round_trip_within_quantization(
                r in 1.0f64..100.0,
                az in -3.1f64..3.1,
                el in -1.5f64..1.5,
            ) {
                let model = ProjectionModel::default();
                let p = Point3::from(direction(az, el) * r);
                let img = project(&PointCloud::new(vec![p]), &model, &RangeLimits::default()).unwrap();
                let (u, v) = model.pixel_of(az, el).unwrap();
                let q = back_project(&img, u, v).unwrap();
                let res = model.azimuth_resolution.max(model.elevation_resolution);
                prop_assert!((q - p).norm() <= r * res * 2f64.sqrt());
                prop_assert!((q.coords.norm() - r).abs() < 1e-9);
            }

            #[test]
            fn projection_is_deterministic_and_fill_keeps_valid(
                pts in prop::collection::vec(prop::array::uniform3(-30.0f64..30.0), 1..300)
            ) {
                let cloud = PointCloud::new(pts.into_iter().map(|a| Point3::new(a[0], a[1], a[2])).collect());
                let model = ProjectionModel::from_degrees((-180.0, 180.0), (-90.0, 90.0), 4.0, 4.0);
                let limits = RangeLimits::default();
                if let Ok(a) = project(&cloud, &model, &limits) {
                    let b = project(&cloud, &model, &limits).unwrap();
                    prop_assert_eq!(a.raw_range.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                    b.raw_range.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                    let f = fill_holes(&a);
                    for i in 0..a.raw_range.len() {
                        if a.valid_mask[i] {
                            prop_assert_eq!(f.filled_range[i], a.raw_range[i]);
                        }
                    }
                    if let Ok(n) = smooth_and_normalize(&f) {
                        prop_assert!(n.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
                        let known: Vec<f64> = n.normalized.iter().zip(&n.filled_mask)
                            .filter(|(_, k)| **k).map(|(v, _)| *v).collect();
                        prop_assert!(known.contains(&0.0));
                        prop_assert!(known.contains(&1.0));
                    }
                }
            }
        }
    }
}
