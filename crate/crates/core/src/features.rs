//! Difference-of-curvelets keypoints and gradient-histogram descriptors.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvelet::{reconstruct_scale, CurveletError, CurveletPyramid};
use crate::geometry::Point3;
use crate::range_image::{back_project, RangeImage};

pub const DESCRIPTOR_LEN: usize = 128;
const CELLS: usize = 4;
const ORIENTATION_BINS: usize = 8;
const WINDOW: isize = 16;
const CELL_WIDTH: f64 = 4.0;
const WEIGHT_SIGMA: f64 = 8.0;
const BIN_CLAMP: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("difference-of-curvelets needs at least 3 scales, got {0}")]
    TooFewScales(usize),
    #[error("window around ({u}, {v}) has no gradient")]
    ZeroGradient { u: usize, v: usize },
    #[error(transparent)]
    Curvelet(#[from] CurveletError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Minimum |DoC| response, in normalized range units.
    pub contrast_threshold: f64,
    /// Keypoints must lie at least this far (m) beyond the sensor's minimum range.
    pub range_margin: f64,
    /// Rotate each descriptor window to its dominant gradient orientation.
    pub orientation_normalize: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.03,
            range_margin: 0.5,
            orientation_normalize: false,
        }
    }
}

/// Band differences `I_c(j) - I_c(j-1)` for `j = 2..=J`, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct DocStack {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<Vec<f64>>,
}

impl DocStack {
    fn at(&self, level: usize, u: usize, v: usize) -> f64 {
        self.levels[level][v * self.width + u]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub u: usize,
    pub v: usize,
    /// Index into the DoC stack (0 = coarsest difference).
    pub level: usize,
    pub response: f64,
    pub world: Option<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f64; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance_squared(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Per-scale reconstructions of `pyr` and their consecutive differences.
pub fn build_doc_stack(pyr: &CurveletPyramid) -> Result<DocStack, FeatureError> {
    let n = pyr.n_scales();
    if n < 3 {
        return Err(FeatureError::TooFewScales(n));
    }
    let bands = (1..=n)
        .into_par_iter()
        .map(|j| reconstruct_scale(pyr, j))
        .collect::<Result<Vec<_>, _>>()?;
    let levels = bands
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect();
    Ok(DocStack {
        width: pyr.geometry.cols,
        height: pyr.geometry.rows,
        levels,
    })
}

/// Strict 3×3×3 extrema at interior levels and interior pixels, sorted by
/// (level, v, u).
pub fn detect_extrema(stack: &DocStack) -> Vec<Keypoint> {
    let (w, h) = (stack.width, stack.height);
    if stack.levels.len() < 3 || w < 3 || h < 3 {
        return Vec::new();
    }
    (1..stack.levels.len() - 1)
        .flat_map(|level| {
            (1..h - 1)
                .into_par_iter()
                .flat_map_iter(move |v| {
                    (1..w - 1).filter_map(move |u| {
                        let c = stack.at(level, u, v);
                        is_extremum(stack, level, u, v, c).then_some(Keypoint {
                            u,
                            v,
                            level,
                            response: c,
                            world: None,
                        })
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn is_extremum(stack: &DocStack, level: usize, u: usize, v: usize, c: f64) -> bool {
    let (mut above, mut below) = (true, true);
    for l in level - 1..=level + 1 {
        for vv in v - 1..=v + 1 {
            for uu in u - 1..=u + 1 {
                if l == level && vv == v && uu == u {
                    continue;
                }
                let n = stack.at(l, uu, vv);
                above &= c > n;
                below &= c < n;
                if !above && !below {
                    return false;
                }
            }
        }
    }
    above || below
}

/// Drops low-contrast keypoints and those without a usable 3D position, and
/// fills in `world` for the survivors.
pub fn filter_keypoints(
    kps: &[Keypoint],
    img: &RangeImage,
    contrast_threshold: f64,
    range_margin: f64,
) -> Vec<Keypoint> {
    let min_range = img.limits.min_range + range_margin;
    kps.iter()
        .filter(|k| k.response.abs() >= contrast_threshold)
        .filter_map(|k| {
            let p = back_project(img, k.u, k.v).ok()?;
            (p.coords.norm() >= min_range).then(|| Keypoint {
                world: Some(p),
                ..k.clone()
            })
        })
        .collect()
}

struct Gradients {
    magnitude: Vec<f64>,
    angle: Vec<f64>,
    win: usize,
}

/// Central-difference gradients over the 16×16 window whose top-left pixel is
/// `(u - 8, v - 8)`, sampling the image with clamped coordinates.
fn window_gradients(image: &[f64], width: usize, height: usize, u: usize, v: usize) -> Gradients {
    let win = WINDOW as usize;
    let px = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        image[yc * width + xc]
    };
    let mut magnitude = Vec::with_capacity(win * win);
    let mut angle = Vec::with_capacity(win * win);
    for dy in -WINDOW / 2..WINDOW / 2 {
        for dx in -WINDOW / 2..WINDOW / 2 {
            let x = u as isize + dx;
            let y = v as isize + dy;
            let gx = (px(x + 1, y) - px(x - 1, y)) / 2.0;
            let gy = (px(x, y + 1) - px(x, y - 1)) / 2.0;
            magnitude.push(gx.hypot(gy));
            angle.push(gy.atan2(gx).rem_euclid(TAU));
        }
    }
    Gradients {
        magnitude,
        angle,
        win,
    }
}

fn dominant_orientation(g: &Gradients) -> f64 {
    const BINS: usize = 36;
    let mut hist = [0.0f64; BINS];
    let half = WINDOW as f64 / 2.0;
    for i in 0..g.win * g.win {
        let rx = (i % g.win) as f64 - half + 0.5;
        let ry = (i / g.win) as f64 - half + 0.5;
        let wgt = (-(rx * rx + ry * ry) / (2.0 * WEIGHT_SIGMA * WEIGHT_SIGMA)).exp();
        let b = ((g.angle[i] / TAU * BINS as f64) as usize).min(BINS - 1);
        hist[b] += wgt * g.magnitude[i];
    }
    let best = (0..BINS)
        .max_by(|&a, &b| hist[a].total_cmp(&hist[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    (best as f64 + 0.5) * TAU / BINS as f64
}

/// 4×4 spatial cells × 8 orientation bins accumulated over a 16×16 window
/// with trilinear interpolation and Gaussian weighting, clamped at 0.2 and
/// L2-normalized.
pub fn compute_descriptor(
    image: &[f64],
    width: usize,
    height: usize,
    kp: &Keypoint,
    orientation_normalize: bool,
) -> Result<Descriptor, FeatureError> {
    let g = window_gradients(image, width, height, kp.u, kp.v);
    let reference = if orientation_normalize {
        dominant_orientation(&g)
    } else {
        0.0
    };
    let (sin_r, cos_r) = reference.sin_cos();
    let half = WINDOW as f64 / 2.0;
    let mut hist = [0.0f64; DESCRIPTOR_LEN];
    for i in 0..g.win * g.win {
        let m = g.magnitude[i];
        if m == 0.0 {
            continue;
        }
        let ox = (i % g.win) as f64 - half + 0.5;
        let oy = (i / g.win) as f64 - half + 0.5;
        // Sample position in the (possibly rotated) descriptor frame.
        let rx = cos_r * ox + sin_r * oy;
        let ry = -sin_r * ox + cos_r * oy;
        let cx = rx / CELL_WIDTH + CELLS as f64 / 2.0 - 0.5;
        let cy = ry / CELL_WIDTH + CELLS as f64 / 2.0 - 0.5;
        let co = (g.angle[i] - reference).rem_euclid(TAU) / TAU * ORIENTATION_BINS as f64;
        let wgt = m * (-(ox * ox + oy * oy) / (2.0 * WEIGHT_SIGMA * WEIGHT_SIGMA)).exp();

        let (x0, y0, o0) = (cx.floor(), cy.floor(), co.floor());
        let (fx, fy, fo) = (cx - x0, cy - y0, co - o0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let yi = y0 as isize + dy;
            if !(0..CELLS as isize).contains(&yi) {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xi = x0 as isize + dx;
                if !(0..CELLS as isize).contains(&xi) {
                    continue;
                }
                for (d_o, wo) in [(0, 1.0 - fo), (1, fo)] {
                    let oi = (o0 as usize + d_o) % ORIENTATION_BINS;
                    let idx = (yi as usize * CELLS + xi as usize) * ORIENTATION_BINS + oi;
                    hist[idx] += wgt * wy * wx * wo;
                }
            }
        }
    }
    let zero_gradient = FeatureError::ZeroGradient { u: kp.u, v: kp.v };
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(zero_gradient);
    }
    for v in hist.iter_mut() {
        *v = (*v / norm).min(BIN_CLAMP);
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in hist.iter_mut() {
        *v /= norm;
    }
    Ok(Descriptor(hist))
}

/// Keypoints of one scan with their descriptors, in matching order.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Detection, filtering and description on a smoothed, normalized range image.
/// Keypoints whose descriptor window has no gradient are dropped.
pub fn describe_keypoints(img: &RangeImage, kps: &[Keypoint], cfg: &DetectorConfig) -> FeatureSet {
    let described: Vec<Option<Descriptor>> = kps
        .par_iter()
        .map(|k| {
            compute_descriptor(
                &img.normalized,
                img.width,
                img.height,
                k,
                cfg.orientation_normalize,
            )
            .ok()
        })
        .collect();
    let mut out = FeatureSet::default();
    for (k, d) in kps.iter().zip(described) {
        if let Some(d) = d {
            out.keypoints.push(k.clone());
            out.descriptors.push(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvelet::{fdct_forward, fdct_inverse, CurveletConfig};
    use crate::range_image::{ProjectionModel, RangeLimits};

    fn stack_of(levels: Vec<Vec<f64>>, width: usize, height: usize) -> DocStack {
        DocStack {
            width,
            height,
            levels,
        }
    }

    #[test]
    fn constant_image_gives_flat_stack() {
        let img = vec![0.4; 64 * 64];
        let pyr = fdct_forward(&img, 64, 64, &CurveletConfig::default()).unwrap();
        let stack = build_doc_stack(&pyr).unwrap();
        assert_eq!(stack.levels.len(), 3);
        // The coarsest band carries the constant; every difference after the
        // first is a difference of two (near) zero bands.
        for level in &stack.levels[1..] {
            assert!(level.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn stack_telescopes() {
        let (rows, cols) = (64, 80);
        let img: Vec<f64> = (0..rows * cols)
            .map(|i| ((i * 7919) % 101) as f64 / 101.0)
            .collect();
        let pyr = fdct_forward(&img, rows, cols, &CurveletConfig::default()).unwrap();
        let stack = build_doc_stack(&pyr).unwrap();
        let first = reconstruct_scale(&pyr, 1).unwrap();
        let last = reconstruct_scale(&pyr, 4).unwrap();
        let full = fdct_inverse(&pyr).unwrap();
        for i in 0..rows * cols {
            let sum: f64 = stack.levels.iter().map(|l| l[i]).sum();
            assert!((sum - (last[i] - first[i])).abs() < 1e-8);
        }
        assert_eq!(full.len(), rows * cols);
    }

    #[test]
    fn two_scale_pyramid_rejected() {
        let cfg = CurveletConfig {
            n_scales: 2,
            ..CurveletConfig::default()
        };
        let pyr = fdct_forward(&vec![0.0; 64 * 64], 64, 64, &cfg).unwrap();
        assert_eq!(build_doc_stack(&pyr), Err(FeatureError::TooFewScales(2)));
    }

    #[test]
    fn constant_stack_has_no_extrema() {
        let s = stack_of(vec![vec![1.0; 100]; 3], 10, 10);
        assert!(detect_extrema(&s).is_empty());
    }

    #[test]
    fn planted_impulse_is_the_only_extremum() {
        let mut levels = vec![vec![0.0; 100]; 4];
        levels[2][4 * 10 + 6] = 1.0;
        let kps = detect_extrema(&stack_of(levels, 10, 10));
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].u, kps[0].v, kps[0].level), (6, 4, 2));
        assert_eq!(kps[0].response, 1.0);
    }

    #[test]
    fn blob_produces_extremum_near_centre() {
        let (rows, cols) = (64, 64);
        let (cu, cv) = (30.0, 34.0);
        let img: Vec<f64> = (0..rows * cols)
            .map(|i| {
                let (u, v) = ((i % cols) as f64, (i / cols) as f64);
                (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * 3.0f64.powi(2))).exp()
            })
            .collect();
        let cfg = CurveletConfig {
            n_scales: 5,
            ..CurveletConfig::default()
        };
        let pyr = fdct_forward(&img, rows, cols, &cfg).unwrap();
        let kps = detect_extrema(&build_doc_stack(&pyr).unwrap());
        assert!(kps
            .iter()
            .any(|k| (k.u as f64 - cu).abs() <= 2.0 && (k.v as f64 - cv).abs() <= 2.0));
    }

    #[test]
    fn extrema_are_strict_under_recheck() {
        let (w, h) = (24, 20);
        let levels: Vec<Vec<f64>> = (0..4)
            .map(|l| {
                (0..w * h)
                    .map(|i| (((i * 37 + l * 101) % 53) as f64).sin())
                    .collect()
            })
            .collect();
        let s = stack_of(levels, w, h);
        let kps = detect_extrema(&s);
        assert!(!kps.is_empty());
        for k in &kps {
            let c = s.at(k.level, k.u, k.v);
            let mut neighbours = Vec::new();
            for l in k.level - 1..=k.level + 1 {
                for v in k.v - 1..=k.v + 1 {
                    for u in k.u - 1..=k.u + 1 {
                        if (l, v, u) != (k.level, k.v, k.u) {
                            neighbours.push(s.at(l, u, v));
                        }
                    }
                }
            }
            assert_eq!(neighbours.len(), 26);
            assert!(neighbours.iter().all(|n| c > *n) || neighbours.iter().all(|n| c < *n));
        }
        let mut sorted = kps.clone();
        sorted.sort_by_key(|k| (k.level, k.v, k.u));
        assert_eq!(sorted, kps);
    }

    fn range_image_with_background() -> RangeImage {
        let model = ProjectionModel::from_degrees((-10.0, 10.0), (-5.0, 5.0), 1.0, 1.0);
        let (w, h) = (model.width(), model.height());
        let mut raw = vec![8.0; w * h];
        // Border-connected background column band.
        for v in 0..h {
            for u in 0..4 {
                raw[v * w + u] = f64::NAN;
            }
        }
        let valid: Vec<bool> = raw.iter().map(|r| r.is_finite()).collect();
        RangeImage {
            width: w,
            height: h,
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

    fn kp(u: usize, v: usize, response: f64) -> Keypoint {
        Keypoint {
            u,
            v,
            level: 1,
            response,
            world: None,
        }
    }

    #[test]
    fn filtering_rules() {
        let img = range_image_with_background();
        let kps = vec![
            kp(10, 5, 0.01),
            kp(1, 5, 0.5),
            kp(10, 5, -0.5),
            kp(12, 3, 0.2),
        ];
        let kept = filter_keypoints(&kps, &img, 0.03, 0.5);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|k| k.world.is_some()));
        assert_eq!((kept[0].u, kept[0].response), (10, -0.5));

        let noop = filter_keypoints(&[kp(10, 5, 0.0), kp(12, 3, 0.001)], &img, 0.0, 0.0);
        assert_eq!(noop.len(), 2);

        // Margin pushes the whole 8 m scene inside the exclusion zone.
        assert!(filter_keypoints(&kps, &img, 0.0, 10.0).is_empty());
    }

    #[test]
    fn flat_window_has_no_descriptor() {
        let img = vec![0.5; 32 * 32];
        assert_eq!(
            compute_descriptor(&img, 32, 32, &kp(16, 16, 1.0), false),
            Err(FeatureError::ZeroGradient { u: 16, v: 16 })
        );
    }

    #[test]
    fn step_edge_concentrates_in_gradient_bins() {
        let (w, h) = (32, 32);
        let img: Vec<f64> = (0..w * h)
            .map(|i| if i % w >= 16 { 1.0 } else { 0.0 })
            .collect();
        let d = compute_descriptor(&img, w, h, &kp(16, 16, 1.0), false).unwrap();
        let mut per_bin = [0.0; ORIENTATION_BINS];
        for (i, v) in d.0.iter().enumerate() {
            per_bin[i % ORIENTATION_BINS] += v;
        }
        let total: f64 = per_bin.iter().sum();
        // Gradient points along +x: bin 0, neighbours 1 and 7.
        let mut sorted = per_bin;
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!((sorted[0] + sorted[1]) / total > 0.6);
        assert!(per_bin[0] / total > 0.6);
        let norm: f64 = d.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orientation_normalization_cancels_rotation() {
        let (w, h) = (40, 40);
        let ramp = |theta: f64| -> Vec<f64> {
            (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64 - 20.0, (i / w) as f64 - 20.0);
                    let t = x * theta.cos() + y * theta.sin();
                    (t / 5.0).tanh()
                })
                .collect()
        };
        let a = compute_descriptor(&ramp(0.0), w, h, &kp(20, 20, 1.0), true).unwrap();
        let b = compute_descriptor(
            &ramp(std::f64::consts::FRAC_PI_2),
            w,
            h,
            &kp(20, 20, 1.0),
            true,
        )
        .unwrap();
        assert!(a.distance_squared(&b).sqrt() < 0.35);
        let plain_a = compute_descriptor(&ramp(0.0), w, h, &kp(20, 20, 1.0), false).unwrap();
        let plain_b = compute_descriptor(
            &ramp(std::f64::consts::FRAC_PI_2),
            w,
            h,
            &kp(20, 20, 1.0),
            false,
        )
        .unwrap();
        assert!(plain_a.distance_squared(&plain_b).sqrt() > 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn descriptors_are_unit_and_clamped(
                vals in prop::collection::vec(0.0f64..1.0, 24 * 24),
                u in 0usize..24,
                v in 0usize..24,
            ) {
                if let Ok(d) = compute_descriptor(&vals, 24, 24, &kp(u, v, 1.0), false) {
                    let norm: f64 = d.0.iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() < 1e-6);
                    prop_assert!(d.0.iter().all(|x| *x >= 0.0));
                }
            }

            #[test]
            fn higher_threshold_never_keeps_more(
                responses in prop::collection::vec(-1.0f64..1.0, 1..50),
                t1 in 0.0f64..0.5,
                dt in 0.0f64..0.5,
            ) {
                let img = range_image_with_background();
                let kps: Vec<Keypoint> = responses.iter().enumerate()
                    .map(|(i, r)| kp(5 + i % 14, 1 + i % 8, *r)).collect();
                let a = filter_keypoints(&kps, &img, t1, 0.0).len();
                let b = filter_keypoints(&kps, &img, t1 + dt, 0.0).len();
                prop_assert!(b <= a);
            }
        }
    }
}
