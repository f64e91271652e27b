//! Pairwise registration: range images, curvelet features, matching, RANSAC.

use std::fmt;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvelet::{fdct_forward, CurveletConfig, CurveletError};
use crate::features::{
    build_doc_stack, describe_keypoints, detect_extrema, filter_keypoints, DetectorConfig,
    FeatureError, FeatureSet,
};
use crate::geometry::{GeometryError, Point3, PointCloud, RigidTransform};
use crate::matching::{match_nn, ransac_filter, Match, MatchError, MatcherConfig, RansacConfig};
use crate::range_image::{
    fill_holes, project, smooth_and_normalize, ProjectionModel, RangeImage, RangeImageError,
    RangeLimits,
};

/// Direction of every transform this crate reports.
pub const TRANSFORM_CONVENTION: &str = "data_to_model";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Project,
    Normalize,
    Transform,
    Detect,
    Match,
    Ransac,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Project => "project",
            Stage::Normalize => "normalize",
            Stage::Transform => "curvelet",
            Stage::Detect => "detect",
            Stage::Match => "match",
            Stage::Ransac => "ransac",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scan {
    Model,
    Data,
}

impl fmt::Display for Scan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scan::Model => "model",
            Scan::Data => "data",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    RangeImage(#[from] RangeImageError),
    #[error(transparent)]
    Curvelet(#[from] CurveletError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed{}: {error}", scan.map(|s| format!(" on {s} scan")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub scan: Option<Scan>,
    pub error: StageError,
}

impl PipelineError {
    fn new(stage: Stage, scan: Option<Scan>, error: impl Into<StageError>) -> Self {
        Self {
            stage,
            scan,
            error: error.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub projection: ProjectionModel,
    pub limits: RangeLimits,
    pub curvelet: CurveletConfig,
    pub detector: DetectorConfig,
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
    pub rng_seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let input = |e: StageError| PipelineError::new(Stage::Input, None, e);
        self.projection.validate().map_err(|e| input(e.into()))?;
        if !(self.limits.min_range >= 0.0 && self.limits.max_range > self.limits.min_range) {
            return Err(input(
                RangeImageError::InvalidModel("range limits must satisfy 0 ≤ min < max".into())
                    .into(),
            ));
        }
        self.curvelet.validate().map_err(|e| input(e.into()))?;
        let side = self.projection.width().min(self.projection.height());
        if side < self.curvelet.min_side() {
            return Err(input(
                CurveletError::ImageTooSmall {
                    rows: self.projection.height(),
                    cols: self.projection.width(),
                    n_scales: self.curvelet.n_scales,
                    min: self.curvelet.min_side(),
                }
                .into(),
            ));
        }
        if self.curvelet.n_scales < 3 {
            return Err(input(
                FeatureError::TooFewScales(self.curvelet.n_scales).into(),
            ));
        }
        self.ransac.validate().map_err(|e| input(e.into()))?;
        Ok(())
    }

    fn ransac_seeded(&self) -> RansacConfig {
        RansacConfig {
            rng_seed: self.rng_seed,
            ..self.ransac
        }
    }
}

/// Per-stage wall times in seconds, in execution order.
pub type Timings = IndexMap<String, f64>;

/// Range image and described keypoints of one scan.
#[derive(Debug, Clone)]
pub struct ScanFeatures {
    pub image: RangeImage,
    pub features: FeatureSet,
    pub timings: Timings,
}

impl ScanFeatures {
    pub fn points(&self) -> Vec<Point3> {
        self.features
            .keypoints
            .iter()
            .map(|k| k.world.expect("filtered keypoints carry a 3D point"))
            .collect()
    }
}

fn timed<T>(timings: &mut Timings, key: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.insert(key.to_string(), start.elapsed().as_secs_f64());
    out
}

/// Range image, curvelet decomposition, keypoints and descriptors for one scan.
pub fn extract_features(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    scan: Option<Scan>,
) -> Result<ScanFeatures, PipelineError> {
    if cloud.is_empty() {
        return Err(PipelineError::new(
            Stage::Input,
            scan,
            GeometryError::EmptyCloud,
        ));
    }
    let err = |stage: Stage| move |e: StageError| PipelineError::new(stage, scan, e);
    let mut t = Timings::new();
    let projected = timed(&mut t, "project", || {
        project(cloud, &cfg.projection, &cfg.limits)
    })
    .map_err(|e| err(Stage::Project)(e.into()))?;
    let image = timed(&mut t, "normalize", || {
        smooth_and_normalize(&fill_holes(&projected))
    })
    .map_err(|e| err(Stage::Normalize)(e.into()))?;
    let pyr = timed(&mut t, "curvelet", || {
        fdct_forward(&image.normalized, image.height, image.width, &cfg.curvelet)
    })
    .map_err(|e| err(Stage::Transform)(e.into()))?;
    let features = timed(&mut t, "detect", || -> Result<FeatureSet, FeatureError> {
        let stack = build_doc_stack(&pyr)?;
        let kps = filter_keypoints(
            &detect_extrema(&stack),
            &image,
            cfg.detector.contrast_threshold,
            cfg.detector.range_margin,
        );
        Ok(describe_keypoints(&image, &kps, &cfg.detector))
    })
    .map_err(|e| err(Stage::Detect)(e.into()))?;
    Ok(ScanFeatures {
        image,
        features,
        timings: t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps data-scan coordinates into the model-scan frame.
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub match_count: usize,
    /// (model, data)
    pub keypoint_counts: (usize, usize),
    /// Meters.
    pub residual_rms: f64,
    pub timings: Timings,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    convention: &'static str,
    rotation: [f64; 9],
    translation: [f64; 3],
    inliers: usize,
    matches: usize,
    keypoints: [usize; 2],
    residual_rms_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings_s: Option<&'a Timings>,
}

impl RegistrationResult {
    /// Pretty JSON; timings are left out when `with_timings` is false so that
    /// repeated runs produce identical bytes.
    pub fn to_json(&self, with_timings: bool) -> String {
        let t = &self.transform.translation;
        let j = ResultJson {
            convention: TRANSFORM_CONVENTION,
            rotation: self.transform.rotation_row_major(),
            translation: [t.x, t.y, t.z],
            inliers: self.inlier_count,
            matches: self.match_count,
            keypoints: [self.keypoint_counts.0, self.keypoint_counts.1],
            residual_rms_m: self.residual_rms,
            timings_s: with_timings.then_some(&self.timings),
        };
        serde_json::to_string_pretty(&j).expect("plain data serializes")
    }
}

/// Everything produced while registering a pair, for artifact dumps.
#[derive(Debug, Clone)]
pub struct Registration {
    pub result: RegistrationResult,
    pub model: ScanFeatures,
    pub data: ScanFeatures,
    pub matches: Vec<Match>,
    /// Parallel to `matches`.
    pub inlier_flags: Vec<bool>,
}

/// Estimates the rigid transform taking `data` coordinates into the `model` frame.
pub fn register_pair(
    model: &PointCloud,
    data: &PointCloud,
    cfg: &PipelineConfig,
) -> Result<RegistrationResult, PipelineError> {
    register_pair_detailed(model, data, cfg).map(|r| r.result)
}

pub fn register_pair_detailed(
    model: &PointCloud,
    data: &PointCloud,
    cfg: &PipelineConfig,
) -> Result<Registration, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let (m, d) = rayon::join(
        || extract_features(model, cfg, Some(Scan::Model)),
        || extract_features(data, cfg, Some(Scan::Data)),
    );
    let (m, d) = (m?, d?);
    registration_from_features(m, d, cfg, start)
}

/// Matching and consensus on already extracted features.
pub fn register_features(
    model: ScanFeatures,
    data: ScanFeatures,
    cfg: &PipelineConfig,
) -> Result<Registration, PipelineError> {
    cfg.validate()?;
    registration_from_features(model, data, cfg, Instant::now())
}

fn registration_from_features(
    m: ScanFeatures,
    d: ScanFeatures,
    cfg: &PipelineConfig,
    start: Instant,
) -> Result<Registration, PipelineError> {
    let mut timings = Timings::new();
    for (scan, f) in [("model", &m), ("data", &d)] {
        for (k, v) in &f.timings {
            timings.insert(format!("{scan}.{k}"), *v);
        }
    }
    let matches = timed(&mut timings, "match", || {
        match_nn(
            &m.features.descriptors,
            &d.features.descriptors,
            &cfg.matcher,
        )
    })
    .map_err(|e| PipelineError::new(Stage::Match, None, e))?;
    let outcome = timed(&mut timings, "ransac", || {
        ransac_filter(&matches, &m.points(), &d.points(), &cfg.ransac_seeded())
    })
    .map_err(|e| PipelineError::new(Stage::Ransac, None, e))?;
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    let result = RegistrationResult {
        transform: outcome.transform,
        inlier_count: outcome.inlier_count(),
        match_count: matches.len(),
        keypoint_counts: (m.features.len(), d.features.len()),
        residual_rms: outcome.residual_rms,
        timings,
    };
    Ok(Registration {
        result,
        model: m,
        data: d,
        inlier_flags: outcome.inlier_flags,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{
        pair_error, pose_above, relative_truth, scan_terrain, Terrain, TerrainSpec,
    };

    fn test_config() -> PipelineConfig {
        PipelineConfig::default()
    }

    fn scan_pair(
        seed: u64,
        a: (f64, f64, f64),
        b: (f64, f64, f64),
    ) -> (PointCloud, PointCloud, RigidTransform) {
        let terrain = Terrain::new(&TerrainSpec::random(seed)).unwrap();
        let cfg = test_config();
        let pa = pose_above(&terrain, a.0, a.1, 1.5, a.2);
        let pb = pose_above(&terrain, b.0, b.1, 1.5, b.2);
        (
            scan_terrain(&terrain, &pa, &cfg.projection).unwrap(),
            scan_terrain(&terrain, &pb, &cfg.projection).unwrap(),
            relative_truth(&pa, &pb),
        )
    }

    #[test]
    fn self_registration_is_identity() {
        let (scan, _, _) = scan_pair(1, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        let r = register_pair(&scan, &scan, &test_config()).unwrap();
        let e = pair_error(&r.transform, &RigidTransform::identity());
        assert!(e.translation < 1e-6 && e.rotation < 1e-6, "{e:?}");
        assert_eq!(r.inlier_count, r.match_count);
        assert!(r.match_count <= r.keypoint_counts.0.min(r.keypoint_counts.1));
    }

    #[test]
    fn planted_motion_is_recovered() {
        let (a, b, truth) = scan_pair(2, (0.0, 0.0, 0.2), (1.0, 0.0, 0.3));
        let r = register_pair(&a, &b, &test_config()).unwrap();
        let e = pair_error(&r.transform, &truth);
        assert!(e.translation < 0.1 && e.rotation < 0.02, "{e:?}");
        assert!(r.inlier_count <= r.match_count);
    }

    #[test]
    fn deterministic() {
        let (a, b, _) = scan_pair(3, (0.0, 0.0, 0.0), (1.0, 0.5, 0.2));
        let cfg = test_config();
        let r1 = register_pair(&a, &b, &cfg).unwrap();
        let r2 = register_pair(&a, &b, &cfg).unwrap();
        assert_eq!(r1.to_json(false), r2.to_json(false));
    }

    #[test]
    fn disjoint_scenes_fail_consensus() {
        let (a, _, _) = scan_pair(4, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        let (b, _, _) = scan_pair(5, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        let e = register_pair(&a, &b, &test_config()).unwrap_err();
        assert_eq!(e.stage, Stage::Ransac);
        assert!(
            matches!(
                e.error,
                StageError::Match(MatchError::ConsensusFailure { .. })
            ),
            "{e}"
        );
    }

    #[test]
    fn empty_cloud_tagged_with_stage() {
        let e = register_pair(
            &PointCloud::default(),
            &PointCloud::default(),
            &test_config(),
        )
        .unwrap_err();
        assert_eq!(e.stage, Stage::Input);
        assert!(e.to_string().starts_with("input stage failed"));
    }

    #[test]
    fn out_of_range_scan_fails_projection() {
        let far = PointCloud::new(vec![Point3::new(1000.0, 0.0, 0.0)]);
        let e = register_pair(&far, &far, &test_config()).unwrap_err();
        assert_eq!((e.stage, e.scan), (Stage::Project, Some(Scan::Model)));
        assert_eq!(
            e.error,
            StageError::RangeImage(RangeImageError::EmptyProjection)
        );
    }

    #[test]
    fn json_layout() {
        let r = RegistrationResult {
            transform: RigidTransform::identity(),
            inlier_count: 4,
            match_count: 9,
            keypoint_counts: (10, 12),
            residual_rms: 0.01,
            timings: Timings::from([("total".to_string(), 1.5)]),
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json(true)).unwrap();
        assert_eq!(v["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(v["translation"].as_array().unwrap().len(), 3);
        assert_eq!(v["inliers"], 4);
        assert_eq!(v["matches"], 9);
        assert_eq!(v["keypoints"], serde_json::json!([10, 12]));
        assert_eq!(v["timings_s"]["total"], 1.5);
        assert!(!r.to_json(false).contains("timings_s"));
    }
}
