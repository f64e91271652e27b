//! Directory-level drivers: registering a sequence of scans against ground
//! truth, and writing synthetic scan sets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::evaluation::{
    accumulate_map, ecdf, failure_rate, integrate_trajectory, pair_error, random_trajectory,
    relative_truth, rmse, scan_terrain, ErrorSample, EvalError, Terrain, TerrainSpec,
};
use crate::geometry::{PointCloud, RigidTransform};
use crate::io::{
    ecdf_csv, load_cloud, load_poses, poses_text, write_cloud, write_text, CloudFormat, IoError,
    PoseRecord,
};
use crate::pipeline::{
    extract_features, register_features, PipelineError, Scan, ScanFeatures, Timings,
    TRANSFORM_CONVENTION,
};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}: no point cloud files found")]
    NoScans(PathBuf),
    #[error("{found} scans with stride {stride} leave no pair to register")]
    TooFewScans { found: usize, stride: usize },
    #[error("no ground-truth pose for scan {0:?}")]
    MissingPose(String),
    #[error("{0}")]
    Config(String),
}

/// Cloud files directly inside `dir`, sorted by file name. The scan id is the
/// file stem.
pub fn list_scans(dir: &Path) -> Result<Vec<(String, PathBuf)>, BatchError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut scans = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if !path.is_file() || CloudFormat::from_extension(&path).is_none() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        scans.push((stem.to_string(), path));
    }
    scans.sort_by(|a, b| a.1.file_name().cmp(&b.1.file_name()));
    if scans.is_empty() {
        return Err(BatchError::NoScans(dir.to_path_buf()));
    }
    Ok(scans)
}

/// Outcome of one pair in a batch run.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub model_id: String,
    pub data_id: String,
    pub result: Result<RigidTransform, PipelineError>,
    /// Present when ground truth was supplied. Failed pairs are scored as if
    /// the identity had been returned.
    pub error: Option<ErrorSample>,
}

#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub pairs: Vec<PairOutcome>,
    /// (translation m, rotation rad), when ground truth was supplied.
    pub rmse: Option<(f64, f64)>,
    pub failure_rate: Option<f64>,
}

impl BatchSummary {
    pub fn registration_failures(&self) -> usize {
        self.pairs.iter().filter(|p| p.result.is_err()).count()
    }
}

#[derive(Serialize)]
struct FailureJson<'a> {
    convention: &'static str,
    model: &'a str,
    data: &'a str,
    stage: String,
    scan: Option<String>,
    error: String,
}

fn retag(e: &PipelineError, scan: Scan) -> PipelineError {
    PipelineError {
        scan: e.scan.map(|_| scan),
        ..e.clone()
    }
}

fn pair_json(model: &str, data: &str, json: &str) -> String {
    // Splice the scan ids in front of the result fields.
    let body = json.trim_start().strip_prefix('{').unwrap_or(json);
    format!("{{\n  \"model\": {model:?},\n  \"data\": {data:?},{body}\n")
}

/// Registers scans `0, s, 2s, …` of `scan_dir` pairwise along the chain,
/// where `s` is the configured stride, and writes into `out_dir`:
///
/// - `pairs/<model>__<data>.json`: result or stage-tagged failure per pair
/// - `trajectory.txt`: integrated poses, anchored at the first scan's true pose
///   when ground truth is given
/// - `map.ply`: all used scans placed by the integrated trajectory
/// - with ground truth: `errors.csv`, `ecdf_translation.csv`,
///   `ecdf_rotation.csv` and `summary.csv`
/// - with `with_timings`: `timings.csv`
///
/// Everything except `timings.csv` is a pure function of the inputs, the
/// configuration and `seed`.
pub fn run_batch(
    scan_dir: &Path,
    truth: Option<&Path>,
    out_dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    with_timings: bool,
) -> Result<BatchSummary, BatchError> {
    cfg.validate()
        .map_err(|e| BatchError::Config(e.to_string()))?;
    let pipeline = cfg.pipeline(seed);
    let stride = cfg.evaluation.stride;
    let all = list_scans(scan_dir)?;
    let scans: Vec<(String, PathBuf)> = all.iter().step_by(stride).cloned().collect();
    if scans.len() < 2 {
        return Err(BatchError::TooFewScans {
            found: all.len(),
            stride,
        });
    }
    let truth: Option<Vec<RigidTransform>> = match truth {
        None => None,
        Some(path) => {
            let records: HashMap<String, RigidTransform> = load_poses(path)?
                .into_iter()
                .map(|r| (r.id, r.pose))
                .collect();
            Some(
                scans
                    .iter()
                    .map(|(id, _)| {
                        records
                            .get(id)
                            .copied()
                            .ok_or_else(|| BatchError::MissingPose(id.clone()))
                    })
                    .collect::<Result<_, _>>()?,
            )
        }
    };
    let pairs_dir = out_dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|source| IoError::Io {
        path: pairs_dir.clone(),
        source,
    })?;

    let mut clouds = Vec::with_capacity(scans.len());
    let mut outcomes = Vec::with_capacity(scans.len() - 1);
    let mut timing_rows: Vec<(String, Timings)> = Vec::new();
    let mut prev: Option<Result<ScanFeatures, PipelineError>> = None;
    for (k, (id, path)) in scans.iter().enumerate() {
        let loaded = load_cloud(path)?;
        if loaded.dropped > 0 {
            warn!(
                "{}: dropped {} non-finite points",
                path.display(),
                loaded.dropped
            );
        }
        let current = extract_features(&loaded.cloud, &pipeline, Some(Scan::Data));
        clouds.push(loaded.cloud);
        if let Some(model) = prev.take() {
            let model_id = &scans[k - 1].0;
            let registered = match (&model, &current) {
                (Err(e), _) => Err(retag(e, Scan::Model)),
                (_, Err(e)) => Err(e.clone()),
                (Ok(m), Ok(d)) => register_features(m.clone(), d.clone(), &pipeline),
            };
            let name = format!("{model_id}__{id}");
            let json = match &registered {
                Ok(r) => pair_json(model_id, id, &r.result.to_json(false)),
                Err(e) => {
                    warn!("pair {name}: {e}");
                    serde_json::to_string_pretty(&FailureJson {
                        convention: TRANSFORM_CONVENTION,
                        model: model_id,
                        data: id,
                        stage: e.stage.to_string(),
                        scan: e.scan.map(|s| s.to_string()),
                        error: e.error.to_string(),
                    })
                    .expect("plain data serializes")
                        + "\n"
                }
            };
            write_text(&pairs_dir.join(format!("{name}.json")), &json)?;
            if let Ok(r) = &registered {
                timing_rows.push((name.clone(), r.result.timings.clone()));
            }
            let result = registered.map(|r| r.result.transform);
            let error = truth.as_ref().map(|t| {
                let estimate = result
                    .clone()
                    .unwrap_or_else(|_| RigidTransform::identity());
                ErrorSample {
                    pair_id: name.clone(),
                    ..pair_error(&estimate, &relative_truth(&t[k - 1], &t[k]))
                }
            });
            if let Some(e) = &error {
                info!(
                    "pair {model_id}→{id}: translation error {:.4} m, rotation error {:.4} rad",
                    e.translation, e.rotation
                );
            }
            outcomes.push(PairOutcome {
                model_id: model_id.clone(),
                data_id: id.clone(),
                result,
                error,
            });
        }
        prev = Some(current);
    }

    let pairwise: Vec<RigidTransform> = outcomes
        .iter()
        .map(|o| {
            o.result
                .clone()
                .unwrap_or_else(|_| RigidTransform::identity())
        })
        .collect();
    let anchor = truth
        .as_ref()
        .map(|t| t[0])
        .unwrap_or_else(RigidTransform::identity);
    let poses: Vec<RigidTransform> = integrate_trajectory(&pairwise)
        .iter()
        .map(|p| anchor.compose(p))
        .collect();
    let records: Vec<PoseRecord> = scans
        .iter()
        .zip(&poses)
        .map(|((id, _), pose)| PoseRecord {
            id: id.clone(),
            pose: *pose,
        })
        .collect();
    write_text(
        &out_dir.join("trajectory.txt"),
        &poses_text(
            &records,
            "integrated trajectory, sensor to world\nid tx ty tz qw qx qy qz",
        ),
    )?;
    let voxel = Some(cfg.evaluation.map_voxel_m).filter(|v| *v > 0.0);
    let map = accumulate_map(&clouds, &poses, voxel)?;
    write_cloud(&map, &out_dir.join("map.ply"), CloudFormat::PlyBinaryLe)?;

    let mut summary = BatchSummary {
        pairs: outcomes,
        rmse: None,
        failure_rate: None,
    };
    if truth.is_some() {
        let samples: Vec<ErrorSample> = summary
            .pairs
            .iter()
            .filter_map(|p| p.error.clone())
            .collect();
        let (rt, rr) = rmse(&samples)?;
        let rotations: Vec<f64> = samples.iter().map(|s| s.rotation).collect();
        let translations: Vec<f64> = samples.iter().map(|s| s.translation).collect();
        let rate = failure_rate(&rotations, cfg.evaluation.failure_threshold_rad)?;
        write_text(
            &out_dir.join("ecdf_rotation.csv"),
            &ecdf_csv(&ecdf(&rotations)?),
        )?;
        write_text(
            &out_dir.join("ecdf_translation.csv"),
            &ecdf_csv(&ecdf(&translations)?),
        )?;
        let mut errors = String::from("model,data,translation_m,rotation_rad,status\n");
        for p in &summary.pairs {
            let e = p.error.as_ref().expect("truth supplied");
            let status = if p.result.is_ok() { "ok" } else { "failed" };
            writeln!(
                errors,
                "{},{},{},{},{status}",
                p.model_id, p.data_id, e.translation, e.rotation
            )
            .expect("writing to a String");
        }
        write_text(&out_dir.join("errors.csv"), &errors)?;
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("rmse_translation_m", rt.to_string()),
            ("rmse_rotation_rad", rr.to_string()),
            ("failure_rate", rate.to_string()),
            (
                "failure_threshold_rad",
                cfg.evaluation.failure_threshold_rad.to_string(),
            ),
            ("pairs", summary.pairs.len().to_string()),
            (
                "registration_failures",
                summary.registration_failures().to_string(),
            ),
        ] {
            writeln!(s, "{k},{v}").expect("writing to a String");
        }
        write_text(&out_dir.join("summary.csv"), &s)?;
        summary.rmse = Some((rt, rr));
        summary.failure_rate = Some(rate);
    }
    if with_timings {
        let mut s = String::from("pair,stage,seconds\n");
        for (name, t) in &timing_rows {
            for (stage, secs) in t {
                writeln!(s, "{name},{stage},{secs}").expect("writing to a String");
            }
        }
        write_text(&out_dir.join("timings.csv"), &s)?;
    }
    Ok(summary)
}

/// Scans a terrain along a random trajectory and writes `scans/scan_NNN.ply`,
/// `truth.txt` (sensor-to-world poses) and `terrain.toml` into `out_dir`.
/// Returns the scan poses.
pub fn write_synthetic_set(
    spec: &TerrainSpec,
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<RigidTransform>, BatchError> {
    cfg.validate()
        .map_err(|e| BatchError::Config(e.to_string()))?;
    let s = &cfg.synth;
    let terrain = Terrain::new(spec)?;
    let poses = random_trajectory(
        &terrain,
        s.scans,
        s.max_translation_m,
        s.max_rotation_rad,
        s.sensor_height_m,
        seed,
    );
    let scan_dir = out_dir.join("scans");
    fs::create_dir_all(&scan_dir).map_err(|source| IoError::Io {
        path: scan_dir.clone(),
        source,
    })?;
    let model = cfg.projection.model();
    let width = (poses.len().max(2) - 1).to_string().len().max(3);
    let mut records = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let id = format!("scan_{k:0width$}");
        let cloud: PointCloud = scan_terrain(&terrain, pose, &model)?;
        info!("{id}: {} points", cloud.len());
        write_cloud(
            &cloud,
            &scan_dir.join(format!("{id}.ply")),
            CloudFormat::PlyBinaryLe,
        )?;
        records.push(PoseRecord { id, pose: *pose });
    }
    write_text(
        &out_dir.join("truth.txt"),
        &poses_text(&records, "sensor to world\nid tx ty tz qw qx qy qz"),
    )?;
    write_text(
        &out_dir.join("terrain.toml"),
        &toml::to_string(spec).map_err(|e| BatchError::Config(e.to_string()))?,
    )?;
    Ok(poses)
}
