//! Quick property checks runnable from the command line on any machine.

use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvelet::{fdct_forward, fdct_inverse, reconstruct_scale, CurveletConfig};
use crate::evaluation::{random_trajectory, scan_terrain, Terrain, TerrainSpec};
use crate::geometry::{estimate_rigid_svd, CorrespondenceSet, Point3, PointCloud, RigidTransform};
use crate::io::{load_cloud, write_cloud, CloudFormat};
use crate::matching::{ransac_filter, Match, RansacConfig};
use crate::pipeline::{register_pair, PipelineConfig};
use crate::range_image::ProjectionModel;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn random_transform(rng: &mut impl Rng, max_translation: f64) -> RigidTransform {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let t = Vector3::from_fn(|_, _| rng.random_range(-max_translation..max_translation));
    RigidTransform::from_quaternion(q, t)
}

fn random_point(rng: &mut impl Rng, half: f64) -> Point3 {
    Point3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn tight_frame(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = (0.0f64, 0.0f64);
    for &(rows, cols, j) in &[(64, 64, 3), (64, 64, 4), (64, 128, 4), (128, 128, 5)] {
        let cfg = CurveletConfig {
            n_scales: j,
            ..CurveletConfig::default()
        };
        let img: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let pyr = fdct_forward(&img, rows, cols, &cfg).map_err(|e| e.to_string())?;
        let energy: f64 = img.iter().map(|v| v * v).sum();
        let back = fdct_inverse(&pyr).map_err(|e| e.to_string())?;
        let peak = img.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rec = img
            .iter()
            .zip(&back)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / peak;
        worst.0 = worst.0.max((pyr.energy() - energy).abs() / energy);
        worst.1 = worst.1.max(rec);
    }
    let detail = format!(
        "energy rel err {:.1e}, reconstruction rel err {:.1e}",
        worst.0, worst.1
    );
    if worst.0 <= 1e-6 && worst.1 <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scale_partition(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let cfg = CurveletConfig::default();
    let (rows, cols) = (64, 96);
    let img: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let pyr = fdct_forward(&img, rows, cols, &cfg).map_err(|e| e.to_string())?;
    let full = fdct_inverse(&pyr).map_err(|e| e.to_string())?;
    let mut sum = vec![0.0; rows * cols];
    for j in 1..=pyr.n_scales() {
        let part = reconstruct_scale(&pyr, j).map_err(|e| e.to_string())?;
        sum.iter_mut().zip(&part).for_each(|(s, p)| *s += p);
    }
    let err = sum
        .iter()
        .zip(&full)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let detail = format!("max abs err {err:.1e}");
    if err <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn svd_recovery(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let truth = random_transform(rng, 10.0);
        let n = rng.random_range(3..=50);
        let pairs = (0..n)
            .map(|_| {
                let d = random_point(rng, 5.0);
                (truth.apply(&d), d)
            })
            .collect();
        let est = estimate_rigid_svd(&CorrespondenceSet::new(pairs)).map_err(|e| e.to_string())?;
        let err = est.inverse().compose(&truth);
        worst = worst
            .max(err.angle())
            .max((est.translation - truth.translation).norm());
    }
    let detail = format!("worst error {worst:.1e}");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ransac_planted(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut recovered = 0;
    let runs = 10;
    for seed in 0..runs {
        let truth = random_transform(rng, 3.0);
        let n = 60;
        let data: Vec<Point3> = (0..n).map(|_| random_point(rng, 20.0)).collect();
        let mut model: Vec<Point3> = data.iter().map(|p| truth.apply(p)).collect();
        let outliers: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
        for &i in &outliers {
            model[i] = random_point(rng, 20.0);
        }
        let matches: Vec<Match> = (0..n)
            .map(|i| Match {
                model_index: i,
                data_index: i,
                distance: 0.0,
            })
            .collect();
        let cfg = RansacConfig {
            rng_seed: seed,
            ..RansacConfig::default()
        };
        let Ok(out) = ransac_filter(&matches, &model, &data, &cfg) else {
            continue;
        };
        let planted: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let err = out.transform.inverse().compose(&truth);
        // A random outlier may land within the threshold by chance.
        let stray = out
            .inlier_flags
            .iter()
            .zip(&planted)
            .filter(|(f, p)| **f && !**p)
            .count();
        let stray_ok = stray == 0
            || outliers
                .iter()
                .filter(|&&i| out.inlier_flags[i])
                .all(|&i| (truth.apply(&data[i]) - model[i]).norm() <= cfg.inlier_threshold);
        let inliers_ok = out
            .inlier_flags
            .iter()
            .zip(&planted)
            .all(|(f, p)| !*p || *f);
        if inliers_ok && stray_ok && err.angle() <= 1e-6 && err.translation.norm() <= 1e-6 {
            recovered += 1;
        }
    }
    let detail = format!("{recovered}/{runs} runs recovered the planted set");
    if recovered == runs {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ply_round_trip(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let cloud = PointCloud::new((0..1000).map(|_| random_point(rng, 100.0)).collect());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("cloud.ply");
    write_cloud(&cloud, &path, CloudFormat::PlyBinaryLe).map_err(|e| e.to_string())?;
    let back = load_cloud(&path).map_err(|e| e.to_string())?;
    if back.cloud == cloud {
        Ok(format!("{} points bit-exact", cloud.len()))
    } else {
        Err("points differ after round trip".into())
    }
}

fn synthetic_pair(seed: u64) -> Result<String, String> {
    let spec = TerrainSpec {
        noise_sigma: 0.02,
        ..TerrainSpec::random_sized(seed, 80.0)
    };
    let terrain = Terrain::new(&spec).map_err(|e| e.to_string())?;
    let poses = random_trajectory(&terrain, 2, 2.4, 0.45, 1.5, seed);
    let cfg = PipelineConfig {
        projection: ProjectionModel::default(),
        rng_seed: seed,
        ..PipelineConfig::default()
    };
    let scan = |p| scan_terrain(&terrain, p, &cfg.projection).map_err(|e| e.to_string());
    let (a, b) = (scan(&poses[0])?, scan(&poses[1])?);
    let r = register_pair(&a, &b, &cfg).map_err(|e| e.to_string())?;
    let err = r
        .transform
        .inverse()
        .compose(&poses[0].inverse().compose(&poses[1]));
    let detail = format!(
        "translation err {:.3} m, rotation err {:.4} rad, {} inliers",
        err.translation.norm(),
        err.angle(),
        r.inlier_count
    );
    if err.translation.norm() < 0.3 && err.angle() < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs every check with randomness drawn from `seed`.
pub fn run(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check("tight frame", || tight_frame(&mut rng)),
        check("scale partition", || scale_partition(&mut rng)),
        check("svd recovery", || svd_recovery(&mut rng)),
        check("ransac planted set", || ransac_planted(&mut rng)),
        check("ply round trip", || ply_round_trip(&mut rng)),
        check("synthetic registration", || synthetic_pair(seed)),
    ]
}
