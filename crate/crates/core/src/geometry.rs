//! Rigid-body transforms and closed-form alignment of corresponding point pairs.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, SVD};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("empty point cloud")]
    EmptyCloud,
}

/// Unordered set of 3D points in a sensor-centric metric frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    /// Drops every point with a non-finite coordinate and returns how many were dropped.
    pub fn retain_finite(&mut self) -> usize {
        let before = self.points.len();
        self.points
            .retain(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite());
        before - self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| t.apply(p)).collect())
    }
}

/// Element of SE(3): `x' = rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, re-projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self {
            rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(),
            translation,
        }
    }

    /// Yaw/pitch/roll about z, y, x (applied roll first).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw).into_inner(),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let rotation = if drift > 1e-12 {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation angle of this transform in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        geodesic_angle(&self.rotation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        ortho <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

pub fn apply_transform(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

/// Result applies `b` then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Geodesic angle of a rotation matrix, i.e. `acos((trace - 1) / 2)`.
///
/// Evaluated as `atan2(sin, cos)` with the sine taken from the skew part, which
/// keeps full precision for angles near 0 where `acos` loses half the digits.
pub fn geodesic_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos)
}

/// Angle of `a * bᵀ`.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    geodesic_angle(&(a * b.transpose()))
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Pairs of (model point, data point).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Point3, Point3)>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(Point3, Point3)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Root-mean-square of `‖model − t(data)‖`.
    pub fn rms_residual(&self, t: &RigidTransform) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .pairs
            .iter()
            .map(|(m, d)| (m - t.apply(d)).norm_squared())
            .sum();
        (sum / self.pairs.len() as f64).sqrt()
    }
}

/// Least-squares rigid transform mapping data points onto model points
/// (SVD of the cross-covariance, with the reflection case folded back into SO(3)).
pub fn estimate_rigid_svd(c: &CorrespondenceSet) -> Result<RigidTransform, GeometryError> {
    let n = c.pairs.len();
    if n < 3 {
        return Err(GeometryError::DegenerateCorrespondences(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut model_centroid = Vector3::zeros();
    let mut data_centroid = Vector3::zeros();
    for (m, d) in &c.pairs {
        model_centroid += m.coords;
        data_centroid += d.coords;
    }
    model_centroid *= inv_n;
    data_centroid *= inv_n;

    let mut cross = Matrix3::zeros();
    let mut data_cov = Matrix3::zeros();
    for (m, d) in &c.pairs {
        let dm = m.coords - model_centroid;
        let dd = d.coords - data_centroid;
        cross += dd * dm.transpose();
        data_cov += dd * dd.transpose();
    }

    // The centred data must span at least a plane.
    let scale = data_cov.trace();
    let eig = data_cov.symmetric_eigenvalues();
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(scale > 0.0) || ev[1] <= 1e-12 * scale {
        return Err(GeometryError::DegenerateCorrespondences(
            "data points are collinear or coincident".into(),
        ));
    }

    // cross = Σ dd dmᵀ = U S Vᵀ; R = V D Uᵀ.
    let svd = SVD::new(cross, true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut v = v;
        v.column_mut(2).neg_mut();
        rotation = v * u.transpose();
    }
    let translation = model_centroid - rotation * data_centroid;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        RigidTransform::from_axis_angle(axis, rng.random_range(0.0..PI), t)
    }

    #[test]
    fn apply_identity_and_half_turn() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let half = RigidTransform::from_axis_angle(Vector3::z(), PI, Vector3::zeros());
        let q = half.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(q, Point3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn apply_quarter_turn_with_offset() {
        // Hand-multiplied: [[0,-1,0],[1,0,0],[0,0,1]] * (1,0,0) + (0,0,1).
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let t = RigidTransform::new(r, Vector3::new(0.0, 0.0, 1.0));
        let q = apply_transform(&t, &Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(q, Point3::new(0.0, 1.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn compose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_transform(&mut rng);
        let left = compose(&RigidTransform::identity(), &x);
        assert_relative_eq!(left.rotation, x.rotation, epsilon = 1e-15);
        assert_relative_eq!(left.translation, x.translation, epsilon = 1e-15);

        let id = compose(&x, &x.inverse());
        assert_relative_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-9);
        assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-9);

        let q = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_4, Vector3::zeros());
        let r = compose(&q, &q);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r.rotation, expected, epsilon = 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let rot = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let shift = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let p = Point3::origin();
        // shift then rotate: (1,0,0) -> (0,1,0)
        let q = compose(&rot, &shift).apply(&p);
        assert_relative_eq!(q, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn svd_identity_three_points() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let c = CorrespondenceSet::new(pts.iter().map(|p| (*p, *p)).collect());
        let t = estimate_rigid_svd(&c).unwrap();
        assert_relative_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn svd_recovers_known_transform() {
        let truth =
            RigidTransform::from_axis_angle(Vector3::y(), PI / 6.0, Vector3::new(1.0, -2.0, 0.5));
        let data = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(0.5, 0.5, 3.0),
        ];
        let c = CorrespondenceSet::new(data.iter().map(|d| (truth.apply(d), *d)).collect());
        let t = estimate_rigid_svd(&c).unwrap();
        assert!(rotation_distance(&t.rotation, &truth.rotation) < 1e-9);
        assert!((t.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn svd_noise_monte_carlo() {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_transform(&mut rng);
            let pairs = (0..100)
                .map(|_| {
                    let d = Point3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    );
                    let mut m = truth.apply(&d);
                    m.coords += Vector3::new(
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                    );
                    (m, d)
                })
                .collect();
            let t = estimate_rigid_svd(&CorrespondenceSet::new(pairs)).unwrap();
            worst = worst.max(rotation_distance(&t.rotation, &truth.rotation));
        }
        assert!(worst < 0.005, "worst angle error {worst}");
    }

    #[test]
    fn svd_rejects_degenerate() {
        let two = CorrespondenceSet::new(vec![(Point3::origin(), Point3::origin()); 2]);
        assert!(matches!(
            estimate_rigid_svd(&two),
            Err(GeometryError::DegenerateCorrespondences(_))
        ));
        let line: Vec<_> = (0..5)
            .map(|i| {
                let p = Point3::new(i as f64, 0.0, 0.0);
                (p, p)
            })
            .collect();
        assert!(estimate_rigid_svd(&CorrespondenceSet::new(line)).is_err());
    }

    #[test]
    fn reflection_branch_keeps_proper_rotation() {
        // Mirror images of a coplanar triangle push the SVD toward det = -1.
        let data = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let pairs = data
            .iter()
            .map(|d| (Point3::new(d.x, -d.y, d.z), *d))
            .collect();
        let t = estimate_rigid_svd(&CorrespondenceSet::new(pairs)).unwrap();
        assert_relative_eq!(t.rotation.determinant(), 1.0, epsilon = 1e-9);
        assert!(t.is_valid(1e-9));
    }

    #[test]
    fn geodesic_angle_matches_acos() {
        for ang in [0.0, 1e-7, 0.3, 1.5, 3.0, PI] {
            let r = RigidTransform::from_axis_angle(
                Vector3::new(1.0, 2.0, -0.5),
                ang,
                Vector3::zeros(),
            );
            assert!((geodesic_angle(&r.rotation) - ang).abs() < 1e-12, "{ang}");
        }
        let r = RigidTransform::from_axis_angle(Vector3::x(), 0.8, Vector3::zeros());
        let via_acos = ((r.rotation.trace() - 1.0) / 2.0).acos();
        assert_relative_eq!(geodesic_angle(&r.rotation), via_acos, epsilon = 1e-12);
    }

    #[test]
    fn orthonormalize_fixes_drift() {
        let mut r = Rotation3::from_euler_angles(0.1, 0.2, 0.3).into_inner();
        r[(0, 1)] += 1e-6;
        let o = orthonormalize(&r);
        assert!((o.transpose() * o - Matrix3::identity()).amax() < 1e-12);
        assert_relative_eq!(o.determinant(), 1.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_transform() -> impl Strategy<Value = RigidTransform> {
            (
                prop::array::uniform3(-1.0f64..1.0),
                0.0f64..3.1,
                prop::array::uniform3(-20.0f64..20.0),
            )
                .prop_filter("axis", |(a, _, _)| Vector3::from(*a).norm() > 1e-3)
                .prop_map(|(a, ang, t)| {
                    RigidTransform::from_axis_angle(Vector3::from(a), ang, Vector3::from(t))
                })
        }

        fn arb_points(min: usize) -> impl Strategy<Value = Vec<Point3>> {
            prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), min..40).prop_map(|v| {
                v.into_iter()
                    .map(|a| Point3::from(Vector3::from(a)))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn svd_exact_on_noiseless(t in arb_transform(), pts in arb_points(3)) {
                let c = CorrespondenceSet::new(pts.iter().map(|d| (t.apply(d), *d)).collect());
                // Near-collinear draws are rejected, which is fine.
                if let Ok(est) = estimate_rigid_svd(&c) {
                    prop_assert!(rotation_distance(&est.rotation, &t.rotation) < 1e-9);
                    prop_assert!((est.translation - t.translation).norm() < 1e-9);
                    prop_assert!((est.rotation.determinant() - 1.0).abs() < 1e-9);
                }
            }

            #[test]
            fn svd_permutation_invariant(t in arb_transform(), pts in arb_points(4), seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                let pairs: Vec<_> = pts.iter().map(|d| (t.apply(d), *d)).collect();
                let mut shuffled = pairs.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                if let (Ok(a), Ok(b)) = (
                    estimate_rigid_svd(&CorrespondenceSet::new(pairs)),
                    estimate_rigid_svd(&CorrespondenceSet::new(shuffled)),
                ) {
                    prop_assert!((a.rotation - b.rotation).amax() < 1e-9);
                    prop_assert!((a.translation - b.translation).norm() < 1e-9);
                }
            }

            #[test]
            fn apply_preserves_distances(t in arb_transform(), pts in arb_points(2)) {
                for w in pts.windows(2) {
                    let before = (w[0] - w[1]).norm();
                    let after = (t.apply(&w[0]) - t.apply(&w[1])).norm();
                    prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
                }
            }
        }
    }
}
