//! Core geometric types: points, clouds, rigid transforms, and the
//! closed-form rigid least-squares fit used by both RANSAC and ICP.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

mod kdtree;
mod ply;

pub use kdtree::SpatialIndex;
pub use ply::{load_ply, save_ply, PlyFormat};

/// Tolerance under which a stored normal counts as the invalid sentinel
/// (all-zero) rather than a unit vector.
pub const NORMAL_UNIT_TOL: f64 = 1e-6;

/// A 3D point with coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Euclidean distance to another point.
    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }
}

/// An ordered set of 3D points with optional per-point normals.
///
/// Normals, when present, are unit length within [`NORMAL_UNIT_TOL`], except
/// that an all-zero vector marks a point whose normal could not be estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    /// Cloud without normals.
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    /// Cloud with per-point normals; lengths must match and each normal must
    /// be unit length or the zero sentinel.
    pub fn with_normals(points: Vec<Point3>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::NormalsLengthMismatch {
                points: points.len(),
                normals: normals.len(),
            });
        }
        for (i, n) in normals.iter().enumerate() {
            let norm = n.norm();
            if norm != 0.0 && (norm - 1.0).abs() > NORMAL_UNIT_TOL {
                return Err(Error::NonUnitNormal { index: i, norm });
            }
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Normal of point `i`, or `None` if the cloud has no normals or the
    /// stored normal is the invalid sentinel.
    pub fn valid_normal(&self, i: usize) -> Option<Vector3<f64>> {
        let n = self.normals.as_ref()?[i];
        if n.norm() == 0.0 {
            None
        } else {
            Some(n)
        }
    }
}

/// A proper rigid motion: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Elementwise tolerance for orthonormality and determinant checks.
const ROTATION_TOL: f64 = 1e-9;

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let identity = Matrix3::identity();
        for r in 0..3 {
            for c in 0..3 {
                if (gram[(r, c)] - identity[(r, c)]).abs() > ROTATION_TOL {
                    return Err(Error::DegenerateGeometry(format!(
                        "rotation is not orthonormal (R'R deviates by {:.3e} at ({r},{c}))",
                        (gram[(r, c)] - identity[(r, c)]).abs()
                    )));
                }
            }
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::DegenerateGeometry(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about a unit axis by `angle` radians, zero translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner();
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `compose(b, a)` applies `a` first, then `b`.
    pub fn compose(b: &RigidTransform, a: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: b.rotation * a.rotation,
            translation: b.rotation * a.translation + b.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians (0 for identity).
    pub fn rotation_angle(&self) -> f64 {
        let c = (self.rotation.trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }
}

/// Applies a rigid transform to every point (and normal, if present).
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let points = cloud.points.iter().map(|p| t.apply_point(p)).collect();
    let normals = cloud
        .normals
        .as_ref()
        .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect());
    PointCloud { points, normals }
}

/// Least-squares rigid fit mapping `source[i]` onto `target[i]` (Kabsch/Umeyama
/// without scale). The reflection case is corrected by flipping the singular
/// vector of the smallest singular value, so the result is always a proper
/// rotation.
pub fn estimate_rigid_transform(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::InvalidParameter(format!(
            "correspondence lists differ in length ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::TooFewCorrespondences(source.len()));
    }
    let n = source.len() as f64;

    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for (s, t) in source.iter().zip(target) {
        mu_s += s.to_vector();
        mu_t += t.to_vector();
    }
    mu_s /= n;
    mu_t /= n;

    // Cross-covariance H = sum (t_i - mu_t)(s_i - mu_s)^T, plus the source
    // scatter used for the collinearity check.
    let mut h = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let sc = s.to_vector() - mu_s;
        let tc = t.to_vector() - mu_t;
        h += tc * sc.transpose();
        scatter += sc * sc.transpose();
    }

    let eig = scatter.symmetric_eigen();
    let mut evals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if evals[0] <= 0.0 || evals[1] <= 1e-12 * evals[0] {
        return Err(Error::DegenerateGeometry(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed to produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed to produce V^T".into()))?;

    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        // Flip the column of U paired with the smallest singular value.
        let mut min_idx = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[min_idx] {
                min_idx = i;
            }
        }
        let mut u_fixed = u;
        for r in 0..3 {
            u_fixed[(r, min_idx)] = -u_fixed[(r, min_idx)];
        }
        rotation = u_fixed * v_t;
    }

    let translation = mu_t - rotation * mu_s;
    RigidTransform::new(rotation, translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        RigidTransform::from_axis_angle(axis, angle).rotation
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_fit_for_equal_point_sets() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let t = estimate_rigid_transform(&pts, &pts).unwrap();
        assert_relative_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn recovers_injected_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let source = random_points(&mut rng, 12);
            let rotation = random_rotation(&mut rng);
            let translation = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let truth = RigidTransform::new(rotation, translation).unwrap();
            let target: Vec<Point3> = source.iter().map(|p| truth.apply_point(p)).collect();
            let est = estimate_rigid_transform(&source, &target).unwrap();
            assert_relative_eq!(est.rotation, truth.rotation, epsilon = 1e-9);
            assert_relative_eq!(est.translation, truth.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_correspondences_is_an_error() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            estimate_rigid_transform(&pts, &pts),
            Err(Error::TooFewCorrespondences(2))
        ));
    }

    #[test]
    fn collinear_source_is_degenerate() {
        let src: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let dst = src.clone();
        assert!(matches!(
            estimate_rigid_transform(&src, &dst),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn reflection_corrected_to_proper_rotation() {
        // Mirrored targets force the naive SVD product into a reflection.
        let source = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
        ];
        let target: Vec<Point3> = source
            .iter()
            .map(|p| Point3::new(p.x, p.y, -p.z))
            .collect();
        let t = estimate_rigid_transform(&source, &target).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn apply_identity_is_bitwise_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cloud = PointCloud::new(random_points(&mut rng, 100));
        let out = apply_transform(&cloud, &RigidTransform::identity());
        for (a, b) in cloud.points().iter().zip(out.points()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
    }

    #[test]
    fn pure_translation_moves_origin() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let t = RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        let out = apply_transform(&cloud, &t);
        assert_eq!(out.points()[0], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t1 = RigidTransform::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            )
            .unwrap();
            let t2 = RigidTransform::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            )
            .unwrap();
            let p = Point3::new(rng.gen(), rng.gen(), rng.gen());
            let once = RigidTransform::compose(&t2, &t1).apply_point(&p);
            let twice = t2.apply_point(&t1.apply_point(&p));
            assert_relative_eq!(once.to_vector(), twice.to_vector(), epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_round_trips_points() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let t = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(0.4, -2.0, 1.5),
        )
        .unwrap();
        let inv = t.inverse();
        for p in random_points(&mut rng, 50) {
            let back = inv.apply_point(&t.apply_point(&p));
            assert_relative_eq!(back.to_vector(), p.to_vector(), epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_is_invariant_under_common_rigid_motion() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let source = random_points(&mut rng, 15);
        let truth = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(1.0, -0.5, 2.0),
        )
        .unwrap();
        let target: Vec<Point3> = source.iter().map(|p| truth.apply_point(p)).collect();
        let g = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(-4.0, 2.5, 0.7),
        )
        .unwrap();

        let src_g: Vec<Point3> = source.iter().map(|p| g.apply_point(p)).collect();
        let tgt_g: Vec<Point3> = target.iter().map(|p| g.apply_point(p)).collect();

        let t_re = estimate_rigid_transform(&src_g, &tgt_g).unwrap();
        let expected = RigidTransform::compose(&RigidTransform::compose(&g, &truth), &g.inverse());
        assert_relative_eq!(t_re.rotation, expected.rotation, epsilon = 1e-8);
        assert_relative_eq!(t_re.translation, expected.translation, epsilon = 1e-8);
    }

    #[test]
    fn normals_validated_on_construction() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0)];
        assert!(PointCloud::with_normals(pts.clone(), vec![]).is_err());
        let bad = vec![Vector3::new(0.5, 0.0, 0.0)];
        assert!(matches!(
            PointCloud::with_normals(pts.clone(), bad),
            Err(Error::NonUnitNormal { .. })
        ));
        // Zero sentinel is allowed.
        assert!(PointCloud::with_normals(pts, vec![Vector3::zeros()]).is_ok());
    }
}
