//! Intrinsic Shape Signatures keypoint detection.
//!
//! A point is a candidate when the eigenvalues of its local covariance
//! (sorted λ1 ≥ λ2 ≥ λ3 ≥ 0) satisfy λ2/λ1 < γ21 and λ3/λ2 < γ32; saliency is
//! λ3. Non-maximum suppression keeps a candidate only if it strictly
//! dominates every other candidate within the suppression radius.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SpatialIndex};

/// Parameters for ISS keypoint extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IssParams {
    /// Neighborhood radius for the local covariance, in meters.
    pub salient_radius: f64,
    /// Non-maximum suppression radius, in meters.
    pub non_max_radius: f64,
    /// Upper bound (exclusive) on λ2/λ1.
    pub gamma_21: f64,
    /// Upper bound (exclusive) on λ3/λ2.
    pub gamma_32: f64,
    /// Minimum neighbor count (excluding the point itself) for candidacy.
    pub min_neighbors: usize,
}

impl Default for IssParams {
    fn default() -> Self {
        Self {
            salient_radius: 0.2,
            non_max_radius: 0.2,
            gamma_21: 0.95,
            gamma_32: 0.95,
            min_neighbors: 5,
        }
    }
}

impl IssParams {
    pub fn validate(&self) -> Result<()> {
        if self.salient_radius <= 0.0 || self.non_max_radius <= 0.0 {
            return Err(Error::InvalidParameter("ISS radii must be positive".into()));
        }
        for (name, g) in [("gamma_21", self.gamma_21), ("gamma_32", self.gamma_32)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be in (0, 1] (got {g})"
                )));
            }
        }
        if self.min_neighbors < 1 {
            return Err(Error::InvalidParameter(
                "min_neighbors must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Detected keypoints, sorted by descending saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    /// Indices into the source cloud.
    pub indices: Vec<usize>,
    /// Positions, aligned with `indices`.
    pub positions: Vec<Point3>,
    /// Saliency (λ3 of the local covariance), aligned with `indices`.
    pub saliency: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// All keypoints of a cloud with uniform zero saliency; used by the dense
    /// baseline mode that bypasses ISS selection.
    pub fn all_points(cloud: &PointCloud) -> Self {
        Self {
            indices: (0..cloud.len()).collect(),
            positions: cloud.points().to_vec(),
            saliency: vec![0.0; cloud.len()],
        }
    }
}

/// Unweighted covariance of all points within `radius` of point `center_idx`
/// (the center included), taken about the neighborhood mean with the
/// population convention. Also returns the neighbor count excluding the
/// center.
pub fn local_covariance(
    cloud: &PointCloud,
    index: &SpatialIndex,
    center_idx: usize,
    radius: f64,
) -> Result<(Matrix3<f64>, usize)> {
    let center = &cloud.points()[center_idx];
    let hits = index.radius_search(center, radius)?;

    let mut mean = nalgebra::Vector3::zeros();
    for (i, _) in &hits {
        mean += cloud.points()[*i].to_vector();
    }
    mean /= hits.len() as f64;

    let mut cov = Matrix3::zeros();
    for (i, _) in &hits {
        let d = cloud.points()[*i].to_vector() - mean;
        cov += d * d.transpose();
    }
    cov /= hits.len() as f64;

    Ok((cov, hits.len() - 1))
}

/// Eigenvalues of a symmetric matrix, sorted descending and clamped at zero.
pub(crate) fn sorted_eigenvalues(cov: &Matrix3<f64>) -> [f64; 3] {
    let eig = cov.symmetric_eigen();
    let mut vals = [
        eig.eigenvalues[0].max(0.0),
        eig.eigenvalues[1].max(0.0),
        eig.eigenvalues[2].max(0.0),
    ];
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

fn passes_ratio_tests(vals: &[f64; 3], params: &IssParams) -> bool {
    let [l1, l2, l3] = *vals;
    if l1 <= 0.0 || l2 <= 0.0 {
        return false;
    }
    l2 / l1 < params.gamma_21 && l3 / l2 < params.gamma_32
}

/// Extracts ISS keypoints from a preprocessed cloud.
pub fn extract_iss_keypoints(cloud: &PointCloud, params: &IssParams) -> Result<KeypointSet> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = SpatialIndex::build(cloud);

    // Candidate pass: eigenvalue ratio tests per point.
    let candidates: Vec<(usize, f64)> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let (cov, neighbor_count) =
                local_covariance(cloud, &index, i, params.salient_radius).ok()?;
            if neighbor_count < params.min_neighbors {
                return None;
            }
            let vals = sorted_eigenvalues(&cov);
            passes_ratio_tests(&vals, params).then_some((i, vals[2]))
        })
        .collect();

    // Suppression pass: a candidate survives only if it strictly dominates
    // every candidate within non_max_radius (ties go to the lower index).
    let candidate_cloud = PointCloud::new(
        candidates
            .iter()
            .map(|(i, _)| cloud.points()[*i])
            .collect(),
    );
    let candidate_index = SpatialIndex::build(&candidate_cloud);
    let survivors: Vec<(usize, f64)> = candidates
        .par_iter()
        .enumerate()
        .filter_map(|(ci, &(idx, saliency))| {
            let hits = candidate_index
                .radius_search(&cloud.points()[idx], params.non_max_radius)
                .expect("radius validated");
            for (other_ci, _) in hits {
                if other_ci == ci {
                    continue;
                }
                let (other_idx, other_saliency) = candidates[other_ci];
                let dominated = other_saliency > saliency
                    || (other_saliency == saliency && other_idx < idx);
                if dominated {
                    return None;
                }
            }
            Some((idx, saliency))
        })
        .collect();

    let mut ordered = survivors;
    ordered.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    Ok(KeypointSet {
        indices: ordered.iter().map(|(i, _)| *i).collect(),
        positions: ordered.iter().map(|(i, _)| cloud.points()[*i]).collect(),
        saliency: ordered.iter().map(|(_, s)| *s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn single_point_neighborhood_is_zero_covariance() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let index = SpatialIndex::build(&cloud);
        let (cov, count) = local_covariance(&cloud, &index, 0, 0.5).unwrap();
        assert_eq!(count, 0);
        assert_relative_eq!(cov, Matrix3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn five_point_cross_covariance_matches_hand_computation() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
        ]);
        let index = SpatialIndex::build(&cloud);
        let (cov, count) = local_covariance(&cloud, &index, 0, 1.5).unwrap();
        assert_eq!(count, 4);
        // Population covariance over 5 points: diag(2/5, 2/5, 0).
        let expected = Matrix3::from_diagonal(&Vector3::new(0.4, 0.4, 0.0));
        assert_relative_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_conjugates_under_rotation() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let pts: Vec<Point3> = (0..40)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.01..0.01),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts.clone());
        let index = SpatialIndex::build(&cloud);
        let (cov, _) = local_covariance(&cloud, &index, 0, 10.0).unwrap();

        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, -0.5), 1.1);
        let rotated = PointCloud::new(pts.iter().map(|p| t.apply_point(p)).collect());
        let rindex = SpatialIndex::build(&rotated);
        let (rcov, _) = local_covariance(&rotated, &rindex, 0, 10.0).unwrap();

        let expected = t.rotation * cov * t.rotation.transpose();
        assert_relative_eq!(rcov, expected, epsilon = 1e-10);
    }

    fn flat_grid(n: usize, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn flat_grid_interior_has_no_keypoints() {
        let spacing = 0.05;
        let n = 30;
        let cloud = flat_grid(n, spacing);
        let params = IssParams::default();
        let keypoints = extract_iss_keypoints(&cloud, &params).unwrap();

        let extent = (n - 1) as f64 * spacing;
        let margin = params.salient_radius;
        for (&idx, p) in keypoints.indices.iter().zip(&keypoints.positions) {
            let interior = p.x > margin
                && p.x < extent - margin
                && p.y > margin
                && p.y < extent - margin;
            assert!(!interior, "interior point {idx} at {p:?} became a keypoint");
        }

        // Direct eigen evaluation confirms interior points fail candidacy.
        let index = SpatialIndex::build(&cloud);
        for (i, p) in cloud.points().iter().enumerate() {
            let interior = p.x > margin
                && p.x < extent - margin
                && p.y > margin
                && p.y < extent - margin;
            if !interior {
                continue;
            }
            let (cov, _) = local_covariance(&cloud, &index, i, params.salient_radius).unwrap();
            let vals = sorted_eigenvalues(&cov);
            assert!(vals[1] / vals[0] >= params.gamma_21);
        }
    }

    fn cube_corner_patch(spacing: f64, n: usize) -> PointCloud {
        // Three orthogonal faces meeting at the origin.
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (i as f64 * spacing, j as f64 * spacing);
                pts.push(Point3::new(a, b, 0.0));
                if i > 0 {
                    pts.push(Point3::new(0.0, b, a));
                    pts.push(Point3::new(b, 0.0, a));
                }
            }
        }
        pts.sort_by(|p, q| {
            (p.x, p.y, p.z)
                .partial_cmp(&(q.x, q.y, q.z))
                .unwrap()
        });
        pts.dedup_by(|a, b| a == b);
        PointCloud::new(pts)
    }

    #[test]
    fn cube_corner_point_is_a_candidate() {
        let cloud = cube_corner_patch(0.04, 12);
        let params = IssParams::default();
        let index = SpatialIndex::build(&cloud);
        let corner = cloud
            .points()
            .iter()
            .position(|p| *p == Point3::new(0.0, 0.0, 0.0))
            .unwrap();
        let (cov, count) = local_covariance(&cloud, &index, corner, params.salient_radius).unwrap();
        assert!(count >= params.min_neighbors);
        let vals = sorted_eigenvalues(&cov);
        assert!(vals[1] / vals[0] < params.gamma_21);
        assert!(vals[2] / vals[1] < params.gamma_32);
    }

    #[test]
    fn isolated_points_are_never_keypoints() {
        let mut pts = vec![Point3::new(100.0, 100.0, 100.0)];
        pts.extend(cube_corner_patch(0.04, 12).points().iter().copied());
        let cloud = PointCloud::new(pts);
        let keypoints = extract_iss_keypoints(&cloud, &IssParams::default()).unwrap();
        assert!(!keypoints.indices.contains(&0));
    }

    fn random_blob_cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..15 {
            let center = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let scale = Vector3::new(
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.02..0.3),
            );
            for _ in 0..80 {
                pts.push(Point3::new(
                    center.x + rng.gen_range(-1.0..1.0) * scale.x,
                    center.y + rng.gen_range(-1.0..1.0) * scale.y,
                    center.z + rng.gen_range(-1.0..1.0) * scale.z,
                ));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn keypoint_selection_is_rigid_invariant() {
        let cloud = random_blob_cloud(33);
        let params = IssParams::default();
        let base = extract_iss_keypoints(&cloud, &params).unwrap();
        let base_set: std::collections::BTreeSet<usize> = base.indices.iter().copied().collect();
        assert!(!base_set.is_empty());

        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..20 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut t = RigidTransform::from_axis_angle(axis, rng.gen_range(-3.0..3.0));
            t.translation = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let moved = crate::geometry::apply_transform(&cloud, &t);
            let kp = extract_iss_keypoints(&moved, &params).unwrap();
            let kp_set: std::collections::BTreeSet<usize> = kp.indices.iter().copied().collect();
            assert_eq!(base_set, kp_set);
        }
    }

    #[test]
    fn suppression_leaves_only_local_maxima() {
        let cloud = random_blob_cloud(5);
        let params = IssParams::default();
        let kp = extract_iss_keypoints(&cloud, &params).unwrap();
        for i in 0..kp.len() {
            for j in 0..kp.len() {
                if i == j {
                    continue;
                }
                let d = kp.positions[i].distance(&kp.positions[j]);
                if d <= params.non_max_radius {
                    panic!(
                        "keypoints {} and {} are {:.3} m apart, within the suppression radius",
                        kp.indices[i], kp.indices[j], d
                    );
                }
            }
        }
        // Sorted by descending saliency.
        for w in kp.saliency.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn keypoints_pass_ratio_tests_when_reevaluated() {
        let cloud = random_blob_cloud(12);
        let params = IssParams::default();
        let kp = extract_iss_keypoints(&cloud, &params).unwrap();
        let index = SpatialIndex::build(&cloud);
        for &i in &kp.indices {
            let (cov, count) = local_covariance(&cloud, &index, i, params.salient_radius).unwrap();
            assert!(count >= params.min_neighbors);
            let vals = sorted_eigenvalues(&cov);
            assert!(passes_ratio_tests(&vals, &params));
        }
    }

    #[test]
    fn keypoint_count_non_increasing_in_suppression_radius() {
        let cloud = random_blob_cloud(77);
        let mut previous = usize::MAX;
        for radius in [0.1, 0.2, 0.3, 0.5] {
            let params = IssParams {
                non_max_radius: radius,
                ..Default::default()
            };
            let count = extract_iss_keypoints(&cloud, &params).unwrap().len();
            assert!(count <= previous);
            previous = count;
        }
    }
}
