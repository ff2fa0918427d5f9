//! Scan pre-processing: voxel downsampling, PCA normal estimation, and
//! radius outlier removal, applied in that order.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SpatialIndex};

/// Minimum surviving points for [`preprocess`] to consider a scan usable.
pub const MIN_PREPROCESSED_POINTS: usize = 10;

/// Parameters for the pre-processing stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessParams {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Cap on neighborhood size for normal estimation.
    pub normal_neighbors: usize,
    /// Neighborhood radius for normal estimation, in meters.
    pub normal_radius: f64,
    /// Radius for outlier counting, in meters.
    pub outlier_radius: f64,
    /// Minimum number of other points within `outlier_radius` to keep a point.
    pub outlier_min_neighbors: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            normal_neighbors: 30,
            normal_radius: 0.3,
            outlier_radius: 0.3,
            outlier_min_neighbors: 3,
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "voxel_size must be positive (got {})",
                self.voxel_size
            )));
        }
        if self.normal_radius <= 0.0 || self.outlier_radius <= 0.0 {
            return Err(Error::InvalidParameter("radii must be positive".into()));
        }
        if self.normal_neighbors < 1 {
            return Err(Error::InvalidParameter(
                "normal_neighbors must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Collapses the cloud onto a voxel grid anchored at its minimum corner,
/// emitting one centroid per occupied cell. Output is ordered by ascending
/// (x, y, z) cell index, and is invariant to input permutation.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if voxel_size <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "voxel_size must be positive (got {voxel_size})"
        )));
    }
    if cloud.is_empty() {
        return Ok(PointCloud::new(vec![]));
    }

    let mut min = [f64::INFINITY; 3];
    for p in cloud.points() {
        min[0] = min[0].min(p.x);
        min[1] = min[1].min(p.y);
        min[2] = min[2].min(p.z);
    }

    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = (
            ((p.x - min[0]) / voxel_size).floor() as i64,
            ((p.y - min[1]) / voxel_size).floor() as i64,
            ((p.z - min[2]) / voxel_size).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }

    let in_normals = cloud.normals();
    let mut points = Vec::with_capacity(cells.len());
    let mut normals = in_normals.map(|_| Vec::with_capacity(cells.len()));

    for members in cells.values() {
        // Accumulate in coordinate order so the centroid does not depend on
        // the input ordering of the cloud.
        let mut sorted: Vec<usize> = members.clone();
        sorted.sort_by(|&a, &b| {
            let (pa, pb) = (&cloud.points()[a], &cloud.points()[b]);
            let ka = member_key(pa, in_normals.map(|n| n[a]));
            let kb = member_key(pb, in_normals.map(|n| n[b]));
            ka.partial_cmp(&kb).unwrap()
        });

        let mut sum = Vector3::zeros();
        let mut nsum = Vector3::zeros();
        for &i in &sorted {
            sum += cloud.points()[i].to_vector();
            if let Some(ns) = in_normals {
                nsum += ns[i];
            }
        }
        points.push(Point3::from_vector(sum / sorted.len() as f64));
        if let Some(out) = normals.as_mut() {
            let norm = nsum.norm();
            out.push(if norm < 1e-12 {
                Vector3::zeros()
            } else {
                nsum / norm
            });
        }
    }

    match normals {
        Some(ns) => PointCloud::with_normals(points, ns),
        None => Ok(PointCloud::new(points)),
    }
}

fn member_key(p: &Point3, n: Option<Vector3<f64>>) -> [f64; 6] {
    match n {
        Some(n) => [p.x, p.y, p.z, n.x, n.y, n.z],
        None => [p.x, p.y, p.z, 0.0, 0.0, 0.0],
    }
}

/// Estimates a unit normal per point from the PCA of its neighborhood
/// (up to `normal_neighbors` nearest points within `normal_radius`,
/// the point itself included).
///
/// Points with fewer than 3 neighbors get the all-zero sentinel normal.
/// Orientation is fixed so the +z component is non-negative (ties resolved
/// toward +y, then +x).
pub fn estimate_normals(cloud: &PointCloud, params: &PreprocessParams) -> Result<PointCloud> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = SpatialIndex::build(cloud);

    let normals: Vec<Vector3<f64>> = cloud
        .points()
        .par_iter()
        .map(|p| {
            let hits = index
                .radius_search(p, params.normal_radius)
                .expect("radius validated");
            // `hits` includes the query point itself at distance 0.
            if hits.len() < 4 {
                return Vector3::zeros();
            }
            let take = hits.len().min(params.normal_neighbors.max(1) + 1);
            let neighborhood = &hits[..take];

            let mut mean = Vector3::zeros();
            for (i, _) in neighborhood {
                mean += cloud.points()[*i].to_vector();
            }
            mean /= neighborhood.len() as f64;
            let mut cov = Matrix3::zeros();
            for (i, _) in neighborhood {
                let d = cloud.points()[*i].to_vector() - mean;
                cov += d * d.transpose();
            }
            cov /= neighborhood.len() as f64;

            orient(smallest_eigenvector(&cov))
        })
        .collect();

    PointCloud::with_normals(cloud.points().to_vec(), normals)
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix.
pub(crate) fn smallest_eigenvector(cov: &Matrix3<f64>) -> Vector3<f64> {
    let eig = cov.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let v = eig.eigenvectors.column(min_idx).into_owned();
    let norm = v.norm();
    if norm < 1e-12 {
        Vector3::zeros()
    } else {
        v / norm
    }
}

fn orient(n: Vector3<f64>) -> Vector3<f64> {
    let sign = if n.z != 0.0 {
        n.z.signum()
    } else if n.y != 0.0 {
        n.y.signum()
    } else if n.x != 0.0 {
        n.x.signum()
    } else {
        return Vector3::zeros();
    };
    n * sign
}

/// Keeps exactly the points that have at least `min_neighbors` other points
/// within `radius`; input order is preserved and normals carried along.
pub fn radius_outlier_removal(
    cloud: &PointCloud,
    radius: f64,
    min_neighbors: usize,
) -> Result<PointCloud> {
    if radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "outlier radius must be positive (got {radius})"
        )));
    }
    if cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let index = SpatialIndex::build(cloud);
    let keep: Vec<bool> = cloud
        .points()
        .par_iter()
        .map(|p| {
            let hits = index.radius_search(p, radius).expect("radius validated");
            hits.len().saturating_sub(1) >= min_neighbors
        })
        .collect();
    Ok(filter_cloud(cloud, &keep))
}

fn filter_cloud(cloud: &PointCloud, keep: &[bool]) -> PointCloud {
    let points: Vec<Point3> = cloud
        .points()
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    match cloud.normals() {
        Some(ns) => {
            let normals = ns
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(n, _)| *n)
                .collect();
            PointCloud::with_normals(points, normals).expect("filtered normals stay aligned")
        }
        None => PointCloud::new(points),
    }
}

/// Full pre-processing pipeline: downsample, estimate normals, remove
/// outliers, and drop any point whose normal could not be estimated. The
/// result carries a valid normal for every retained point.
pub fn preprocess(cloud: &PointCloud, params: &PreprocessParams) -> Result<PointCloud> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let down = voxel_downsample(cloud, params.voxel_size)?;
    let with_normals = estimate_normals(&down, params)?;
    let cleaned = radius_outlier_removal(
        &with_normals,
        params.outlier_radius,
        params.outlier_min_neighbors,
    )?;
    // Points flagged during normal estimation are unusable downstream.
    let valid: Vec<bool> = (0..cleaned.len())
        .map(|i| cleaned.valid_normal(i).is_some())
        .collect();
    let out = filter_cloud(&cleaned, &valid);

    if out.len() < MIN_PREPROCESSED_POINTS {
        return Err(Error::InsufficientStructure {
            points: out.len(),
            min: MIN_PREPROCESSED_POINTS,
        });
    }
    Ok(out)
}
