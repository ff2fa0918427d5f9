//! Exact k-d tree over a point cloud.
//!
//! Queries return exactly what a brute-force scan would, sorted by ascending
//! distance with ties broken by ascending original index. The tree is built
//! once per cloud with median splits and never mutated.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable exact spatial index over the points of a [`PointCloud`].
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    // Permutation of original indices, partitioned by the tree structure.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

/// Builds a [`SpatialIndex`] over all points of the cloud.
pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::build(cloud)
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points = cloud.points().to_vec();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = if points.is_empty() {
            0
        } else {
            let n = points.len();
            build_recursive(&points, &mut order, &mut nodes, 0, n)
        };
        Self {
            points,
            order,
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All points within `radius` of `center`, sorted by ascending distance,
    /// ties by ascending index.
    pub fn radius_search(&self, center: &Point3, radius: f64) -> Result<Vec<(usize, f64)>> {
        if radius <= 0.0 {
            return Err(Error::NonPositiveRadius(radius));
        }
        let mut hits: Vec<(usize, f64)> = Vec::new();
        if !self.points.is_empty() {
            self.radius_recursive(self.root, center, radius * radius, &mut hits);
        }
        hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        for h in &mut hits {
            h.1 = h.1.sqrt();
        }
        Ok(hits)
    }

    /// The `k` nearest points to `center` (fewer if the cloud is smaller),
    /// sorted by ascending distance, ties by ascending index.
    pub fn knn_search(&self, center: &Point3, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::ZeroNeighborCount);
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if !self.points.is_empty() {
            self.knn_recursive(self.root, center, k, &mut best);
        }
        Ok(best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect())
    }

    fn radius_recursive(
        &self,
        node: usize,
        center: &Point3,
        radius_sq: f64,
        hits: &mut Vec<(usize, f64)>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let d2 = center.distance_squared(&self.points[idx as usize]);
                    if d2 <= radius_sq {
                        hits.push((idx as usize, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = coord(center, *axis) - value;
                let (near, far) = if diff <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.radius_recursive(near, center, radius_sq, hits);
                if diff * diff <= radius_sq {
                    self.radius_recursive(far, center, radius_sq, hits);
                }
            }
        }
    }

    fn knn_recursive(&self, node: usize, center: &Point3, k: usize, best: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let d2 = center.distance_squared(&self.points[idx as usize]);
                    let cand = (d2, idx as usize);
                    if best.len() < k {
                        let pos = best.partition_point(|e| *e < cand);
                        best.insert(pos, cand);
                    } else if cand < *best.last().unwrap() {
                        let pos = best.partition_point(|e| *e < cand);
                        best.insert(pos, cand);
                        best.pop();
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = coord(center, *axis) - value;
                let (near, far) = if diff <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.knn_recursive(near, center, k, best);
                // Visit the far side while it can still contain a closer point
                // or an equal-distance point with a lower index.
                if best.len() < k || diff * diff <= best.last().unwrap().0 {
                    self.knn_recursive(far, center, k, best);
                }
            }
        }
    }
}

fn coord(p: &Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

fn build_recursive(
    points: &[Point3],
    order: &mut [u32],
    nodes: &mut Vec<Node>,
    start: usize,
    end: usize,
) -> usize {
    let count = end - start;
    if count <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }

    // Split on the widest axis at the median element.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &idx in &order[start..end] {
        let p = &points[idx as usize];
        for a in 0..3 {
            let v = coord(p, a);
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let mut axis = 0;
    for a in 1..3 {
        if hi[a] - lo[a] > hi[axis] - lo[axis] {
            axis = a;
        }
    }

    let mid = count / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        coord(&points[a as usize], axis)
            .partial_cmp(&coord(&points[b as usize], axis))
            .unwrap()
            .then(a.cmp(&b))
    });
    let split_value = coord(&points[order[start + mid] as usize], axis);

    let left = build_recursive(points, order, nodes, start, start + mid);
    let right = build_recursive(points, order, nodes, start + mid, end);
    nodes.push(Node::Split {
        axis,
        value: split_value,
        left,
        right,
    });
    nodes.len() - 1
}
