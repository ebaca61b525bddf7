//! Point clouds, exact k-nearest-neighbour search, normalization into the unit
//! cube, per-point spacing and PCA normals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vec3;

/// Default neighbourhood size for PCA normal estimation.
pub const DEFAULT_NORMAL_K: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput("point cloud has no points"));
        }
        if positions.len() != colors.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteInput(format!("position of point {i}")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::invalid(format!("color of point {i} outside [0,1]")));
        }
        Ok(Self {
            positions,
            colors,
            normals: None,
        })
    }

    pub fn with_normals(mut self, normals: Vec<[f64; 3]>) -> Result<Self> {
        if normals.len() != self.positions.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.positions.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !((vec3::norm(*n) - 1.0).abs() <= 1e-6))
        {
            return Err(Error::invalid(format!("normal of point {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    /// Sub-cloud made of the given point ids, in the given order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let positions = ids.iter().map(|&i| self.positions[i]).collect();
        let colors = ids.iter().map(|&i| self.colors[i]).collect();
        let mut out = Self::new(positions, colors)?;
        out.normals = self
            .normals
            .as_ref()
            .map(|n| ids.iter().map(|&i| n[i]).collect());
        Ok(out)
    }
}

/// Center/scale pair mapping a cloud into `[-1, 1]^3` and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub const IDENTITY: Self = Self {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        vec3::scale(vec3::sub(p, self.center), 1.0 / self.scale)
    }

    pub fn denormalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        vec3::add(vec3::scale(p, self.scale), self.center)
    }
}

/// Bounding-box center and largest half-extent; positions become `(p - c) / s`.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.positions() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [
        (hi[0] + lo[0]) / 2.0,
        (hi[1] + lo[1]) / 2.0,
        (hi[2] + lo[2]) / 2.0,
    ];
    let scale = (0..3).map(|a| hi[a] - center[a]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let t = NormalizationTransform { center, scale };
    let positions = cloud
        .positions()
        .iter()
        .map(|&p| t.normalize_point(p))
        .collect();
    let out = PointCloud {
        positions,
        colors: cloud.colors.clone(),
        normals: cloud.normals.clone(),
    };
    Ok((out, t))
}

const LEAF_SIZE: usize = 8;

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

/// Exact k-d tree over a snapshot of cloud positions.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn build_index(cloud: &PointCloud) -> Result<NeighborIndex> {
    NeighborIndex::from_positions(cloud.positions().to_vec())
}

impl NeighborIndex {
    pub fn from_positions(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("cannot index an empty cloud"));
        }
        let mut index = NeighborIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        index.build(0, index.points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap();
        if hi[axis] - lo[axis] <= 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            points[i][axis].total_cmp(&points[j][axis]).then(i.cmp(&j))
        });
        let value = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query`, ascending by distance; equal
    /// distances are ordered by point id.
    pub fn k_nearest(&self, query: [f64; 3], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        if k > self.points.len() {
            return Err(Error::InsufficientPoints {
                needed: k,
                available: self.points.len(),
            });
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(0, query, k, &mut heap);
        }
        let found = heap.into_sorted_vec();
        Ok((
            found.iter().map(|c| c.id).collect(),
            found.iter().map(|c| c.d2.sqrt()).collect(),
        ))
    }

    fn search(&self, node: usize, q: [f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let d = vec3::sub(self.points[id], q);
                    let cand = Candidate {
                        d2: vec3::dot(d, d),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                let plane_d2 = diff * diff;
                if heap.len() < k || plane_d2 <= heap.peek().unwrap().d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Distance from every point to its nearest other point. Zero distances from
/// exact duplicates are replaced by the smallest nonzero entry.
pub fn min_neighbor_distance(cloud: &PointCloud, index: &NeighborIndex) -> Result<Vec<f64>> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            available: n,
        });
    }
    let mut dists = cloud
        .positions()
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let (ids, ds) = index.k_nearest(p, 2)?;
            Ok(ids
                .iter()
                .zip(&ds)
                .find(|(&j, _)| j != i)
                .map(|(_, &d)| d)
                .unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let smallest = dists
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Err(Error::DegenerateCloud);
    }
    for d in dists.iter_mut().filter(|d| **d <= 0.0) {
        *d = smallest;
    }
    Ok(dists)
}

/// Unit normals from the plane fit to each point's `k`-neighbourhood. The sign
/// is whatever the eigen solver returns.
pub fn estimate_normals(cloud: &PointCloud, index: &NeighborIndex, k: usize) -> Result<Vec<[f64; 3]>> {
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    if k > cloud.len() {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: cloud.len(),
        });
    }
    cloud
        .positions()
        .par_iter()
        .map(|&p| {
            let (ids, _) = index.k_nearest(p, k)?;
            let pts: Vec<[f64; 3]> = ids.iter().map(|&j| index.points()[j]).collect();
            Ok(plane_normal(&pts))
        })
        .collect()
}

/// Smallest-eigenvalue eigenvector of the neighbourhood covariance.
pub fn plane_normal(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        vec3::axpy(&mut mean, 1.0 / n, *p);
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = vec3::sub(*p, mean);
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c] / n;
            }
        }
    }
    let (values, vectors) = symmetric_eigen3(cov);
    let mut best = 0;
    for i in 1..3 {
        if values[i] < values[best] {
            best = i;
        }
    }
    let v = [vectors[0][best], vectors[1][best], vectors[2][best]];
    vec3::normalize(v)
}

/// Cyclic Jacobi eigen decomposition of a symmetric 3x3 matrix. Returns the
/// eigenvalues and a matrix whose columns are the matching eigenvectors.
pub fn symmetric_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = vec3::identity3();
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- J^T A J with the rotation in the (p, q) plane.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(
            xs.iter().map(|&x| [x, 0.0, 0.0]).collect(),
            vec![[0.5; 3]; xs.len()],
        )
        .unwrap()
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(
            PointCloud::new(vec![], vec![]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            NeighborIndex::from_positions(vec![]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn singleton_index() {
        let idx = build_index(&line(&[3.0])).unwrap();
        let (ids, ds) = idx.k_nearest([-5.0, 2.0, 1.0], 1).unwrap();
        assert_eq!(ids, vec![0]);
        assert!(ds[0] > 0.0);
    }

    #[test]
    fn collinear_two_nearest() {
        let idx = build_index(&line(&[0.0, 1.0, 2.0, 3.0])).unwrap();
        let (ids, ds) = idx.k_nearest([0.0; 3], 2).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(ds, vec![0.0, 1.0]);
        let (ids, ds) = idx.k_nearest([2.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((ids[0], ds[0]), (2, 0.0));
    }

    #[test]
    fn too_many_neighbours_requested() {
        let idx = build_index(&line(&[0.0, 1.0])).unwrap();
        assert!(matches!(
            idx.k_nearest([0.0; 3], 3),
            Err(Error::InsufficientPoints { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn duplicates_come_first() {
        let mut xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        xs.push(1.0);
        let idx = build_index(&line(&xs)).unwrap();
        let (ids, ds) = idx.k_nearest([1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(&ids[..2], &[10, 40]);
        assert_eq!(&ds[..2], &[0.0, 0.0]);
        assert!(ds[2] > 0.0);
    }

    #[test]
    fn normalization_examples() {
        let c = PointCloud::new(vec![[0.0; 3], [2.0, 0.0, 0.0]], vec![[0.0; 3]; 2]).unwrap();
        let (n, t) = normalize_cloud(&c).unwrap();
        assert_eq!(t.center, [1.0, 0.0, 0.0]);
        assert_eq!(t.scale, 1.0);
        assert_eq!(n.positions(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);

        let c = PointCloud::new(vec![[-1.0; 3], [1.0; 3]], vec![[0.0; 3]; 2]).unwrap();
        let (n, t) = normalize_cloud(&c).unwrap();
        assert_eq!(t, NormalizationTransform::IDENTITY);
        assert_eq!(n.positions(), c.positions());
    }

    #[test]
    fn degenerate_normalization() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]; 3], vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(normalize_cloud(&c), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn min_distance_examples() {
        let c = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(min_neighbor_distance(&c, &build_index(&c).unwrap()).unwrap(), vec![1.0; 4]);
        let c = line(&[0.0, 1.0, 10.0]);
        assert_eq!(
            min_neighbor_distance(&c, &build_index(&c).unwrap()).unwrap(),
            vec![1.0, 1.0, 9.0]
        );
        let c = line(&[0.0]);
        assert!(matches!(
            min_neighbor_distance(&c, &build_index(&c).unwrap()),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn duplicate_distance_replaced() {
        let c = line(&[0.0, 0.5, 0.5, 3.0]);
        let d = min_neighbor_distance(&c, &build_index(&c).unwrap()).unwrap();
        assert_eq!(d, vec![0.5, 0.5, 0.5, 2.5]);
    }

    #[test]
    fn three_point_normal_is_cross_product() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.2, 0.1], [0.3, 1.0, -0.4]];
        let c = PointCloud::new(pts.clone(), vec![[0.0; 3]; 3]).unwrap();
        let n = estimate_normals(&c, &build_index(&c).unwrap(), 3).unwrap();
        let expect = vec3::normalize(vec3::cross(
            vec3::sub(pts[1], pts[0]),
            vec3::sub(pts[2], pts[0]),
        ));
        for ni in n {
            assert!((vec3::dot(ni, expect).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_k_rejected() {
        let c = line(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            estimate_normals(&c, &build_index(&c).unwrap(), 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn collinear_neighbourhood_gives_orthogonal_unit_normal() {
        let c = line(&[0.0, 1.0, 2.0, 3.0]);
        let n = estimate_normals(&c, &build_index(&c).unwrap(), 3).unwrap();
        for ni in &n {
            assert!((vec3::norm(*ni) - 1.0).abs() < 1e-12);
            assert!(ni[0].abs() < 1e-12);
        }
        assert_eq!(n, estimate_normals(&c, &build_index(&c).unwrap(), 3).unwrap());
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = [[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]];
        let (vals, v) = symmetric_eigen3(a);
        for c in 0..3 {
            let col = [v[0][c], v[1][c], v[2][c]];
            let av = vec3::mat3_vec(&a, col);
            for r in 0..3 {
                assert!((av[r] - vals[c] * col[r]).abs() < 1e-12);
            }
        }
    }
}
