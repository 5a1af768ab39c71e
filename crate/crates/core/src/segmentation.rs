//! Sensor-side geometric segmentation of depth data.

use std::collections::{HashMap, VecDeque};

use nalgebra::Vector3;

use crate::geometry::{CameraModel, Pixel};
use crate::scalar::Real;
use crate::spatial::KdTree;

/// Coordinate frame a segment is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    #[default]
    Camera,
    World,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T: Real> {
    pub xyz: Vector3<T>,
    /// Packed `0x00RRGGBB`.
    pub rgb: u32,
    pub confidence: f32,
    pub semantic_id: u32,
}

impl<T: Real> Point<T> {
    pub fn new(xyz: Vector3<T>, class_id: u16) -> Self {
        Self { xyz, rgb: 0, confidence: 1.0, semantic_id: class_id as u32 }
    }
}

/// Cluster of 3D points belonging to one object instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudSegment<T: Real> {
    pub points: Vec<Point<T>>,
    pub frame: Frame,
    pub timestamp_us: u64,
    pub sensor_id: u16,
    pub class_id: u16,
}

impl<T: Real> PointCloudSegment<T> {
    pub fn empty(class_id: u16, sensor_id: u16, timestamp_us: u64, frame: Frame) -> Self {
        Self { points: Vec::new(), frame, timestamp_us, sensor_id, class_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<T>> {
        self.points.iter().map(|p| p.xyz).collect()
    }

    pub fn centroid(&self) -> Option<Vector3<T>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.xyz);
        Some(sum / T::lit(self.points.len() as f64))
    }

    /// Same metadata, different points.
    pub fn with_points(&self, points: Vec<Point<T>>) -> Self {
        Self { points, ..self.clone() }
    }

    /// Keeps at most `max` points, chosen at evenly spaced indices.
    pub fn subsample(&self, max: usize) -> Self {
        let n = self.points.len();
        if n <= max {
            return self.clone();
        }
        let points = (0..max).map(|i| self.points[i * n / max]).collect();
        self.with_points(points)
    }
}

/// Depth image with a per-pixel semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame<T: Real> {
    pub width: u32,
    pub height: u32,
    /// Row-major depth in meters; `0` marks an invalid pixel.
    pub depth: Vec<T>,
    pub class_mask: Vec<u16>,
    pub timestamp_us: u64,
}

impl<T: Real> DepthFrame<T> {
    pub fn new(width: u32, height: u32, timestamp_us: u64) -> Self {
        let n = (width * height) as usize;
        Self { width, height, depth: vec![T::zero(); n], class_mask: vec![0; n], timestamp_us }
    }

    pub fn set(&mut self, u: u32, v: u32, depth: T, class_id: u16) {
        let i = (v * self.width + u) as usize;
        self.depth[i] = depth;
        self.class_mask[i] = class_id;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationConfig {
    pub cluster_tolerance: f64,
    pub min_cluster_points: usize,
    pub sor_k: usize,
    pub sor_stddev_mult: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { cluster_tolerance: 0.10, min_cluster_points: 50, sor_k: 20, sor_stddev_mult: 2.0 }
    }
}

/// Backprojects every valid pixel of class `class_id` into the camera frame.
///
/// Pixels with zero or non-finite depth are skipped.
pub fn depth_to_cloud<T: Real>(frame: &DepthFrame<T>, cam: &CameraModel<T>, class_id: u16, sensor_id: u16) -> PointCloudSegment<T> {
    let mut seg = PointCloudSegment::empty(class_id, sensor_id, frame.timestamp_us, Frame::Camera);
    if frame.width != cam.width || frame.height != cam.height {
        return seg;
    }
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = (v * frame.width + u) as usize;
            if frame.class_mask[i] != class_id {
                continue;
            }
            let px = Pixel::new(T::lit(u as f64), T::lit(v as f64));
            if let Ok(xyz) = cam.backproject(px, frame.depth[i]) {
                seg.points.push(Point::new(xyz, class_id));
            }
        }
    }
    seg
}

type Cell = (i64, i64, i64);

fn cell_of<T: Real>(p: &Vector3<T>, size: T) -> Cell {
    let f = |v: T| (v / size).floor().to_i64().unwrap_or(i64::MAX);
    (f(p.x), f(p.y), f(p.z))
}

/// Splits `cloud` into connected components of the `≤ tol` neighbour graph.
///
/// Components with fewer than `min_points` points are dropped. The output is
/// sorted by descending size (ties by first point index); points keep their
/// input order inside each cluster.
pub fn euclidean_cluster<T: Real>(cloud: &PointCloudSegment<T>, tol: T, min_points: usize) -> Vec<PointCloudSegment<T>> {
    let n = cloud.points.len();
    // bucket points by cell, then resolve each cell's neighbourhood once
    let mut cell_ids: HashMap<Cell, usize> = HashMap::new();
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut keys: Vec<Cell> = Vec::new();
    let mut cell_of_point = Vec::with_capacity(n);
    for (i, p) in cloud.points.iter().enumerate() {
        let key = cell_of(&p.xyz, tol);
        let id = *cell_ids.entry(key).or_insert_with(|| {
            buckets.push(Vec::new());
            keys.push(key);
            buckets.len() - 1
        });
        buckets[id].push(i);
        cell_of_point.push(id);
    }
    let neighbours: Vec<Vec<usize>> = keys
        .iter()
        .map(|&(cx, cy, cz)| {
            let mut v = Vec::with_capacity(27);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(&id) = cell_ids.get(&(cx + dx, cy + dy, cz + dz)) {
                            v.push(id);
                        }
                    }
                }
            }
            v
        })
        .collect();
    let tol2 = tol * tol;
    let mut visited = vec![false; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let p = cloud.points[i].xyz;
            for &c in &neighbours[cell_of_point[i]] {
                // visited points leave their bucket for good
                buckets[c].retain(|&j| {
                    if visited[j] {
                        false
                    } else if (cloud.points[j].xyz - p).norm_squared() <= tol2 {
                        visited[j] = true;
                        queue.push_back(j);
                        false
                    } else {
                        true
                    }
                });
            }
        }
        if members.len() >= min_points {
            members.sort_unstable();
            clusters.push(members);
        }
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
        .into_iter()
        .map(|idx| cloud.with_points(idx.into_iter().map(|i| cloud.points[i]).collect()))
        .collect()
}

/// Mean distance of every point to its `k` nearest neighbours (self excluded).
pub fn knn_mean_distances<T: Real>(points: &[Vector3<T>], k: usize) -> Vec<T> {
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut hits = tree.knn(p, k + 1);
            match hits.iter().position(|(j, _)| *j == i) {
                Some(pos) => {
                    hits.remove(pos);
                }
                None => {
                    hits.pop();
                }
            }
            hits.iter().fold(T::zero(), |acc, (_, d)| acc + *d) / T::lit(k as f64)
        })
        .collect()
}

/// Statistical outlier removal.
///
/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// `μ + stddev_mult·σ` of that statistic over the cloud (σ uses the `n − 1`
/// denominator). Clouds with at most `k` points are returned unchanged.
pub fn sor_filter<T: Real>(cloud: &PointCloudSegment<T>, k: usize, stddev_mult: T) -> PointCloudSegment<T> {
    let n = cloud.points.len();
    if k == 0 || n <= k {
        return cloud.clone();
    }
    let positions = cloud.positions();
    let means = knn_mean_distances(&positions, k);
    let nf = T::lit(n as f64);
    let mu = means.iter().fold(T::zero(), |a, d| a + *d) / nf;
    let var = means.iter().fold(T::zero(), |a, d| a + (*d - mu) * (*d - mu)) / T::lit((n - 1) as f64);
    let threshold = mu + stddev_mult * var.sqrt();
    let kept = cloud
        .points
        .iter()
        .zip(&means)
        .filter(|(_, d)| **d <= threshold)
        .map(|(p, _)| *p)
        .collect();
    cloud.with_points(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn seg(points: &[Vector3<f64>]) -> PointCloudSegment<f64> {
        PointCloudSegment {
            points: points.iter().map(|p| Point::new(*p, 1)).collect(),
            ..Default::default()
        }
    }

    fn cam() -> CameraModel<f64> {
        CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn depth_to_cloud_examples() {
        let c = cam();
        let mut f = DepthFrame::new(640, 480, 7);
        assert!(depth_to_cloud(&f, &c, 1, 0).is_empty());
        f.set(320, 240, 2.0, 1);
        let s = depth_to_cloud(&f, &c, 1, 0);
        assert_eq!(s.positions(), vec![Vector3::new(0.0, 0.0, 2.0)]);
        assert_eq!(s.timestamp_us, 7);

        let mut f = DepthFrame::new(640, 480, 0);
        for u in 100..110 {
            for v in 50..60 {
                f.set(u, v, 3.0, 4);
            }
        }
        f.set(0, 0, f64::NAN, 4);
        let s = depth_to_cloud(&f, &c, 4, 0);
        assert_eq!(s.len(), 100);
        assert!(s.points.iter().all(|p| (p.xyz.z - 3.0).abs() < 1e-9));
        assert!(depth_to_cloud(&f, &c, 1, 0).is_empty());
    }

    fn blob(center: Vector3<f64>, n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| center + Vector3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)))
            .collect()
    }

    #[test]
    fn cluster_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = blob(Vector3::zeros(), 60, 0.05, &mut rng);
        pts.extend(blob(Vector3::new(1.0, 0.0, 0.0), 80, 0.05, &mut rng));
        let out = euclidean_cluster(&seg(&pts), 0.1, 10);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].len(), 80);
        assert_eq!(out[1].len(), 60);

        let one = euclidean_cluster(&seg(&pts[..60]), 1.0, 1);
        assert_eq!(one.len(), 1);
        assert!(euclidean_cluster(&seg(&pts), 0.1, 100).is_empty());
    }

    /// Brute-force union-find over the full O(n²) adjacency graph.
    fn oracle_partition(pts: &[Vector3<f64>], tol: f64, min_points: usize) -> Vec<Vec<usize>> {
        let n = pts.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                if (pts[i] - pts[j]).norm() <= tol {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= min_points).collect();
        out.sort();
        out
    }

    fn as_partition(clusters: &[PointCloudSegment<f64>], pts: &[Vector3<f64>]) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = clusters
            .iter()
            .map(|c| {
                let mut idx: Vec<usize> = c.points.iter().map(|p| pts.iter().position(|q| *q == p.xyz).unwrap()).collect();
                idx.sort();
                idx
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn cluster_matches_union_find_oracle() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pts: Vec<Vector3<f64>> = (0..200)
                .map(|_| Vector3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..0.3)))
                .collect();
            let tol = 0.12;
            let got = euclidean_cluster(&seg(&pts), tol, 3);
            assert_eq!(as_partition(&got, &pts), oracle_partition(&pts, tol, 3), "seed {seed}");
            for w in got.windows(2) {
                assert!(w[0].len() >= w[1].len());
            }
        }
    }

    #[test]
    fn cluster_invariant_to_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vector3<f64>> = (0..150)
            .map(|_| Vector3::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), 0.0))
            .collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 77);
        let a = as_partition(&euclidean_cluster(&seg(&pts), 0.1, 1), &pts);
        let b = as_partition(&euclidean_cluster(&seg(&shuffled), 0.1, 1), &pts);
        assert_eq!(a, b);
    }

    #[test]
    fn sor_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(Vector3::zeros(), 40, 0.05, &mut rng);
        pts.push(Vector3::new(10.0, 0.0, 0.0));
        let out = sor_filter(&seg(&pts), 5, 1.0);
        assert!(out.points.iter().all(|p| p.xyz.x < 1.0));

        let grid: Vec<Vector3<f64>> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0)))
            .collect();
        assert_eq!(sor_filter(&seg(&grid), 8, 10.0).len(), 100);
        assert_eq!(sor_filter(&seg(&pts[..5]), 5, 0.0).len(), 5);
    }

    /// Recomputes the neighbour statistic by sorting all pairwise distances.
    fn oracle_sor(pts: &[Vector3<f64>], k: usize, mult: f64) -> Vec<usize> {
        let means: Vec<f64> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| (p - q).norm()).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[..k].iter().sum::<f64>() / k as f64
            })
            .collect();
        let n = means.len() as f64;
        let mu = means.iter().sum::<f64>() / n;
        let sd = (means.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (0..pts.len()).filter(|&i| means[i] <= mu + mult * sd).collect()
    }

    #[test]
    fn sor_matches_brute_force_with_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        for i in 0..5 {
            pts.push(Vector3::new(2.0 + i as f64, -1.5, 0.7 * i as f64));
        }
        let out = sor_filter(&seg(&pts), 20, 2.0);
        let expected = oracle_sor(&pts, 20, 2.0);
        let got: Vec<usize> = out.points.iter().map(|p| pts.iter().position(|q| *q == p.xyz).unwrap()).collect();
        assert_eq!(got, expected);
        assert!(expected.iter().all(|&i| i < 500));
    }

    #[test]
    fn sor_rerun_on_output_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), 0.0))
            .collect();
        let once = sor_filter(&seg(&pts), 10, 2.0);
        let twice = sor_filter(&once, 10, 2.0);
        let once_pts = once.positions();
        let expected: Vec<Vector3<f64>> = oracle_sor(&once_pts, 10, 2.0).into_iter().map(|i| once_pts[i]).collect();
        assert_eq!(twice.positions(), expected);
    }
}
