use nalgebra::Vector3;

use crate::geometry::Pose;
use crate::model::ObjectModel;
use crate::scalar::Real;
use crate::segmentation::PointCloudSegment;
use crate::spatial::KdTree;

/// Model keypoints placed at an estimated pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton3D<T: Real> {
    pub class_id: u16,
    pub keypoints: Vec<Vector3<T>>,
    pub pose: Pose<T>,
}

pub fn skeleton_from_pose<T: Real>(model: &ObjectModel<T>, pose: &Pose<T>) -> Skeleton3D<T> {
    Skeleton3D {
        class_id: model.class_id,
        keypoints: model.keypoints.iter().map(|k| pose.apply(k)).collect(),
        pose: *pose,
    }
}

fn mean_nn_distance<T: Real>(keypoints: &[Vector3<T>], tree: &KdTree<T>) -> T {
    if keypoints.is_empty() || tree.is_empty() {
        return T::lit(f64::INFINITY);
    }
    let sum = keypoints
        .iter()
        .map(|k| tree.nearest(k).map_or(T::zero(), |(_, d)| d))
        .fold(T::zero(), |a, d| a + d);
    sum / T::lit(keypoints.len() as f64)
}

/// Mean distance from each skeleton keypoint to its nearest segment point.
///
/// Returns infinity for an empty segment.
pub fn assoc_distance<T: Real>(skeleton: &Skeleton3D<T>, segment: &PointCloudSegment<T>) -> T {
    let pts = segment.positions();
    mean_nn_distance(&skeleton.keypoints, &KdTree::new(&pts))
}

/// Greedy skeleton-to-segment assignment.
///
/// Segments are visited by descending point count (ties by index). Each
/// takes the closest still-unassigned skeleton; the pair is kept when the
/// distance is within `tau`. Returns `(segment_idx, skeleton_idx)` pairs in
/// visiting order.
pub fn greedy_associate<T: Real>(
    skeletons: &[Skeleton3D<T>],
    segments: &[PointCloudSegment<T>],
    tau: T,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| segments[b].len().cmp(&segments[a].len()).then(a.cmp(&b)));
    let mut used = vec![false; skeletons.len()];
    let mut pairs = Vec::new();
    for si in order {
        if segments[si].is_empty() {
            continue;
        }
        let pts = segments[si].positions();
        let tree = KdTree::new(&pts);
        let best = skeletons
            .iter()
            .enumerate()
            .filter(|(ki, _)| !used[*ki])
            .map(|(ki, k)| (ki, mean_nn_distance(&k.keypoints, &tree)))
            .fold(None, |acc: Option<(usize, T)>, (ki, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((ki, d)),
            });
        if let Some((ki, d)) = best {
            if d <= tau {
                used[ki] = true;
                pairs.push((si, ki));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(points: &[Vector3<f64>]) -> PointCloudSegment<f64> {
        PointCloudSegment { points: points.iter().map(|p| Point::new(*p, 1)).collect(), ..Default::default() }
    }

    fn skel(points: &[Vector3<f64>]) -> Skeleton3D<f64> {
        Skeleton3D { class_id: 1, keypoints: points.to_vec(), pose: Pose::identity() }
    }

    #[test]
    fn skeleton_examples() {
        let chair = ObjectModel::<f64>::chair();
        assert_eq!(skeleton_from_pose(&chair, &Pose::identity()).keypoints, chair.keypoints);
        let shifted = skeleton_from_pose(&chair, &Pose::tx(1.0));
        for (a, b) in shifted.keypoints.iter().zip(&chair.keypoints) {
            assert_eq!(*a, b + Vector3::new(1.0, 0.0, 0.0));
        }
        let p = Pose::tx(1.0).compose(&Pose::rz_deg(90.0));
        let s = skeleton_from_pose(&chair, &p);
        for (a, b) in s.keypoints.iter().zip(&chair.keypoints) {
            assert_eq!(*a, p.apply(b));
        }
    }

    #[test]
    fn assoc_distance_examples() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 0.0)];
        assert_eq!(assoc_distance(&skel(&pts[..2]), &seg(&pts)), 0.0);
        let d = assoc_distance(&skel(&[Vector3::zeros()]), &seg(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)]));
        assert_eq!(d, 1.0);
    }

    /// O(L·n) double loop.
    fn brute_assoc(k: &[Vector3<f64>], s: &[Vector3<f64>]) -> f64 {
        let mut sum = 0.0;
        for x in k {
            let mut best = f64::INFINITY;
            for y in s {
                best = best.min((x - y).norm());
            }
            sum += best;
        }
        sum / k.len() as f64
    }

    #[test]
    fn assoc_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let l = rng.random_range(4..9);
            let n = rng.random_range(1..300);
            let k: Vec<Vector3<f64>> = (0..l).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
            let s: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0).collect();
            assert_eq!(assoc_distance(&skel(&k), &seg(&s)), brute_assoc(&k, &s));
        }
    }

    #[test]
    fn greedy_examples() {
        let blob: Vec<Vector3<f64>> = (0..20).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let k = skel(&[Vector3::new(0.05, 0.0, 0.0), Vector3::new(0.1, 0.0, 0.0)]);
        assert_eq!(greedy_associate(&[k.clone()], &[seg(&blob)], 0.3), vec![(0, 0)]);
        let far: Vec<Vector3<f64>> = blob.iter().map(|p| p + Vector3::new(5.0, 0.0, 0.0)).collect();
        assert!(greedy_associate(&[k], &[seg(&far)], 0.3).is_empty());
    }

    #[test]
    fn greedy_matches_hand_simulation() {
        // Single-point skeletons and segments give a directly readable
        // distance matrix. Segment sizes 3, 2, 1 fix the visiting order.
        //            k0    k1    k2
        // s0 (3pt)  0.10  0.05  0.90
        // s1 (2pt)  0.20  0.04  0.50
        // s2 (1pt)  0.60  0.70  0.25
        // s0 takes k1 (0.05); s1 then takes k0 (0.20); s2 takes k2 (0.25).
        let ks = [skel(&[Vector3::new(0.0, 0.0, 0.0)]), skel(&[Vector3::new(0.0, 10.0, 0.0)]), skel(&[Vector3::new(0.0, 20.0, 0.0)])];
        let m = [[0.10, 0.05, 0.90], [0.20, 0.04, 0.50], [0.60, 0.70, 0.25]];
        // each segment holds one probe point per skeleton at the listed distance
        let mk_seg = |row: &[f64; 3], n: usize| {
            // points far along z (z = 100) pad the segment size without
            // affecting nearest neighbours
            let mut pts: Vec<Vector3<f64>> = Vec::new();
            for (k, d) in row.iter().enumerate() {
                pts.push(Vector3::new(0.0, 10.0 * k as f64, *d));
            }
            for i in 0..n {
                pts.push(Vector3::new(0.0, 0.0, 100.0 + i as f64));
            }
            seg(&pts)
        };
        let segs = [mk_seg(&m[0], 2), mk_seg(&m[1], 1), mk_seg(&m[2], 0)];
        // sanity: the segment rows reproduce the matrix
        for (si, row) in m.iter().enumerate() {
            for (ki, d) in row.iter().enumerate() {
                assert!((assoc_distance(&ks[ki], &segs[si]) - d).abs() < 1e-12);
            }
        }
        assert_eq!(greedy_associate(&ks, &segs, 0.3), vec![(0, 1), (1, 0), (2, 2)]);
        // with a tighter gate s1 and s2 fail their best remaining candidates
        assert_eq!(greedy_associate(&ks, &segs, 0.15), vec![(0, 1)]);
    }
}
