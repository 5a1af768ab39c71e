use nalgebra::{Matrix3, Vector3};

use crate::geometry::Pose;
use crate::scalar::Real;
use crate::segmentation::PointCloudSegment;

/// One sensor's estimate of one object instance, in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation<T: Real> {
    pub timestamp_us: u64,
    pub sensor_id: u16,
    pub class_id: u16,
    pub pose: Pose<T>,
    /// Keypoint-to-segment association distance of the chosen pairing (m).
    pub assoc_dist: T,
    /// Semi-axis lengths of the segment's covariance ellipsoid, descending (m).
    pub ellipsoid: [T; 3],
    pub segment: Option<PointCloudSegment<T>>,
}

/// Square roots of the eigenvalues of the point covariance, descending.
pub fn ellipsoid_axes<T: Real>(points: &[Vector3<T>]) -> [T; 3] {
    if points.is_empty() {
        return [T::zero(); 3];
    }
    let n = T::lit(points.len() as f64);
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - c;
        a + d * d.transpose()
    }) / n;
    let mut ev: Vec<T> = cov.symmetric_eigenvalues().iter().map(|e| e.max(T::zero()).sqrt()).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    [ev[0], ev[1], ev[2]]
}

/// Assembles the transmitted observation for a matched pose and segment.
///
/// Both `pose` and `segment` are expected in the world frame.
pub fn build_observation<T: Real>(
    pose: Pose<T>,
    segment: &PointCloudSegment<T>,
    assoc_dist: T,
    sensor_id: u16,
    timestamp_us: u64,
    include_segment: bool,
) -> ObjectObservation<T> {
    ObjectObservation {
        timestamp_us,
        sensor_id,
        class_id: segment.class_id,
        pose,
        assoc_dist,
        ellipsoid: ellipsoid_axes(&segment.positions()),
        segment: include_segment.then(|| segment.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(points: &[Vector3<f64>]) -> PointCloudSegment<f64> {
        PointCloudSegment { points: points.iter().map(|p| Point::new(*p, 2)).collect(), class_id: 2, ..Default::default() }
    }

    #[test]
    fn identical_points_have_zero_axes() {
        let s = seg(&[Vector3::new(1.0, 2.0, 3.0); 10]);
        let o = build_observation(Pose::identity(), &s, 0.1, 3, 99, false);
        assert_eq!(o.ellipsoid, [0.0; 3]);
        assert!(o.segment.is_none());
        assert_eq!((o.class_id, o.sensor_id, o.timestamp_us), (2, 3, 99));
        assert!(build_observation(Pose::identity(), &s, 0.1, 3, 99, true).segment.is_some());
    }

    #[test]
    fn uniform_line_matches_analytic_variance() {
        // population variance of n evenly spaced samples on [0,1] tends to 1/12
        let n = 10_001;
        let pts: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64 / (n - 1) as f64, 0.0, 0.0)).collect();
        let axes = ellipsoid_axes(&pts);
        assert!((axes[0] - (1.0f64 / 12.0).sqrt()).abs() < 1e-4, "{axes:?}");
        assert!(axes[1].abs() < 1e-9 && axes[2].abs() < 1e-9);
        assert!((axes[0] - 0.2887).abs() < 1e-4);
    }

    #[test]
    fn axes_sorted_descending() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pts: Vec<Vector3<f64>> = (0..30)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0) * 3.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0) * 0.2))
                .collect();
            let a = ellipsoid_axes(&pts);
            assert!(a[0] >= a[1] && a[1] >= a[2] && a[2] >= 0.0);
        }
    }
}
