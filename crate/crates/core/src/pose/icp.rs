use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::{PoseConfig, PoseError};
use crate::geometry::{geodesic_deg, Pose};
use crate::model::ObjectModel;
use crate::scalar::Real;
use crate::segmentation::PointCloudSegment;
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult<T: Real> {
    pub pose: Pose<T>,
    /// RMS correspondence distance over gated pairs at `pose` (m).
    pub rmse: T,
    pub converged: bool,
    pub iterations: usize,
    /// Inlier RMSE at the initial pose and after each accepted update.
    pub rmse_history: Vec<T>,
}

const MIN_SEGMENT: usize = 10;

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
fn kabsch<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Pose<T> {
    let n = T::lit(src.len() as f64);
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < T::zero() {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -T::one();
        r = v * fix * u.transpose();
    }
    let q = UnitQuaternion::from_matrix(&r);
    Pose::new(cd - q * cs, q)
}

/// Gated segment→model correspondences at `pose`: `(model_point, segment_point, dist²)`.
fn correspondences<T: Real>(
    tree: &KdTree<T>,
    model: &ObjectModel<T>,
    segment: &[Vector3<T>],
    pose: &Pose<T>,
    gate: T,
) -> (Vec<Vector3<T>>, Vec<Vector3<T>>, T) {
    let inv = pose.inverse();
    let mut src = Vec::with_capacity(segment.len());
    let mut dst = Vec::with_capacity(segment.len());
    let mut sq = T::zero();
    for s in segment {
        if let Some((i, d)) = tree.nearest(&inv.apply(s)) {
            if d <= gate {
                src.push(model.cloud[i]);
                dst.push(*s);
                sq += d * d;
            }
        }
    }
    (src, dst, sq)
}

/// Point-to-point ICP aligning the model cloud, placed at an evolving pose,
/// with an observed segment expressed in the same frame as `init`.
///
/// Every segment point is paired with its nearest model point; pairs farther
/// than `icp_corr_dist` are ignored. An update that would raise the inlier
/// RMSE is rejected and ends the iteration. Large segments are thinned to
/// `icp_max_points` evenly spaced points first.
pub fn icp_refine<T: Real>(
    model: &ObjectModel<T>,
    segment: &PointCloudSegment<T>,
    init: &Pose<T>,
    cfg: &PoseConfig,
) -> Result<IcpResult<T>, PoseError> {
    if segment.len() < MIN_SEGMENT {
        return Err(PoseError::DegenerateSegment(segment.len()));
    }
    let pts = segment.subsample(cfg.icp_max_points.max(MIN_SEGMENT)).positions();
    let tree = KdTree::new(&model.cloud);
    let gate = T::lit(cfg.icp_corr_dist);
    let eps = T::lit(cfg.icp_eps);
    let rmse_of = |sq: T, n: usize| if n == 0 { T::lit(f64::INFINITY) } else { (sq / T::lit(n as f64)).sqrt() };

    let mut pose = *init;
    let (mut src, mut dst, sq) = correspondences(&tree, model, &pts, &pose, gate);
    let mut rmse = rmse_of(sq, src.len());
    let mut history = vec![rmse];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.icp_max_iters && src.len() >= 3 {
        iterations += 1;
        let next = kabsch(&src, &dst);
        let (next_src, next_dst, next_sq) = correspondences(&tree, model, &pts, &next, gate);
        let next_rmse = rmse_of(next_sq, next_src.len());
        // rounding noise at a fixed point must not count as an increase
        if next_rmse > rmse + T::default_epsilon() * T::lit(16.0) {
            break;
        }
        let delta = (next.t - pose.t).norm() + geodesic_deg(&next.q, &pose.q).to_rad();
        pose = next;
        (src, dst, rmse) = (next_src, next_dst, next_rmse);
        history.push(rmse);
        if delta < eps {
            converged = true;
            break;
        }
    }
    Ok(IcpResult { pose, rmse, converged, iterations, rmse_history: history })
}
