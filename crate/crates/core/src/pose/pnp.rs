use nalgebra::{Matrix2x3, Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{align_z, PoseConfig, PoseError};
use crate::geometry::{CameraModel, Pixel, Pose};
use crate::model::ObjectModel;
use crate::scalar::Real;

/// 2D keypoint detections of one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet2D<T: Real> {
    pub class_id: u16,
    pub points: Vec<Pixel<T>>,
    pub confidences: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> KeypointSet2D<T> {
    /// All keypoints valid with confidence 1.
    pub fn from_pixels(class_id: u16, points: Vec<Pixel<T>>) -> Self {
        let n = points.len();
        Self { class_id, points, confidences: vec![T::one(); n], valid: vec![true; n] }
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.valid[i] && self.points[i].u.is_finite() && self.points[i].v.is_finite())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult<T: Real> {
    /// Object pose in the camera frame.
    pub pose: Pose<T>,
    /// Keypoint indices whose reprojection error is within the threshold.
    pub inliers: Vec<usize>,
    /// RMS reprojection error over the inliers (px).
    pub rmse_px: T,
}

const MINIMAL: usize = 4;
const YAW_BINS: usize = 8;

fn reproj_error<T: Real>(cam: &CameraModel<T>, pose: &Pose<T>, x: &Vector3<T>, px: &Pixel<T>) -> Option<T> {
    cam.project(&pose.apply(x)).ok().map(|p| p.dist(px))
}

fn cost<T: Real>(cam: &CameraModel<T>, pose: &Pose<T>, obj: &[Vector3<T>], img: &[Pixel<T>]) -> Option<T> {
    obj.iter().zip(img).try_fold(T::zero(), |acc, (x, px)| {
        let e = reproj_error(cam, pose, x, px)?;
        Some(acc + e * e)
    })
}

/// Levenberg-Marquardt minimization of the squared reprojection error.
///
/// Rotation updates are applied on the left through the exponential map,
/// translation updates additively. Returns the refined pose and its cost.
pub fn refine_pose<T: Real>(
    cam: &CameraModel<T>,
    obj: &[Vector3<T>],
    img: &[Pixel<T>],
    init: &Pose<T>,
    max_iters: usize,
) -> (Pose<T>, T) {
    let mut pose = *init;
    let Some(mut current) = cost(cam, &pose, obj, img) else {
        return (pose, T::lit(f64::MAX));
    };
    let mut lambda = T::lit(1e-3);
    let step_tol = T::default_epsilon().sqrt() * T::lit(1e-3);
    for _ in 0..max_iters {
        if current <= T::default_epsilon() * T::default_epsilon() {
            break;
        }
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for (x, px) in obj.iter().zip(img) {
            let rx = pose.q * x;
            let p = rx + pose.t;
            let z = p.z;
            let dproj = Matrix2x3::new(
                cam.fx / z,
                T::zero(),
                -cam.fx * p.x / (z * z),
                T::zero(),
                cam.fy / z,
                -cam.fy * p.y / (z * z),
            );
            // dp/dθ = -[R x]_×, dp/dt = I
            let dp_dtheta = -rx.cross_matrix();
            let j_rot = dproj * dp_dtheta;
            let j = nalgebra::Matrix2x6::from_fn(|r, c| if c < 3 { j_rot[(r, c)] } else { dproj[(r, c - 3)] });
            let res = nalgebra::Vector2::new(cam.fx * p.x / z + cam.cx - px.u, cam.fy * p.y / z + cam.cy - px.v);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * (T::one() + jtj[(d, d)]);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= T::lit(10.0);
                continue;
            };
            let rot = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
            let candidate = Pose::new(pose.t + Vector3::new(delta[3], delta[4], delta[5]), rot * pose.q);
            match cost(cam, &candidate, obj, img) {
                Some(c) if c < current => {
                    let small = delta.norm() < step_tol * (T::one() + pose.t.norm());
                    pose = candidate;
                    current = c;
                    lambda = (lambda / T::lit(3.0)).max(T::lit(1e-12));
                    accepted = true;
                    if small {
                        return (pose, current);
                    }
                    break;
                }
                _ => lambda *= T::lit(4.0),
            }
        }
        if !accepted {
            break;
        }
    }
    (pose, current)
}

/// Coarse hypotheses: object upright in the world, one per yaw bin, placed
/// at the depth where the model's spread matches the keypoints' image spread.
fn initial_guesses<T: Real>(cam: &CameraModel<T>, obj: &[Vector3<T>], img: &[Pixel<T>]) -> Vec<Pose<T>> {
    let n = T::lit(obj.len() as f64);
    let c_obj = obj.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let (mu, mv) = img.iter().fold((T::zero(), T::zero()), |(a, b), p| (a + p.u, b + p.v));
    let c_img = Pixel::new(mu / n, mv / n);
    let spread_obj = obj.iter().fold(T::zero(), |a, p| a + (p - c_obj).norm()) / n;
    let spread_img = img.iter().fold(T::zero(), |a, p| a + p.dist(&c_img)) / n;
    let focal = (cam.fx + cam.fy) * T::lit(0.5);
    let depth = if spread_img > T::lit(1e-6) { focal * spread_obj / spread_img } else { T::lit(3.0) };
    let Ok(center) = cam.backproject(c_img, depth.max(T::lit(0.1))) else { return Vec::new() };
    let up = cam.extrinsic.q.inverse() * Vector3::z();
    let upright = align_z(&up);
    (0..YAW_BINS)
        .map(|k| {
            let yaw = T::two_pi() * T::lit(k as f64) / T::lit(YAW_BINS as f64);
            let q = upright * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
            Pose::new(center - q * c_obj, q)
        })
        .collect()
}

/// Lowest-cost upright solution over the yaw-grid starts.
fn solve_subset<T: Real>(
    cam: &CameraModel<T>,
    obj: &[Vector3<T>],
    img: &[Pixel<T>],
    up: &Vector3<T>,
    max_tilt: T,
) -> Option<Pose<T>> {
    initial_guesses(cam, obj, img)
        .iter()
        .map(|g| refine_pose(cam, obj, img, g, 50))
        .filter(|(p, _)| (p.q * Vector3::z()).angle(up) <= max_tilt)
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(p, _)| p)
}

fn n_choose_4(n: usize) -> usize {
    if n < 4 {
        0
    } else {
        n * (n - 1) * (n - 2) * (n - 3) / 24
    }
}

fn combinations4(n: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    out.push([a, b, c, d]);
                }
            }
        }
    }
    out
}

/// Robust pose from 2D-3D keypoint correspondences, in the camera frame.
///
/// Minimal samples of 4 keypoints are solved by reprojection-error
/// minimization from upright yaw-grid initializations (the camera extrinsic
/// supplies the world up direction); solutions leaning more than
/// `max_tilt_deg` off the vertical are rejected. When all 4-subsets fit in
/// the iteration budget they are enumerated, otherwise subsets are drawn
/// with a seeded RNG. Hypotheses are ranked by the truncated squared
/// reprojection error; the best consensus set is then refined jointly.
pub fn pnp_ransac<T: Real>(
    kps: &KeypointSet2D<T>,
    model: &ObjectModel<T>,
    cam: &CameraModel<T>,
    cfg: &PoseConfig,
) -> Result<PnpResult<T>, PoseError> {
    let valid: Vec<usize> = kps.valid_indices().into_iter().filter(|&i| i < model.keypoints.len()).collect();
    if valid.len() < MINIMAL {
        return Err(PoseError::TooFewKeypoints(valid.len()));
    }
    let thresh = T::lit(cfg.ransac_reproj_thresh);
    let up = cam.extrinsic.q.inverse() * Vector3::z();
    let max_tilt = T::lit(cfg.max_tilt_deg.to_radians());
    let subsets: Vec<[usize; 4]> = if n_choose_4(valid.len()) <= cfg.ransac_iters {
        combinations4(valid.len())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.ransac_seed);
        (0..cfg.ransac_iters)
            .map(|_| {
                let mut s = sample(&mut rng, valid.len(), MINIMAL).into_vec();
                s.sort_unstable();
                [s[0], s[1], s[2], s[3]]
            })
            .collect()
    };

    let score = |pose: &Pose<T>| -> (Vec<usize>, T) {
        let mut inliers = Vec::new();
        let mut err = T::zero();
        for &i in &valid {
            if let Some(e) = reproj_error(cam, pose, &model.keypoints[i], &kps.points[i]) {
                if e <= thresh {
                    inliers.push(i);
                    err += e * e;
                }
            }
        }
        (inliers, err)
    };

    let mut best: Option<(Pose<T>, Vec<usize>, T)> = None;
    for subset in subsets {
        let idx: Vec<usize> = subset.iter().map(|&s| valid[s]).collect();
        let obj: Vec<Vector3<T>> = idx.iter().map(|&i| model.keypoints[i]).collect();
        let img: Vec<Pixel<T>> = idx.iter().map(|&i| kps.points[i]).collect();
        let Some(pose) = solve_subset(cam, &obj, &img, &up, max_tilt) else { continue };
        let (inliers, err) = score(&pose);
        // truncated quadratic: every outlier costs a full threshold
        let cost = err + thresh * thresh * T::lit((valid.len() - inliers.len()) as f64);
        let better = match &best {
            None => true,
            Some((_, bi, bc)) => cost < *bc || (cost == *bc && inliers.len() > bi.len()),
        };
        if better {
            let all = inliers.len() == valid.len();
            best = Some((pose, inliers, cost));
            if all {
                break;
            }
        }
    }
    let (mut pose, mut inliers, _) = best.ok_or(PoseError::NoConsensus(0))?;
    if inliers.len() < MINIMAL {
        return Err(PoseError::NoConsensus(inliers.len()));
    }
    for _ in 0..3 {
        let obj: Vec<Vector3<T>> = inliers.iter().map(|&i| model.keypoints[i]).collect();
        let img: Vec<Pixel<T>> = inliers.iter().map(|&i| kps.points[i]).collect();
        let (refined, _) = refine_pose(cam, &obj, &img, &pose, 100);
        let (next, _) = score(&refined);
        if next.len() < MINIMAL || (refined.q * Vector3::z()).angle(&up) > max_tilt {
            break;
        }
        pose = refined;
        let unchanged = next == inliers;
        inliers = next;
        if unchanged {
            break;
        }
    }
    let (_, err) = score(&pose);
    let rmse_px = (err / T::lit(inliers.len() as f64)).sqrt();
    Ok(PnpResult { pose, inliers, rmse_px })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_deg;
    use rand::Rng;

    fn camera() -> CameraModel<f64> {
        let eye = Vector3::new(3.0, -2.5, 2.2);
        CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480)
            .with_extrinsic(CameraModel::look_at(eye, Vector3::new(0.0, 0.0, 0.4)))
    }

    /// Forward projection oracle: keypoints of `model` seen at world pose `gt`.
    fn project_all(cam: &CameraModel<f64>, model: &ObjectModel<f64>, gt_world: &Pose<f64>) -> (Pose<f64>, Vec<Pixel<f64>>) {
        let in_cam = cam.extrinsic.inverse().compose(gt_world);
        let px = model.keypoints.iter().map(|k| cam.project(&in_cam.apply(k)).unwrap()).collect();
        (in_cam, px)
    }

    #[test]
    fn exact_on_clean_chair_and_table() {
        let cam = camera();
        for (model, yaw) in [(ObjectModel::chair(), 0.3), (ObjectModel::table(), 2.9), (ObjectModel::chair(), -2.2)] {
            let gt = Pose::from_yaw(Vector3::new(0.4, -0.3, 0.0), yaw);
            let (gt_cam, px) = project_all(&cam, &model, &gt);
            let kps = KeypointSet2D::from_pixels(model.class_id, px);
            let r = pnp_ransac(&kps, &model, &cam, &PoseConfig::default()).unwrap();
            assert!((r.pose.t - gt_cam.t).norm() < 1e-6, "{}", (r.pose.t - gt_cam.t).norm());
            assert!(geodesic_deg(&r.pose.q, &gt_cam.q) < 1e-4);
            assert_eq!(r.inliers.len(), model.num_keypoints());
        }
    }

    #[test]
    fn rejects_two_gross_outliers() {
        let cam = camera();
        let model = ObjectModel::chair();
        let gt = Pose::from_yaw(Vector3::new(-0.2, 0.5, 0.0), 1.1);
        let (gt_cam, mut px) = project_all(&cam, &model, &gt);
        px[1].u += 50.0;
        px[4].v -= 50.0;
        let kps = KeypointSet2D::from_pixels(model.class_id, px);
        let r = pnp_ransac(&kps, &model, &cam, &PoseConfig::default()).unwrap();
        assert!((r.pose.t - gt_cam.t).norm() < 1e-4);
        assert_eq!(r.inliers, vec![0, 2, 3, 5]);
    }

    #[test]
    fn too_few_keypoints() {
        let cam = camera();
        let model = ObjectModel::chair();
        let (_, px) = project_all(&cam, &model, &Pose::identity());
        let mut kps = KeypointSet2D::from_pixels(model.class_id, px);
        kps.valid = vec![true, true, true, false, false, false];
        assert_eq!(pnp_ransac(&kps, &model, &cam, &PoseConfig::default()), Err(PoseError::TooFewKeypoints(3)));
    }

    #[test]
    fn random_sampling_path_is_seeded() {
        let cam = camera();
        let model = ObjectModel::table();
        let gt = Pose::from_yaw(Vector3::new(0.1, 0.1, 0.0), 0.5);
        let (gt_cam, mut px) = project_all(&cam, &model, &gt);
        px[6].u += 80.0;
        let kps = KeypointSet2D::from_pixels(model.class_id, px);
        let cfg = PoseConfig { ransac_iters: 30, ransac_seed: 11, ..Default::default() };
        let a = pnp_ransac(&kps, &model, &cam, &cfg).unwrap();
        let b = pnp_ransac(&kps, &model, &cam, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((a.pose.t - gt_cam.t).norm() < 1e-4);
        assert!(!a.inliers.contains(&6));
    }

    #[test]
    fn noisy_keypoints_stay_close() {
        let cam = camera();
        let model = ObjectModel::chair();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = Pose::from_yaw(Vector3::new(0.0, 0.2, 0.0), -0.8);
        let (gt_cam, px) = project_all(&cam, &model, &gt);
        let noisy = px.iter().map(|p| Pixel::new(p.u + rng.random_range(-1.5..1.5), p.v + rng.random_range(-1.5..1.5))).collect();
        let r = pnp_ransac(&KeypointSet2D::from_pixels(1, noisy), &model, &cam, &PoseConfig::default()).unwrap();
        assert!((r.pose.t - gt_cam.t).norm() < 0.15);
        assert!(r.rmse_px < 3.0);
    }
}
