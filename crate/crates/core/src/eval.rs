//! Pose and mask metrics plus report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{geodesic_deg, CameraModel, Pose};
use crate::mask::Mask;
use crate::model::ObjectModel;
use crate::protocol::BandwidthReport;
use crate::scalar::Real;
use crate::tracker::greedy_match;

pub const DEFAULT_DILATE_PX: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
}

/// Translation error in centimetres.
pub fn trans_error<T: Real>(est: &Pose<T>, gt: &Pose<T>) -> T {
    (est.t - gt.t).norm() * T::lit(100.0)
}

/// Geodesic rotation error in degrees.
pub fn rot_error<T: Real>(est: &Pose<T>, gt: &Pose<T>) -> T {
    geodesic_deg(&est.q, &gt.q)
}

/// IoU of a prediction against a dilated ground-truth mask.
///
/// The dilated ground truth `D` tolerates boundary offsets in the
/// intersection, while the union is taken with the undilated mask:
/// `|P ∩ D| / |P ∪ G|`. With no dilation this is plain IoU, dilation can
/// only raise the score, and an empty union scores 1.
pub fn iou_dilated(pred: &Mask, gt: &Mask, dilate_px: u32) -> Result<f64, EvalError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(EvalError::DimensionMismatch((pred.width, pred.height), (gt.width, gt.height)));
    }
    let bbox = match (pred.bbox(), gt.bbox()) {
        (None, None) => return Ok(1.0),
        (Some(a), None) | (None, Some(a)) => a,
        (Some(a), Some(b)) => (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3)),
    };
    // work on the union's bounding box grown by the kernel reach
    let r = dilate_px;
    let (u0, v0) = (bbox.0.saturating_sub(r), bbox.1.saturating_sub(r));
    let (u1, v1) = ((bbox.2 + r).min(pred.width - 1), (bbox.3 + r).min(pred.height - 1));
    let (w, h) = (u1 - u0 + 1, v1 - v0 + 1);
    let (p, g) = (pred.crop(u0, v0, w, h), gt.crop(u0, v0, w, h));
    let union = p.union_count(&g);
    let inter = p.intersection_count(&g.dilate(dilate_px));
    Ok(inter as f64 / union as f64)
}

/// Splat-renders the model cloud as discs of radius `f · r / z`.
pub fn render_model_mask<T: Real>(model: &ObjectModel<T>, pose: &Pose<T>, cam: &CameraModel<T>) -> Mask {
    let mut mask = Mask::new(cam.width, cam.height);
    for p in &model.cloud {
        let xc = cam.world_to_camera(&pose.apply(p));
        if let Ok(px) = cam.project(&xc) {
            let r = cam.fx * model.splat_radius / xc.z;
            mask.fill_disc(Vector2::new(px.u, px.v), r);
        }
    }
    mask
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { n: values.len(), mean, std: var.sqrt() }
    }
}

/// One evaluated object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub timestamp_us: u64,
    pub track_id: u64,
    pub gt_object: usize,
    pub class_id: u16,
    pub trans_cm: f64,
    pub rot_deg: f64,
    /// Per camera; `None` where the object is outside that view.
    pub iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub scenario: String,
    pub variant: String,
    pub frames: usize,
    pub trans_cm: Stats,
    pub rot_deg: Stats,
    pub iou_per_camera: Vec<Stats>,
    pub iou_total: Stats,
}

impl VariantReport {
    pub fn aggregate(scenario: &str, variant: &str, records: &[FrameRecord]) -> Self {
        let trans: Vec<f64> = records.iter().map(|r| r.trans_cm).collect();
        let rot: Vec<f64> = records.iter().map(|r| r.rot_deg).collect();
        let ncam = records.iter().map(|r| r.iou.len()).max().unwrap_or(0);
        let per_cam: Vec<Stats> = (0..ncam)
            .map(|c| Stats::from_values(&records.iter().filter_map(|r| r.iou.get(c).copied().flatten()).collect::<Vec<_>>()))
            .collect();
        let all: Vec<f64> = records.iter().flat_map(|r| r.iou.iter().flatten().copied()).collect();
        let mut frames: Vec<u64> = records.iter().map(|r| r.frame_index).collect();
        frames.dedup();
        Self {
            scenario: scenario.to_string(),
            variant: variant.to_string(),
            frames: frames.len(),
            trans_cm: Stats::from_values(&trans),
            rot_deg: Stats::from_values(&rot),
            iou_per_camera: per_cam,
            iou_total: Stats::from_values(&all),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<VariantReport>,
    /// Keyed by representation mode (`mesh`, `submap`).
    pub bandwidth: BTreeMap<String, BandwidthReport>,
}

impl EvalReport {
    /// Aligned-text table: one row per scenario and variant.
    pub fn to_table(&self) -> String {
        let ncam = self.variants.iter().map(|v| v.iou_per_camera.len()).max().unwrap_or(0);
        let mut header = vec!["scenario".to_string(), "variant".into(), "frames".into(), "E_trans[cm]".into(), "E_rot[deg]".into()];
        header.extend((0..ncam).map(|c| format!("IoU cam{c}")));
        header.push("IoU total".into());
        let pm = |s: &Stats| format!("{:.2} ± {:.2}", s.mean, s.std);
        let pm3 = |s: &Stats| format!("{:.3} ± {:.3}", s.mean, s.std);
        let mut rows = vec![header];
        for v in &self.variants {
            let mut row = vec![v.scenario.clone(), v.variant.clone(), v.frames.to_string(), pm(&v.trans_cm), pm(&v.rot_deg)];
            row.extend((0..ncam).map(|c| v.iou_per_camera.get(c).map_or("-".into(), pm3)));
            row.push(pm3(&v.iou_total));
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            }
        }
        if !self.bandwidth.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<14}  {:>16}  {:>16}  {:>16}  {:>12}",
                "stream", "obs/sensor[B/s]", "seg/sensor[B/s]", "wire total[B/s]", "sensors"
            );
            for (mode, b) in &self.bandwidth {
                let _ = writeln!(
                    out,
                    "{:<14}  {:>16.1}  {:>16.1}  {:>16.1}  {:>12}",
                    mode,
                    b.per_sensor_mean(|s| s.observation_bps),
                    b.per_sensor_mean(|s| s.segment_bps),
                    b.wire_bps,
                    b.per_sensor.len()
                );
            }
        }
        out
    }
}

/// One-to-one assignment of estimates to same-class ground-truth objects,
/// globally nearest first. Returns `(estimate, gt)` index pairs.
pub fn match_to_ground_truth<T: Real>(est: &[(u16, Pose<T>)], gt: &[(u16, Pose<T>)]) -> Vec<(usize, usize)> {
    let dist: Vec<Vec<T>> = est
        .iter()
        .map(|(c, p)| gt.iter().map(|(gc, g)| if c == gc { (p.t - g.t).norm() } else { T::lit(f64::INFINITY) }).collect())
        .collect();
    greedy_match(&dist, gt.len(), T::lit(f64::MAX)).matches
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    #[test]
    fn pose_error_examples() {
        let p = Pose::<f64>::identity();
        assert_eq!(trans_error(&p, &p), 0.0);
        let q = Pose::from_translation(Vector3::new(0.03, 0.04, 0.0));
        assert!((trans_error(&q, &p) - 5.0).abs() < 1e-12);
        assert!((rot_error(&Pose::rz_deg(90.0), &p) - 90.0).abs() < 1e-9);
        let neg = Pose { t: Vector3::zeros(), q: UnitQuaternion::new_unchecked(-*p.q.quaternion()) };
        assert!(rot_error(&neg, &p).abs() < 1e-12);
    }

    fn square(x0: u32, y0: u32, s: u32) -> Mask {
        let mut m = Mask::new(64, 64);
        for v in y0..y0 + s {
            for u in x0..x0 + s {
                m.set(u, v, true);
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = square(5, 5, 20);
        assert_eq!(iou_dilated(&a, &a, 0).unwrap(), 1.0);
        assert_eq!(iou_dilated(&a, &square(40, 40, 10), 0).unwrap(), 0.0);
        let b = square(15, 5, 20);
        assert!((iou_dilated(&a, &b, 0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(iou_dilated(&a, &b, 10).unwrap() >= iou_dilated(&a, &b, 0).unwrap());
        assert_eq!(iou_dilated(&Mask::new(4, 4), &Mask::new(4, 4), 10).unwrap(), 1.0);
        assert!(iou_dilated(&Mask::new(4, 4), &Mask::new(5, 4), 0).is_err());
    }

    #[test]
    fn cropped_computation_matches_full_frame() {
        let a = square(0, 0, 12);
        let b = square(8, 3, 20);
        for k in [0, 1, 4, 10] {
            let full = a.intersection_count(&b.dilate(k)) as f64 / a.union_count(&b) as f64;
            assert_eq!(iou_dilated(&a, &b, k).unwrap(), full);
        }
    }

    #[test]
    fn render_examples() {
        let cam = CameraModel::<f64>::new(600.0, 600.0, 320.0, 240.0, 640, 480);
        let chair = ObjectModel::<f64>::chair();
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -3.0));
        assert!(render_model_mask(&chair, &behind, &cam).is_empty());
        let front = Pose::from_translation(Vector3::new(0.0, 0.0, 3.0));
        let m = render_model_mask(&chair, &front, &cam);
        assert!(m.count() > 1000);
        assert_eq!(iou_dilated(&m, &m, 10).unwrap(), 1.0);
    }

    #[test]
    fn stats_population() {
        let s = Stats::from_values(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((s.mean, s.std), (5.0, 2.0));
        assert_eq!(Stats::from_values(&[]), Stats::default());
    }

    #[test]
    fn matching_respects_class() {
        let est = vec![(1u16, Pose::<f64>::tx(0.0)), (2, Pose::tx(5.0))];
        let gt = vec![(2u16, Pose::<f64>::tx(0.1)), (1, Pose::tx(4.0))];
        assert_eq!(match_to_ground_truth(&est, &gt), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn table_is_aligned() {
        let rec = FrameRecord { frame_index: 0, timestamp_us: 0, track_id: 1, gt_object: 0, class_id: 1, trans_cm: 1.0, rot_deg: 2.0, iou: vec![Some(0.9), None] };
        let r = EvalReport { variants: vec![VariantReport::aggregate("default", "pnp", &[rec])], bandwidth: BTreeMap::new() };
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("scenario"));
        assert_eq!(lines[2].find("pnp"), lines[0].find("variant"));
        assert!(t.contains("1.00 ± 0.00"));
    }
}
