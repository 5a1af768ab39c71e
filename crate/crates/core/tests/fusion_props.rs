use std::collections::BTreeMap;

use objmap_core::fusion::{fuse, group_by_instance, synchronize, FrameSet};
use objmap_core::geometry::{geodesic_deg, Pose};
use objmap_core::nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use objmap_core::ObjectObservation;
use proptest::prelude::*;

fn obs(sensor: u16, t: [f64; 3], yaw: f64, d: f64) -> ObjectObservation {
    ObjectObservation {
        timestamp_us: 1_000_000,
        sensor_id: sensor,
        class_id: 1,
        pose: Pose::new(Vector3::from(t), UnitQuaternion::from_euler_angles(0.0, 0.0, yaw)),
        assoc_dist: d,
        ellipsoid: [0.3, 0.2, 0.1],
        segment: None,
    }
}

fn group() -> impl Strategy<Value = Vec<ObjectObservation>> {
    prop::collection::vec(
        (prop::array::uniform3(-0.2f64..0.2), -0.5f64..0.5, 0.002f64..0.3),
        1..6,
    )
    .prop_map(|v| v.into_iter().enumerate().map(|(i, (t, y, d))| obs(i as u16, t, y, d)).collect())
}

/// Carathéodory: `p` is in the hull iff it is a non-negative affine
/// combination of some subset of at most four points. Each subset is solved
/// exactly by least squares on its affine coordinates.
fn in_convex_hull(p: &Vector3<f64>, pts: &[Vector3<f64>]) -> bool {
    let n = pts.len();
    (1u32..(1 << n)).filter(|m| m.count_ones() <= 4).any(|mask| {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let base = pts[idx[0]];
        let k = idx.len() - 1;
        let coords = if k == 0 {
            Some(DVector::zeros(0))
        } else {
            let a = DMatrix::from_fn(3, k, |r, c| pts[idx[c + 1]][r] - base[r]);
            let rhs = DVector::from_fn(3, |r, _| p[r] - base[r]);
            a.clone().svd(true, true).solve(&rhs, 1e-12).ok().filter(|x| (&a * x - &rhs).norm() < 1e-9)
        };
        let resid_ok = k > 0 || (p - base).norm() < 1e-9;
        coords.is_some_and(|x| resid_ok && x.iter().all(|v| *v >= -1e-9) && x.sum() <= 1.0 + 1e-9)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn identical_observations_fuse_to_the_input(
        t in prop::array::uniform3(-5.0f64..5.0), yaw in -3.0f64..3.0, d in 0.0f64..0.3, n in 1usize..8,
    ) {
        let g: Vec<_> = (0..n).map(|i| obs(i as u16, t, yaw, d)).collect();
        let f = fuse(&g, 1e-3).unwrap();
        prop_assert!((f.pose.t - Vector3::from(t)).norm() < 1e-9);
        prop_assert!(f.pose.q.angle_to(&g[0].pose.q) < 1e-9);
    }

    #[test]
    fn fused_position_lies_in_the_convex_hull(g in group()) {
        let f = fuse(&g, 1e-3).unwrap();
        let pts: Vec<_> = g.iter().map(|o| o.pose.t).collect();
        prop_assert!(in_convex_hull(&f.pose.t, &pts));
    }

    #[test]
    fn fusion_ignores_input_order(g in group(), seed in any::<u64>()) {
        let mut h = g.clone();
        let k = (seed as usize) % h.len();
        h.rotate_left(k);
        h.reverse();
        let a = fuse(&g, 1e-3).unwrap();
        let b = fuse(&h, 1e-3).unwrap();
        prop_assert_eq!(a.pose, b.pose);
    }

    #[test]
    fn weights_are_scale_invariant(g in group(), c in 1.0f64..50.0) {
        let scaled: Vec<_> = g.iter().cloned().map(|mut o| { o.assoc_dist *= c; o }).collect();
        let a = fuse(&g, 1e-3).unwrap();
        let b = fuse(&scaled, 1e-3).unwrap();
        prop_assert!((a.pose.t - b.pose.t).norm() < 1e-9);
        prop_assert!(geodesic_deg(&a.pose.q, &b.pose.q) < 1e-6);
    }

    #[test]
    fn grouping_partitions_and_keeps_classes_apart(
        pts in prop::collection::vec((0u16..3, prop::array::uniform3(-3.0f64..3.0), 0u16..3), 0..25),
    ) {
        let observations: Vec<_> = pts.iter().map(|(s, t, c)| {
            let mut o = obs(*s, *t, 0.0, 0.01);
            o.class_id = *c;
            o
        }).collect();
        let fs = FrameSet { reference_us: 0, observations: observations.clone(), sensors: vec![0, 1, 2] };
        let groups = group_by_instance(&fs, 0.5);
        prop_assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), observations.len());
        for g in &groups {
            prop_assert!(g.iter().all(|o| o.class_id == g[0].class_id));
        }
        // Any same-class pair within the gate shares a group.
        let gid = |o: &ObjectObservation| groups.iter().position(|g| g.contains(o)).unwrap();
        for a in &observations {
            for b in &observations {
                if a.class_id == b.class_id && (a.pose.t - b.pose.t).norm() <= 0.5 {
                    prop_assert_eq!(gid(a), gid(b));
                }
            }
        }
    }

    #[test]
    fn synchronizer_covers_every_observation_once(
        offsets in prop::collection::vec(prop::collection::vec(0u64..40_000, 1..12), 1..5),
    ) {
        let mut streams = BTreeMap::new();
        let mut total = 0;
        for (s, offs) in offsets.iter().enumerate() {
            let v: Vec<_> = offs.iter().enumerate().map(|(k, o)| {
                let mut ob = obs(s as u16, [0.0; 3], 0.0, 0.01);
                ob.timestamp_us = k as u64 * 1_000_000 + o;
                ob
            }).collect();
            total += v.len();
            streams.insert(s as u16, v);
        }
        let sets = synchronize(&streams, 250_000);
        prop_assert_eq!(sets.iter().map(|f| f.observations.len()).sum::<usize>(), total);
        prop_assert_eq!(sets.len(), offsets.iter().map(Vec::len).max().unwrap());
        for w in sets.windows(2) {
            prop_assert!(w[0].reference_us < w[1].reference_us);
        }
        for f in &sets {
            prop_assert!(f.observations.iter().all(|o| o.timestamp_us - f.reference_us <= 250_000));
        }
    }
}
