use std::io::Cursor;

use objmap_core::geometry::Pose;
use objmap_core::nalgebra::{Quaternion, UnitQuaternion, Vector3};
use objmap_core::protocol::*;
use objmap_core::segmentation::{Frame, Point};
use objmap_core::{ObjectObservation, PointCloudSegment};
use proptest::prelude::*;

fn observation() -> impl Strategy<Value = ObjectObservation> {
    (
        any::<u64>(),
        any::<u16>(),
        any::<u16>(),
        prop::array::uniform3(-1e6f64..1e6),
        prop::array::uniform4(-1.0f64..1.0),
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        prop::array::uniform3(any::<f32>().prop_filter("finite", |v| v.is_finite())),
    )
        .prop_filter("non-degenerate quaternion", |(_, _, _, _, q, _, _)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(ts, s, c, t, q, d, e)| ObjectObservation {
            timestamp_us: ts,
            sensor_id: s,
            class_id: c,
            pose: Pose::new(Vector3::from(t), UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]))),
            assoc_dist: d as f64,
            ellipsoid: e.map(|v| v as f64),
            segment: None,
        })
}

fn segment() -> impl Strategy<Value = PointCloudSegment> {
    (
        any::<u64>(),
        any::<u16>(),
        any::<u16>(),
        prop::collection::vec((prop::array::uniform3(-1e3f64..1e3), any::<u32>(), 0f32..1.0, any::<u32>()), 0..300),
    )
        .prop_map(|(ts, s, c, pts)| PointCloudSegment {
            points: pts
                .into_iter()
                .map(|(xyz, rgb, confidence, semantic_id)| Point { xyz: Vector3::from(xyz), rgb, confidence, semantic_id })
                .collect(),
            frame: Frame::World,
            timestamp_us: ts,
            sensor_id: s,
            class_id: c,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn observation_round_trip(o in observation()) {
        let bytes = encode_observation(&o);
        prop_assert_eq!(bytes.len(), OBSERVATION_LEN);
        let back = decode_observation(&bytes).unwrap();
        prop_assert_eq!(&back, &o);
        prop_assert_eq!(encode_observation(&back), bytes);
    }

    #[test]
    fn frame_end_round_trip(ts in any::<u64>(), s in any::<u16>()) {
        prop_assert_eq!(decode_frame_end(&encode_frame_end(ts, s)).unwrap(), (ts, s));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = decode_observation(&bytes);
        let _ = decode_segment(&bytes);
        let _ = decode_frame_end(&bytes);
        let mut r = Cursor::new(&bytes);
        while let Ok(Some(env)) = read_envelope(&mut r) {
            let _ = decode_message(&env);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segment_round_trip(s in segment()) {
        let bytes = encode_segment(&s).unwrap();
        prop_assert_eq!(bytes.len(), segment_len(s.points.len()));
        let back = decode_segment(&bytes).unwrap();
        prop_assert_eq!(back.points, s.points.clone());
        prop_assert_eq!((back.timestamp_us, back.sensor_id, back.class_id), (s.timestamp_us, s.sensor_id, s.class_id));
    }

    #[test]
    fn envelope_streams_survive_unknown_types(
        msgs in prop::collection::vec((any::<u8>(), prop::collection::vec(any::<u8>(), 0..64)), 0..20),
    ) {
        let mut wire = Vec::new();
        for (t, p) in &msgs {
            write_envelope(&mut wire, *t, p).unwrap();
        }
        prop_assert_eq!(wire.len(), msgs.iter().map(|(_, p)| ENVELOPE_HEADER_LEN + p.len()).sum::<usize>());
        let mut r = Cursor::new(&wire);
        for (t, p) in &msgs {
            let env = read_envelope(&mut r).unwrap().unwrap();
            prop_assert_eq!(env.msg_type, *t);
            prop_assert_eq!(&env.payload, p);
            if ![MSG_OBSERVATION, MSG_SEGMENT, MSG_FRAME_END].contains(t) {
                prop_assert_eq!(decode_message(&env).unwrap(), Message::Unknown { msg_type: *t, len: p.len() });
            }
        }
        prop_assert!(read_envelope(&mut r).unwrap().is_none());
    }

    #[test]
    fn sessions_deliver_frames_and_count_bytes(
        frames in prop::collection::vec(prop::collection::vec((observation(), segment()), 0..4), 1..6),
        with_segments in any::<bool>(),
    ) {
        let mode = if with_segments { StreamMode::WithSegments } else { StreamMode::ObservationsOnly };
        let mut tx = SensorSession::new(Vec::new(), 3, mode);
        let mut sent = Vec::new();
        for (k, f) in frames.iter().enumerate() {
            let ts = 1_000_000 * (k as u64 + 1);
            let obs: Vec<_> = f.iter().map(|(o, s)| {
                let mut o = o.clone();
                o.timestamp_us = ts;
                o.sensor_id = 3;
                let mut s = s.clone();
                s.timestamp_us = ts;
                s.sensor_id = 3;
                s.class_id = o.class_id;
                o.segment = Some(s);
                o
            }).collect();
            tx.send_frame(ts, &obs).unwrap();
            sent.push(obs);
        }
        let (wire, log) = tx.finish().unwrap();
        prop_assert_eq!(log.wire_bytes as usize, wire.len());
        let mut rx = BackendSession::new(Cursor::new(wire));
        for obs in &sent {
            let f = rx.next_frame().unwrap().unwrap();
            prop_assert_eq!(f.observations.len(), obs.len());
            for (a, b) in f.observations.iter().zip(obs) {
                prop_assert_eq!(a.pose, b.pose);
                prop_assert_eq!(a.segment.is_some(), with_segments);
                if with_segments {
                    prop_assert_eq!(&a.segment.as_ref().unwrap().points, &b.segment.as_ref().unwrap().points);
                }
            }
        }
        prop_assert!(rx.next_frame().unwrap().is_none());
        prop_assert_eq!(rx.log(), &log);
    }
}
