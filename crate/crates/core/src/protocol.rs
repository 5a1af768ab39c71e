//! Binary wire format for sensor-to-backend streaming.
//!
//! All integers and floats are little-endian. Every message travels inside an
//! envelope:
//!
//! ```text
//! magic "OMAP" (4) | version u8 | msg_type u8 | payload_len u32 | payload
//! ```
//!
//! | type | payload |
//! |------|---------|
//! | 1 observation | `ts u64 | sensor u16 | class u16 | pos 3×f64 | quat wxyz 4×f64 | assoc f32 | ellipsoid 3×f32` (84 B) |
//! | 2 segment | `ts u64 | sensor u16 | class u16 | count u32` then `count ×` (`xyz 3×f64 | rgb u32 | conf f32 | semantic u32`) |
//! | 3 frame end | `ts u64 | sensor u16` |
//!
//! Receivers skip unknown message types using `payload_len`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::pose::ObjectObservation;
use crate::segmentation::{Frame, Point, PointCloudSegment};

pub const MAGIC: [u8; 4] = *b"OMAP";
pub const VERSION: u8 = 1;
pub const ENVELOPE_HEADER_LEN: usize = 10;
pub const OBSERVATION_LEN: usize = 84;
pub const SEGMENT_HEADER_LEN: usize = 16;
pub const SEGMENT_POINT_LEN: usize = 36;
pub const FRAME_END_LEN: usize = 10;
pub const MAX_SEGMENT_POINTS: usize = (1 << 24) - 1;
/// Upper bound accepted for any payload; larger lengths are treated as corruption.
pub const MAX_PAYLOAD_LEN: usize = SEGMENT_HEADER_LEN + SEGMENT_POINT_LEN * MAX_SEGMENT_POINTS;

pub const MSG_OBSERVATION: u8 = 1;
pub const MSG_SEGMENT: u8 = 2;
pub const MSG_FRAME_END: u8 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("bad length: expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("quaternion norm {0} is not unit")]
    BadQuaternion(f64),
    #[error("segment header announces {header} points but body holds {body}")]
    CountMismatch { header: usize, body: usize },
    #[error("segment has {0} points, limit is {MAX_SEGMENT_POINTS}")]
    TooManyPoints(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("payload length {0} exceeds limit")]
    OversizedPayload(usize),
    #[error("stream truncated inside an envelope after {0} bytes")]
    Truncated(usize),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.b[self.at..self.at + N].try_into().expect("length checked by caller");
        self.at += N;
        out
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn encode_observation(obs: &ObjectObservation<f64>) -> [u8; OBSERVATION_LEN] {
    let mut out = [0u8; OBSERVATION_LEN];
    let mut w = Vec::with_capacity(OBSERVATION_LEN);
    w.extend_from_slice(&obs.timestamp_us.to_le_bytes());
    w.extend_from_slice(&obs.sensor_id.to_le_bytes());
    w.extend_from_slice(&obs.class_id.to_le_bytes());
    for v in obs.pose.t.iter() {
        w.extend_from_slice(&v.to_le_bytes());
    }
    let q = obs.pose.q.quaternion();
    for v in [q.w, q.i, q.j, q.k] {
        w.extend_from_slice(&v.to_le_bytes());
    }
    w.extend_from_slice(&(obs.assoc_dist as f32).to_le_bytes());
    for v in obs.ellipsoid {
        w.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.copy_from_slice(&w);
    out
}

/// Inverse of [`encode_observation`]. The quaternion is taken as transmitted
/// (no renormalisation) so that re-encoding reproduces the input bytes.
pub fn decode_observation(bytes: &[u8]) -> Result<ObjectObservation<f64>, ProtocolError> {
    if bytes.len() != OBSERVATION_LEN {
        return Err(ProtocolError::BadLength { expected: OBSERVATION_LEN, got: bytes.len() });
    }
    let mut c = Cursor { b: bytes, at: 0 };
    let timestamp_us = c.u64();
    let sensor_id = c.u16();
    let class_id = c.u16();
    let t = Vector3::new(c.f64(), c.f64(), c.f64());
    let q = Quaternion::new(c.f64(), c.f64(), c.f64(), c.f64());
    let norm = q.norm();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(ProtocolError::BadQuaternion(norm));
    }
    let assoc_dist = c.f32() as f64;
    let ellipsoid = [c.f32() as f64, c.f32() as f64, c.f32() as f64];
    Ok(ObjectObservation {
        timestamp_us,
        sensor_id,
        class_id,
        pose: Pose { t, q: UnitQuaternion::new_unchecked(q) },
        assoc_dist,
        ellipsoid,
        segment: None,
    })
}

pub fn segment_len(points: usize) -> usize {
    SEGMENT_HEADER_LEN + SEGMENT_POINT_LEN * points
}

pub fn encode_segment(seg: &PointCloudSegment<f64>) -> Result<Vec<u8>, ProtocolError> {
    let n = seg.points.len();
    if n > MAX_SEGMENT_POINTS {
        return Err(ProtocolError::TooManyPoints(n));
    }
    let mut w = Vec::with_capacity(segment_len(n));
    w.extend_from_slice(&seg.timestamp_us.to_le_bytes());
    w.extend_from_slice(&seg.sensor_id.to_le_bytes());
    w.extend_from_slice(&seg.class_id.to_le_bytes());
    w.extend_from_slice(&(n as u32).to_le_bytes());
    for p in &seg.points {
        for v in p.xyz.iter() {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&p.rgb.to_le_bytes());
        w.extend_from_slice(&p.confidence.to_le_bytes());
        w.extend_from_slice(&p.semantic_id.to_le_bytes());
    }
    Ok(w)
}

/// Decodes a world-frame segment.
pub fn decode_segment(bytes: &[u8]) -> Result<PointCloudSegment<f64>, ProtocolError> {
    if bytes.len() < SEGMENT_HEADER_LEN {
        return Err(ProtocolError::BadLength { expected: SEGMENT_HEADER_LEN, got: bytes.len() });
    }
    let mut c = Cursor { b: bytes, at: 0 };
    let timestamp_us = c.u64();
    let sensor_id = c.u16();
    let class_id = c.u16();
    let count = c.u32() as usize;
    let body = bytes.len() - SEGMENT_HEADER_LEN;
    if body % SEGMENT_POINT_LEN != 0 {
        return Err(ProtocolError::BadLength { expected: segment_len(count), got: bytes.len() });
    }
    if body / SEGMENT_POINT_LEN != count {
        return Err(ProtocolError::CountMismatch { header: count, body: body / SEGMENT_POINT_LEN });
    }
    let points = (0..count)
        .map(|_| Point {
            xyz: Vector3::new(c.f64(), c.f64(), c.f64()),
            rgb: c.u32(),
            confidence: c.f32(),
            semantic_id: c.u32(),
        })
        .collect();
    Ok(PointCloudSegment { points, frame: Frame::World, timestamp_us, sensor_id, class_id })
}

pub fn encode_frame_end(timestamp_us: u64, sensor_id: u16) -> [u8; FRAME_END_LEN] {
    let mut out = [0u8; FRAME_END_LEN];
    out[..8].copy_from_slice(&timestamp_us.to_le_bytes());
    out[8..].copy_from_slice(&sensor_id.to_le_bytes());
    out
}

pub fn decode_frame_end(bytes: &[u8]) -> Result<(u64, u16), ProtocolError> {
    if bytes.len() != FRAME_END_LEN {
        return Err(ProtocolError::BadLength { expected: FRAME_END_LEN, got: bytes.len() });
    }
    let mut c = Cursor { b: bytes, at: 0 };
    Ok((c.u64(), c.u16()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn wire_len(&self) -> usize {
        ENVELOPE_HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_envelope<W: Write>(w: &mut W, msg_type: u8, payload: &[u8]) -> io::Result<usize> {
    let mut head = [0u8; ENVELOPE_HEADER_LEN];
    head[..4].copy_from_slice(&MAGIC);
    head[4] = VERSION;
    head[5] = msg_type;
    head[6..].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(payload)?;
    Ok(ENVELOPE_HEADER_LEN + payload.len())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Reads one envelope; `Ok(None)` on a clean end of stream.
pub fn read_envelope<R: Read>(r: &mut R) -> Result<Option<Envelope>, ProtocolError> {
    let mut head = [0u8; ENVELOPE_HEADER_LEN];
    let n = read_full(r, &mut head)?;
    if n == 0 {
        return Ok(None);
    }
    if n < ENVELOPE_HEADER_LEN {
        return Err(ProtocolError::Truncated(n));
    }
    let magic: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if head[4] != VERSION {
        return Err(ProtocolError::BadVersion(head[4]));
    }
    let len = u32::from_le_bytes(head[6..].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::OversizedPayload(len));
    }
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got < len {
        return Err(ProtocolError::Truncated(ENVELOPE_HEADER_LEN + got));
    }
    Ok(Some(Envelope { msg_type: head[5], payload }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Observation(ObjectObservation<f64>),
    Segment(PointCloudSegment<f64>),
    FrameEnd { timestamp_us: u64, sensor_id: u16 },
    Unknown { msg_type: u8, len: usize },
}

pub fn decode_message(env: &Envelope) -> Result<Message, ProtocolError> {
    Ok(match env.msg_type {
        MSG_OBSERVATION => Message::Observation(decode_observation(&env.payload)?),
        MSG_SEGMENT => Message::Segment(decode_segment(&env.payload)?),
        MSG_FRAME_END => {
            let (timestamp_us, sensor_id) = decode_frame_end(&env.payload)?;
            Message::FrameEnd { timestamp_us, sensor_id }
        }
        other => Message::Unknown { msg_type: other, len: env.payload.len() },
    })
}

/// Byte accounting for one session, split by message type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLog {
    pub sensor_id: u16,
    pub frames: u64,
    pub first_ts_us: Option<u64>,
    pub last_ts_us: Option<u64>,
    /// Payload bytes keyed by message type.
    pub payload_bytes: BTreeMap<u8, u64>,
    pub messages: BTreeMap<u8, u64>,
    /// Total bytes on the wire including envelope headers.
    pub wire_bytes: u64,
}

impl SessionLog {
    pub fn new(sensor_id: u16) -> Self {
        Self { sensor_id, ..Default::default() }
    }

    fn record(&mut self, msg_type: u8, payload_len: usize) {
        *self.payload_bytes.entry(msg_type).or_default() += payload_len as u64;
        *self.messages.entry(msg_type).or_default() += 1;
        self.wire_bytes += (ENVELOPE_HEADER_LEN + payload_len) as u64;
    }

    fn frame(&mut self, ts: u64) {
        self.frames += 1;
        self.first_ts_us.get_or_insert(ts);
        self.last_ts_us = Some(ts);
    }

    pub fn payload(&self, msg_type: u8) -> u64 {
        self.payload_bytes.get(&msg_type).copied().unwrap_or(0)
    }

    /// Covered stream time: frame count times the mean frame interval.
    pub fn duration_s(&self) -> f64 {
        match (self.first_ts_us, self.last_ts_us) {
            (Some(a), Some(b)) if self.frames > 1 && b > a => {
                (b - a) as f64 * 1e-6 * self.frames as f64 / (self.frames - 1) as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    ObservationsOnly,
    WithSegments,
}

/// Sensor side of a session: writes envelopes and keeps a [`SessionLog`].
pub struct SensorSession<W: Write> {
    writer: W,
    mode: StreamMode,
    log: SessionLog,
}

impl<W: Write> SensorSession<W> {
    pub fn new(writer: W, sensor_id: u16, mode: StreamMode) -> Self {
        Self { writer, mode, log: SessionLog::new(sensor_id) }
    }

    fn send(&mut self, msg_type: u8, payload: &[u8]) -> io::Result<()> {
        write_envelope(&mut self.writer, msg_type, payload)?;
        self.log.record(msg_type, payload.len());
        Ok(())
    }

    /// Sends all observations of one frame followed by a frame-end marker.
    /// In segment mode each observation's segment follows it directly.
    pub fn send_frame(&mut self, timestamp_us: u64, observations: &[ObjectObservation<f64>]) -> Result<(), ProtocolError> {
        for obs in observations {
            self.send(MSG_OBSERVATION, &encode_observation(obs))?;
            if self.mode == StreamMode::WithSegments {
                let empty;
                let seg = match &obs.segment {
                    Some(s) => s,
                    None => {
                        empty = PointCloudSegment::empty(obs.class_id, obs.sensor_id, obs.timestamp_us, Frame::World);
                        &empty
                    }
                };
                let mut seg = seg.clone();
                seg.timestamp_us = obs.timestamp_us;
                seg.sensor_id = obs.sensor_id;
                self.send(MSG_SEGMENT, &encode_segment(&seg)?)?;
            }
        }
        self.send(MSG_FRAME_END, &encode_frame_end(timestamp_us, self.log.sensor_id))?;
        self.log.frame(timestamp_us);
        self.writer.flush()?;
        Ok(())
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn finish(mut self) -> io::Result<(W, SessionLog)> {
        self.writer.flush()?;
        Ok((self.writer, self.log))
    }
}

/// A complete sensor frame as reassembled by the backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub sensor_id: u16,
    pub timestamp_us: u64,
    pub observations: Vec<ObjectObservation<f64>>,
}

/// Backend side of a session: demultiplexes envelopes into frames and pairs
/// segments with observations by `(timestamp, sensor, ordinal)`.
pub struct BackendSession<R: Read> {
    reader: R,
    log: SessionLog,
    pending: Vec<ObjectObservation<f64>>,
    segments: BTreeMap<(u64, u16), VecDeque<PointCloudSegment<f64>>>,
}

impl<R: Read> BackendSession<R> {
    pub fn new(reader: R) -> Self {
        Self { reader, log: SessionLog::default(), pending: Vec::new(), segments: BTreeMap::new() }
    }

    /// Next complete frame, or `Ok(None)` when the stream ends cleanly.
    pub fn next_frame(&mut self) -> Result<Option<ReceivedFrame>, ProtocolError> {
        while let Some(env) = read_envelope(&mut self.reader)? {
            self.log.record(env.msg_type, env.payload.len());
            match decode_message(&env)? {
                Message::Observation(o) => {
                    self.log.sensor_id = o.sensor_id;
                    self.pending.push(o);
                }
                Message::Segment(s) => {
                    self.segments.entry((s.timestamp_us, s.sensor_id)).or_default().push_back(s);
                }
                Message::FrameEnd { timestamp_us, sensor_id } => {
                    self.log.sensor_id = sensor_id;
                    self.log.frame(timestamp_us);
                    let mut observations = std::mem::take(&mut self.pending);
                    for o in &mut observations {
                        if let Some(q) = self.segments.get_mut(&(o.timestamp_us, o.sensor_id)) {
                            o.segment = q.pop_front();
                        }
                    }
                    self.segments.clear();
                    return Ok(Some(ReceivedFrame { sensor_id, timestamp_us, observations }));
                }
                Message::Unknown { .. } => {}
            }
        }
        Ok(None)
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn into_log(self) -> SessionLog {
        self.log
    }
}

/// Payload bandwidth of one session (bytes/s).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorBandwidth {
    pub sensor_id: u16,
    pub observation_bps: f64,
    pub segment_bps: f64,
    pub control_bps: f64,
    pub wire_bps: f64,
}

/// Payload bandwidth per message category (bytes/s), summed over sessions,
/// with the per-session breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub duration_s: f64,
    pub observation_bps: f64,
    pub segment_bps: f64,
    pub control_bps: f64,
    pub other_bps: f64,
    pub total_payload_bps: f64,
    pub wire_bps: f64,
    pub per_sensor: Vec<SensorBandwidth>,
}

impl BandwidthReport {
    /// Mean over sessions of `f`, e.g. the observation rate of one sensor.
    pub fn per_sensor_mean(&self, f: impl Fn(&SensorBandwidth) -> f64) -> f64 {
        if self.per_sensor.is_empty() {
            0.0
        } else {
            self.per_sensor.iter().map(f).sum::<f64>() / self.per_sensor.len() as f64
        }
    }
}

/// Aggregates session logs over a common duration. `duration_s` defaults to
/// the longest session's covered stream time; an idle report is all zeros.
pub fn bandwidth_report(logs: &[SessionLog], duration_s: Option<f64>) -> BandwidthReport {
    let duration = duration_s.unwrap_or_else(|| logs.iter().map(SessionLog::duration_s).fold(0.0, f64::max));
    if !(duration > 0.0) {
        return BandwidthReport::default();
    }
    let sum = |f: &dyn Fn(&SessionLog) -> u64| logs.iter().map(f).sum::<u64>() as f64 / duration;
    let known = [MSG_OBSERVATION, MSG_SEGMENT, MSG_FRAME_END];
    let mut per_sensor: Vec<SensorBandwidth> = logs
        .iter()
        .map(|l| SensorBandwidth {
            sensor_id: l.sensor_id,
            observation_bps: l.payload(MSG_OBSERVATION) as f64 / duration,
            segment_bps: l.payload(MSG_SEGMENT) as f64 / duration,
            control_bps: l.payload(MSG_FRAME_END) as f64 / duration,
            wire_bps: l.wire_bytes as f64 / duration,
        })
        .collect();
    per_sensor.sort_by_key(|b| b.sensor_id);
    BandwidthReport {
        duration_s: duration,
        observation_bps: sum(&|l| l.payload(MSG_OBSERVATION)),
        segment_bps: sum(&|l| l.payload(MSG_SEGMENT)),
        control_bps: sum(&|l| l.payload(MSG_FRAME_END)),
        other_bps: sum(&|l| l.payload_bytes.iter().filter(|(k, _)| !known.contains(k)).map(|(_, v)| *v).sum()),
        total_payload_bps: sum(&|l| l.payload_bytes.values().sum()),
        wire_bps: sum(&|l| l.wire_bytes),
        per_sensor,
    }
}
