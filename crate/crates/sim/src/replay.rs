//! Replay of recorded sensor byte streams.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use objmap_core::protocol::{decode_frame_end, read_envelope, Envelope, ProtocolError, MSG_FRAME_END};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt replay file {path} at byte {offset}: {reason}")]
    CorruptFile { path: PathBuf, offset: u64, reason: ProtocolError },
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timing {
    AsFastAsPossible,
    /// Pace frame-end markers by their timestamps, scaled by `speed`.
    Original { speed: f64 },
}

/// File name of a sensor's recorded stream inside a replay directory.
pub fn stream_file_name(sensor_id: u16) -> String {
    format!("sensor_{sensor_id}.omap")
}

/// Reads every envelope of a recorded stream.
pub fn read_stream(path: &Path) -> Result<Vec<Envelope>, ReplayError> {
    let bytes = std::fs::read(path).map_err(|source| ReplayError::Io { path: path.to_path_buf(), source })?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    let mut offset = 0u64;
    loop {
        match read_envelope(&mut cur) {
            Ok(Some(env)) => {
                offset += env.wire_len() as u64;
                out.push(env);
            }
            Ok(None) => return Ok(out),
            Err(reason) => return Err(ReplayError::CorruptFile { path: path.to_path_buf(), offset, reason }),
        }
    }
}

/// Re-emits a recorded stream byte for byte. Returns the number of envelopes.
pub fn replay_to<W: Write>(path: &Path, out: &mut W, timing: Timing) -> Result<usize, ReplayError> {
    let envs = read_stream(path)?;
    let io_err = |source| ReplayError::Io { path: path.to_path_buf(), source };
    let start = Instant::now();
    let mut first_ts = None;
    for env in &envs {
        if let (Timing::Original { speed }, true) = (timing, env.msg_type == MSG_FRAME_END) {
            if let Ok((ts, _)) = decode_frame_end(&env.payload) {
                let t0 = *first_ts.get_or_insert(ts);
                let due = Duration::from_secs_f64((ts - t0) as f64 * 1e-6 / speed.max(1e-6));
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        }
        out.write_all(&env.to_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(envs.len())
}
