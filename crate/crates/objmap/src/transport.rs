//! Loopback/LAN TCP transport between sensors and the backend.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use objmap_core::protocol::{BackendSession, ProtocolError, ReceivedFrame, SessionLog};

use crate::backend::{Backend, BackendOutput};
use crate::AppError;

enum Event {
    Frame(ReceivedFrame),
    Closed { log: SessionLog, error: Option<ProtocolError> },
}

pub struct BackendServer {
    listener: TcpListener,
}

impl BackendServer {
    pub fn bind(addr: &str) -> Result<Self, AppError> {
        let listener = TcpListener::bind(addr).map_err(|source| AppError::Bind { addr: addr.to_string(), source })?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Accepts `connections` sensor sessions and feeds them through `backend`
    /// until every session has ended. Each connection gets a reader thread;
    /// frames reach the backend through one bounded queue, so a slow backend
    /// blocks the readers and, through TCP flow control, the sensors.
    ///
    /// Returns the backend-side session logs ordered by sensor id. A protocol
    /// error closes the offending connection and is reported after all other
    /// sessions have drained.
    pub fn serve(
        self,
        connections: usize,
        capacity: usize,
        accept_timeout: Duration,
        backend: &mut Backend,
        mut on_output: impl FnMut(BackendOutput) -> Result<(), AppError>,
    ) -> Result<Vec<SessionLog>, AppError> {
        let (tx, rx) = sync_channel::<Event>(capacity);
        let listener = self.listener;
        let acceptor = thread::spawn(move || -> Result<(), AppError> {
            listener.set_nonblocking(true).map_err(|e| AppError::Worker(e.to_string()))?;
            let deadline = Instant::now() + accept_timeout;
            let mut accepted = 0;
            while accepted < connections {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::info!("sensor connected from {peer}");
                        stream.set_nonblocking(false).map_err(|e| AppError::Worker(e.to_string()))?;
                        let tx = tx.clone();
                        thread::spawn(move || read_session(stream, tx));
                        accepted += 1;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        if Instant::now() > deadline {
                            return Err(AppError::Worker(format!("only {accepted} of {connections} sensors connected")));
                        }
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => return Err(AppError::Worker(format!("accept failed: {e}"))),
                }
            }
            Ok(())
        });

        let mut logs = Vec::new();
        let mut first_error = None;
        let mut result = Ok(());
        for ev in rx {
            let outputs = match ev {
                Event::Frame(f) => backend.on_frame(f),
                Event::Closed { log, error } => {
                    if let Some(e) = error {
                        log::error!("sensor session {} failed: {e}", log.sensor_id);
                        first_error.get_or_insert(e);
                    }
                    let out = if log.frames > 0 { backend.on_close(log.sensor_id) } else { Vec::new() };
                    logs.push(log);
                    out
                }
            };
            for o in outputs {
                if result.is_ok() {
                    result = on_output(o);
                }
            }
        }
        for o in backend.finish() {
            if result.is_ok() {
                result = on_output(o);
            }
        }
        let accept_result = acceptor.join().map_err(|_| AppError::Worker("acceptor panicked".into()))?;
        accept_result?;
        result?;
        if let Some(e) = first_error {
            return Err(AppError::Protocol(e));
        }
        logs.sort_by_key(|l| l.sensor_id);
        Ok(logs)
    }
}

fn read_session(stream: TcpStream, tx: SyncSender<Event>) {
    let mut session = BackendSession::new(BufReader::new(stream));
    let error = loop {
        match session.next_frame() {
            Ok(Some(frame)) => {
                if tx.send(Event::Frame(frame)).is_err() {
                    return;
                }
            }
            Ok(None) => break None,
            Err(e) => break Some(e),
        }
    };
    let _ = tx.send(Event::Closed { log: session.into_log(), error });
}

pub fn connect(addr: &str) -> Result<TcpStream, AppError> {
    let stream = TcpStream::connect(addr).map_err(|source| AppError::Connect { addr: addr.to_string(), source })?;
    stream.set_nodelay(true).map_err(|source| AppError::Connect { addr: addr.to_string(), source })?;
    Ok(stream)
}
