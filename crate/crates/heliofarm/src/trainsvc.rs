//! Remote training service: a length-prefixed wire protocol over TCP so
//! model training can run in-process or on another host with bit-identical
//! results.

use std::collections::HashMap;
use std::io::{self, Read as IoRead, Write as IoWrite};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridcast::{
    checkpoint,
    grid::{GridSpec, Location},
    net::{ForecastModel, ModelConfig},
    train::{build_day_frames, train_with_progress, Dataset, EpochMetrics},
    GridcastError, Standardizer,
};

/// Frame bodies larger than this are rejected on both ends.
pub const MAX_FRAME: usize = 256 * 1024 * 1024;
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
pub const IDLE_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_CONCURRENCY: usize = 2;

#[derive(Debug, Error)]
pub enum SvcError {
    #[error("frame of {0} bytes exceeds the 256 MiB cap")]
    FrameTooLarge(usize),
    #[error("truncated frame: header promised more bytes than arrived")]
    Truncated,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported message type '{0}'")]
    UnsupportedType(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Train(#[from] GridcastError),
}

mod b64_bytes {
    use super::{Engine, B64};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub id: String,
    pub farm: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub epochs: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub locations: Vec<Location>,
    /// Inline dataset: `days[d][m][s]` = sensor `s` at minute `m` of day
    /// `d`'s daylight window; null = missing reading.
    pub days: Vec<Vec<Vec<Option<f64>>>>,
    /// Checkpoint to resume from instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_b64")]
    pub resume: Option<Vec<u8>>,
}

mod opt_b64 {
    use super::{Engine, B64};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&B64.encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| B64.decode(s.as_bytes()).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub mae: f64,
    pub mse: f64,
}

impl From<EpochMetrics> for EpochReport {
    fn from(m: EpochMetrics) -> Self {
        Self { mae: m.mae, mse: m.mse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub id: String,
    /// 1-based epoch just completed.
    pub epoch: u32,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub id: String,
    #[serde(with = "b64_bytes")]
    pub checkpoint: Vec<u8>,
    pub metrics: Vec<EpochReport>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    TrainRequest(TrainRequest),
    TrainProgress(TrainProgress),
    TrainResult(TrainResult),
    ErrorReply(ErrorReply),
}

/// 4-byte big-endian length prefix + UTF-8 JSON body.
pub fn encode_frame(msg: &WireMessage) -> Result<Vec<u8>, SvcError> {
    let body = serde_json::to_vec(msg).map_err(|e| SvcError::Protocol(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(SvcError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Reads one frame; a short read surfaces [`SvcError::Truncated`] rather
/// than a partial message.
pub fn read_frame(r: &mut impl IoRead) -> Result<WireMessage, SvcError> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SvcError::Truncated
        } else {
            SvcError::Io(e)
        }
    })?;
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(SvcError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SvcError::Truncated
        } else {
            SvcError::Io(e)
        }
    })?;
    decode_frame(&body)
}

pub fn decode_frame(body: &[u8]) -> Result<WireMessage, SvcError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| SvcError::Protocol(e.to_string()))?;
    let ty = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| SvcError::Protocol("missing 'type' discriminator".into()))?;
    match ty {
        "train_request" | "train_progress" | "train_result" | "error_reply" => {
            serde_json::from_value(value).map_err(|e| SvcError::Protocol(e.to_string()))
        }
        other => Err(SvcError::UnsupportedType(other.to_string())),
    }
}

fn write_frame(w: &mut impl IoWrite, msg: &WireMessage) -> Result<(), SvcError> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: ForecastModel,
    pub metrics: Vec<EpochReport>,
    pub wall_seconds: f64,
}

/// Runs one training job from a request: fit the standardizer (or resume
/// from the embedded checkpoint), grid the frames, and train. `on_epoch`
/// returning false aborts the job.
pub fn execute(
    req: &TrainRequest,
    on_epoch: &mut dyn FnMut(u32, EpochReport) -> bool,
) -> Result<TrainOutcome, SvcError> {
    if req.epochs < 1 {
        return Err(SvcError::BadRequest("epochs must be >= 1".into()));
    }
    if req.start_date > req.end_date {
        return Err(SvcError::BadRequest("empty training interval".into()));
    }
    if req.days.is_empty() {
        return Err(SvcError::BadRequest("no training days supplied".into()));
    }
    let started = Instant::now();
    let mut model = match &req.resume {
        Some(bytes) => checkpoint::decode(bytes)?,
        None => {
            let values: Vec<f64> = req
                .days
                .iter()
                .flatten()
                .flatten()
                .filter_map(|v| *v)
                .collect();
            let scaler = Standardizer::fit(values.iter())?;
            ForecastModel::new(req.config.clone(), req.grid, scaler, req.seed)
        }
    };
    let mut days = Vec::with_capacity(req.days.len());
    for day in &req.days {
        days.push(build_day_frames(day, &req.locations, &model.grid, &model.scaler)?);
    }
    let data = Dataset { days };
    let metrics = train_with_progress(
        &mut model,
        &data,
        req.epochs as usize,
        req.seed,
        &mut |e, m| on_epoch(e as u32, m.into()),
    )?;
    Ok(TrainOutcome {
        model,
        metrics: metrics.into_iter().map(Into::into).collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// FIFO admission gate bounding concurrent training jobs.
struct Gate {
    state: Mutex<GateState>,
    cv: Condvar,
}

struct GateState {
    next_ticket: u64,
    serving: u64,
    running: usize,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            state: Mutex::new(GateState {
                next_ticket: 0,
                serving: 0,
                running: 0,
                cap: cap.max(1),
            }),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut st = self.state.lock().unwrap();
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        while !(st.serving == ticket && st.running < st.cap) {
            st = self.cv.wait(st).unwrap();
        }
        st.serving += 1;
        st.running += 1;
    }

    fn release(&self) {
        let mut st = self.state.lock().unwrap();
        st.running -= 1;
        drop(st);
        self.cv.notify_all();
    }
}

/// A running training server; shuts down (and joins) on drop.
pub struct Server {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` (e.g. `127.0.0.1:0`) and serves until dropped, with at
    /// most `cap` concurrent jobs; excess requests are queued FIFO.
    pub fn start(addr: &str, cap: usize) -> Result<Self, SvcError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let gate = Arc::new(Gate::new(cap));
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let gate = gate.clone();
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &gate) {
                        log::debug!("training connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr: local,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, gate: &Gate) -> Result<(), SvcError> {
    stream.set_read_timeout(Some(IDLE_TIMEOUT))?;
    stream.set_write_timeout(Some(IDLE_TIMEOUT))?;
    let req = match read_frame(&mut stream) {
        Ok(WireMessage::TrainRequest(req)) => req,
        Ok(other) => {
            let reply = ErrorReply {
                id: String::new(),
                message: format!("expected a train_request, got {other:?}"),
            };
            write_frame(&mut stream, &WireMessage::ErrorReply(reply))?;
            return Ok(());
        }
        Err(e) => {
            let message = match &e {
                SvcError::UnsupportedType(t) => format!("unsupported message type '{t}'"),
                other => format!("malformed request: {other}"),
            };
            let _ = write_frame(
                &mut stream,
                &WireMessage::ErrorReply(ErrorReply {
                    id: String::new(),
                    message,
                }),
            );
            return Err(e);
        }
    };

    gate.acquire();
    let result = run_job(&mut stream, &req);
    gate.release();

    match result {
        Ok(outcome) => write_frame(
            &mut stream,
            &WireMessage::TrainResult(TrainResult {
                id: req.id.clone(),
                checkpoint: checkpoint::encode(&outcome.model),
                metrics: outcome.metrics,
                wall_seconds: outcome.wall_seconds,
            }),
        ),
        // A broken pipe means the client went away: abort silently, never
        // surfacing a checkpoint for the dead request.
        Err(SvcError::Train(GridcastError::Aborted(_))) => Ok(()),
        Err(e) => {
            let _ = write_frame(
                &mut stream,
                &WireMessage::ErrorReply(ErrorReply {
                    id: req.id.clone(),
                    message: e.to_string(),
                }),
            );
            Ok(())
        }
    }
}

fn run_job(stream: &mut TcpStream, req: &TrainRequest) -> Result<TrainOutcome, SvcError> {
    let mut sink = stream.try_clone()?;
    let id = req.id.clone();
    execute(req, &mut |epoch, m| {
        write_frame(
            &mut sink,
            &WireMessage::TrainProgress(TrainProgress {
                id: id.clone(),
                epoch,
                mae: m.mae,
                mse: m.mse,
            }),
        )
        .is_ok()
    })
}

/// Runs a request locally (`endpoint == "local"`) or over the wire; either
/// way the result is bit-identical for a fixed seed/config/data.
pub fn remote_train(endpoint: &str, req: &TrainRequest) -> Result<TrainResult, SvcError> {
    if endpoint == "local" {
        let outcome = execute(req, &mut |epoch, m| {
            log::info!("train {} epoch {epoch}: mae={:.6} mse={:.6}", req.id, m.mae, m.mse);
            true
        })?;
        return Ok(TrainResult {
            id: req.id.clone(),
            checkpoint: checkpoint::encode(&outcome.model),
            metrics: outcome.metrics,
            wall_seconds: outcome.wall_seconds,
        });
    }
    let addr = endpoint
        .to_socket_addrs()
        .map_err(|e| SvcError::Protocol(format!("bad endpoint '{endpoint}': {e}")))?
        .next()
        .ok_or_else(|| SvcError::Protocol(format!("endpoint '{endpoint}' resolves to nothing")))?;
    let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)?;
    stream.set_read_timeout(Some(IDLE_TIMEOUT))?;
    stream.set_write_timeout(Some(IDLE_TIMEOUT))?;
    write_frame(&mut stream, &WireMessage::TrainRequest(req.clone()))?;
    loop {
        match read_frame(&mut stream)? {
            WireMessage::TrainProgress(p) => {
                log::info!("train {} epoch {}: mae={:.6} mse={:.6}", p.id, p.epoch, p.mae, p.mse);
            }
            WireMessage::TrainResult(r) => return Ok(r),
            WireMessage::ErrorReply(e) => return Err(SvcError::Remote(e.message)),
            WireMessage::TrainRequest(_) => {
                return Err(SvcError::Protocol("unexpected request from server".into()))
            }
        }
    }
}

/// Builds the per-day inline payload from raw per-minute readings keyed by
/// timestamp minute offset; convenience for callers holding datastore rows.
pub fn inline_days(
    per_day: &[HashMap<usize, Vec<Option<f64>>>],
    minutes_per_day: usize,
    sensors: usize,
) -> Vec<Vec<Vec<Option<f64>>>> {
    per_day
        .iter()
        .map(|day| {
            (0..minutes_per_day)
                .map(|m| day.get(&m).cloned().unwrap_or_else(|| vec![None; sensors]))
                .collect()
        })
        .collect()
}
