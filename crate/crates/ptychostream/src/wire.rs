//! The length-prefixed binary protocol joining simulator, edge service,
//! and orchestrator: frames out, model pushes in, results and control
//! messages back.
//!
//! Every message is a 12-byte header (magic "PTYS", proto version, type,
//! flags, reserved, payload length u32 LE) followed by the body. Little
//! endian throughout; counts are u16 matching the detector's 16-bit mode.
//! v1 never compresses, so flags and reserved must be zero. Capture files
//! are plain concatenations of encoded messages and replay byte-for-byte.

use crate::simulator::DiffractionFrame;
use std::io::{Read as _, Write as _};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PTYS";
pub const PROTO_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
/// Payload cap; a 64 MiB frame would be a 5792x5792 detector, far past
/// anything this artifact generates.
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

pub const DEFAULT_FRAME_PORT: u16 = 48620;
pub const DEFAULT_CONTROL_PORT: u16 = 48621;

/// Frame-stream port, honoring the PTYCHOSTREAM_PORT override.
pub fn frame_port() -> u16 {
    std::env::var("PTYCHOSTREAM_PORT")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_FRAME_PORT)
}

/// Model-push/control port: always one above the frame port.
pub fn control_port() -> u16 {
    frame_port() + 1
}

const MSG_FRAME: u8 = 1;
const MSG_MODEL: u8 = 2;
const MSG_RESULT: u8 = 3;
const MSG_SCAN_BEGIN: u8 = 4;
const MSG_SCAN_END: u8 = 5;
const MSG_HEARTBEAT: u8 = 6;

/// One inferred patch pair, tagged with the model version that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub frame_index: u32,
    pub position: (f64, f64),
    pub k: u16,
    pub model_version: u64,
    pub amplitude: Vec<f32>,
    pub phase: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Frame(DiffractionFrame),
    /// Serialized model bytes, opaque to the transport.
    Model(Vec<u8>),
    Result(InferenceResult),
    ScanBegin { scan_id: u64, n_points: u32, n: u16, k: u16 },
    ScanEnd { scan_id: u64 },
    Heartbeat,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 64 MiB cap")]
    TooLarge(usize),
    #[error("stream does not start with PTYS magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadMsgType(u8),
    #[error("malformed message body: {0}")]
    BadBody(&'static str),
    #[error("message not encodable: {0}")]
    InvalidMessage(&'static str),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}

fn frame_body(f: &DiffractionFrame) -> Result<Vec<u8>, WireError> {
    let n = f.n();
    if n > u16::MAX as usize {
        return Err(WireError::InvalidMessage("frame side exceeds u16"));
    }
    let mut body = Vec::with_capacity(34 + 2 * n * n);
    body.extend_from_slice(&f.scan_id.to_le_bytes());
    body.extend_from_slice(&f.frame_index.to_le_bytes());
    body.extend_from_slice(&f.position.0.to_le_bytes());
    body.extend_from_slice(&f.position.1.to_le_bytes());
    body.extend_from_slice(&f.exposure_ms.to_le_bytes());
    body.extend_from_slice(&(n as u16).to_le_bytes());
    for &c in f.counts() {
        body.extend_from_slice(&c.to_le_bytes());
    }
    Ok(body)
}

fn result_body(r: &InferenceResult) -> Result<Vec<u8>, WireError> {
    let kk = r.k as usize * r.k as usize;
    if r.amplitude.len() != kk || r.phase.len() != kk {
        return Err(WireError::InvalidMessage("result patches must be k*k"));
    }
    let mut body = Vec::with_capacity(30 + 8 * kk);
    body.extend_from_slice(&r.frame_index.to_le_bytes());
    body.extend_from_slice(&r.position.0.to_le_bytes());
    body.extend_from_slice(&r.position.1.to_le_bytes());
    body.extend_from_slice(&r.k.to_le_bytes());
    body.extend_from_slice(&r.model_version.to_le_bytes());
    for v in r.amplitude.iter().chain(&r.phase) {
        body.extend_from_slice(&v.to_le_bytes());
    }
    Ok(body)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let (ty, body) = match msg {
        Message::Frame(f) => (MSG_FRAME, frame_body(f)?),
        Message::Model(bytes) => (MSG_MODEL, bytes.clone()),
        Message::Result(r) => (MSG_RESULT, result_body(r)?),
        Message::ScanBegin { scan_id, n_points, n, k } => {
            let mut body = Vec::with_capacity(16);
            body.extend_from_slice(&scan_id.to_le_bytes());
            body.extend_from_slice(&n_points.to_le_bytes());
            body.extend_from_slice(&n.to_le_bytes());
            body.extend_from_slice(&k.to_le_bytes());
            (MSG_SCAN_BEGIN, body)
        }
        Message::ScanEnd { scan_id } => (MSG_SCAN_END, scan_id.to_le_bytes().to_vec()),
        Message::Heartbeat => (MSG_HEARTBEAT, Vec::new()),
    };
    if body.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(PROTO_VERSION);
    out.push(ty);
    out.push(0);
    out.push(0);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Body<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.at + n;
        if end > self.buf.len() {
            return Err(WireError::BadBody("body shorter than its fields"));
        }
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len 2")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, WireError> {
        (0..count).map(|_| self.f32()).collect()
    }

    fn finish(self) -> Result<(), WireError> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::BadBody("trailing bytes in body"))
        }
    }
}

fn decode_body(ty: u8, buf: &[u8]) -> Result<Message, WireError> {
    let mut b = Body { buf, at: 0 };
    match ty {
        MSG_FRAME => {
            let scan_id = b.u64()?;
            let frame_index = b.u32()?;
            let position = (b.f64()?, b.f64()?);
            let exposure_ms = b.f32()?;
            let n = b.u16()? as usize;
            let counts = b
                .take(2 * n * n)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("len 2")))
                .collect();
            b.finish()?;
            Ok(Message::Frame(DiffractionFrame::new(
                scan_id,
                frame_index,
                position,
                exposure_ms,
                n,
                counts,
            )))
        }
        MSG_MODEL => Ok(Message::Model(buf.to_vec())),
        MSG_RESULT => {
            let frame_index = b.u32()?;
            let position = (b.f64()?, b.f64()?);
            let k = b.u16()?;
            let model_version = b.u64()?;
            let kk = k as usize * k as usize;
            let amplitude = b.f32s(kk)?;
            let phase = b.f32s(kk)?;
            b.finish()?;
            Ok(Message::Result(InferenceResult {
                frame_index,
                position,
                k,
                model_version,
                amplitude,
                phase,
            }))
        }
        MSG_SCAN_BEGIN => {
            let msg = Message::ScanBegin {
                scan_id: b.u64()?,
                n_points: b.u32()?,
                n: b.u16()?,
                k: b.u16()?,
            };
            b.finish()?;
            Ok(msg)
        }
        MSG_SCAN_END => {
            let msg = Message::ScanEnd { scan_id: b.u64()? };
            b.finish()?;
            Ok(msg)
        }
        MSG_HEARTBEAT => {
            b.finish()?;
            Ok(Message::Heartbeat)
        }
        other => Err(WireError::BadMsgType(other)),
    }
}

/// Incremental frame reassembler for one connection. Arbitrary
/// fragmentation is fine; partial trailing bytes stay buffered. Any
/// header or body violation poisons the decoder permanently, because a
/// framing error leaves no way to find the next message boundary.
#[derive(Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    poisoned: Option<WireError>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn poison(&mut self, e: WireError) -> WireError {
        self.poisoned = Some(e.clone());
        e
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if let Some(e) = &self.poisoned {
            return Err(e.clone());
        }
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        if self.buf[0..4] != MAGIC {
            return Err(self.poison(WireError::BadMagic));
        }
        if self.buf[4] != PROTO_VERSION {
            let v = self.buf[4];
            return Err(self.poison(WireError::BadVersion(v)));
        }
        if self.buf[6] != 0 || self.buf[7] != 0 {
            return Err(self.poison(WireError::BadBody("nonzero flags/reserved in v1")));
        }
        let len = u32::from_le_bytes(self.buf[8..12].try_into().expect("len 4")) as usize;
        if len > MAX_PAYLOAD {
            return Err(self.poison(WireError::TooLarge(len)));
        }
        if self.buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let ty = self.buf[5];
        let msg = match decode_body(ty, &self.buf[HEADER_LEN..HEADER_LEN + len]) {
            Ok(m) => m,
            Err(e) => return Err(self.poison(e)),
        };
        self.buf.drain(..HEADER_LEN + len);
        Ok(Some(msg))
    }
}

/// Decodes one self-contained buffer that must hold exactly one message.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let mut dec = StreamDecoder::new();
    dec.push(bytes);
    match dec.next_message()? {
        Some(msg) if dec.buffered() == 0 => Ok(msg),
        Some(_) => Err(WireError::BadBody("trailing bytes after message")),
        None => Err(WireError::BadBody("incomplete message")),
    }
}

/// Appends encoded messages to a replayable capture file.
pub fn write_capture(path: &Path, messages: &[Message]) -> Result<(), WireError> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for msg in messages {
        file.write_all(&encode(msg)?)?;
    }
    Ok(())
}

/// Replays a capture file; a file ending mid-message is corrupt.
pub fn read_capture(path: &Path) -> Result<Vec<Message>, WireError> {
    let bytes = std::fs::read(path)?;
    let mut dec = StreamDecoder::new();
    dec.push(&bytes);
    let mut out = Vec::new();
    while let Some(msg) = dec.next_message()? {
        out.push(msg);
    }
    if dec.buffered() != 0 {
        return Err(WireError::BadBody("capture ends mid-message"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ThroughputReport {
    pub messages: u64,
    pub bytes: u64,
    pub elapsed: Duration,
}

impl ThroughputReport {
    pub fn msgs_per_sec(&self) -> f64 {
        if self.elapsed.is_zero() {
            0.0
        } else {
            self.messages as f64 / self.elapsed.as_secs_f64()
        }
    }

    pub fn gbps(&self) -> f64 {
        if self.elapsed.is_zero() {
            0.0
        } else {
            self.bytes as f64 * 8.0 / self.elapsed.as_secs_f64() / 1e9
        }
    }
}

/// Blasts synthetic n x n frames over loopback for `duration` and reports
/// what the receiving decoder sustained.
pub fn throughput_probe(frame_n: usize, duration: Duration) -> Result<ThroughputReport, WireError> {
    if duration.is_zero() {
        return Ok(ThroughputReport::default());
    }
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let receiver = std::thread::spawn(move || -> Result<(u64, u64), WireError> {
        let (mut conn, _) = listener.accept()?;
        let mut dec = StreamDecoder::new();
        let mut chunk = vec![0u8; 1 << 20];
        let (mut messages, mut bytes) = (0u64, 0u64);
        loop {
            let n = conn.read(&mut chunk)?;
            if n == 0 {
                break;
            }
            bytes += n as u64;
            dec.push(&chunk[..n]);
            while dec.next_message()?.is_some() {
                messages += 1;
            }
        }
        Ok((messages, bytes))
    });

    let counts: Vec<u16> = (0..frame_n * frame_n).map(|i| (i % 65536) as u16).collect();
    let frame = DiffractionFrame::new(1, 0, (0.0, 0.0), 1.0, frame_n, counts);
    let encoded = encode(&Message::Frame(frame))?;
    let mut conn = TcpStream::connect(addr)?;
    conn.set_nodelay(true)?;
    let start = Instant::now();
    while start.elapsed() < duration {
        conn.write_all(&encoded)?;
    }
    drop(conn);
    let (messages, bytes) = receiver.join().expect("receiver thread")?;
    Ok(ThroughputReport { messages, bytes, elapsed: start.elapsed() })
}
