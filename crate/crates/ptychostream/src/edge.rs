//! The live-inference service: batches incoming frames, runs the current
//! surrogate snapshot on each batch, hot-swaps pushed model versions at
//! batch boundaries, stitches per-frame patches into a running canvas,
//! and keeps receive-to-result latency statistics.
//!
//! Three stages per connection: socket reader -> bounded queue (10,000
//! frames, blocking send for backpressure, never drops) -> inference
//! worker, which writes RESULT messages back on the same connection.
//! Patches land on the canvas at `geom::patch_origin`, the same centered
//! convention the training-label cropper uses.

use crate::clock::Clock;
use crate::field::RealImage;
use crate::geom;
use crate::simulator::DiffractionFrame;
use crate::surrogate::{self, SurrogateError, SurrogateModel};
use crate::wire::{encode, InferenceResult, Message, StreamDecoder, WireError};
use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("bad config: {0}")]
    BadConfig(&'static str),
    #[error("patch data length {got} does not match k*k = {need}")]
    BadPatch { got: usize, need: usize },
    #[error("pushed version {pushed} is not newer than current {current}")]
    StaleVersion { pushed: u64, current: u64 },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for EdgeError {
    fn from(e: std::io::Error) -> Self {
        EdgeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct BatcherConfig {
    pub batch_size: usize,
    pub flush_timeout: Duration,
    /// Passed through to preprocessing (the dose-upscale path).
    pub scale_factor: f64,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        BatcherConfig { batch_size: 8, flush_timeout: Duration::from_millis(10), scale_factor: 1.0 }
    }
}

impl BatcherConfig {
    pub fn validate(&self) -> Result<(), EdgeError> {
        if self.batch_size == 0 {
            return Err(EdgeError::BadConfig("batch_size must be >= 1"));
        }
        if self.flush_timeout.is_zero() {
            return Err(EdgeError::BadConfig("flush_timeout must be positive"));
        }
        if !(self.scale_factor > 0.0) {
            return Err(EdgeError::BadConfig("scale_factor must be positive"));
        }
        Ok(())
    }
}

/// Groups frames into batches of `batch_size`, or smaller ones once the
/// oldest buffered frame has waited `flush_timeout`. Time comes in from
/// the caller so the policy is exactly testable.
pub struct FrameBatcher {
    batch_size: usize,
    flush_timeout_ns: u64,
    buf: Vec<DiffractionFrame>,
    deadline_ns: Option<u64>,
}

impl FrameBatcher {
    pub fn new(config: &BatcherConfig) -> Self {
        FrameBatcher {
            batch_size: config.batch_size,
            flush_timeout_ns: config.flush_timeout.as_nanos() as u64,
            buf: Vec::new(),
            deadline_ns: None,
        }
    }

    fn take(&mut self) -> Option<Vec<DiffractionFrame>> {
        self.deadline_ns = None;
        if self.buf.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.buf))
        }
    }

    pub fn push(&mut self, frame: DiffractionFrame, now_ns: u64) -> Option<Vec<DiffractionFrame>> {
        if self.buf.is_empty() {
            self.deadline_ns = Some(now_ns + self.flush_timeout_ns);
        }
        self.buf.push(frame);
        if self.buf.len() >= self.batch_size {
            self.take()
        } else {
            None
        }
    }

    /// Emits a partial batch when the flush deadline has passed.
    pub fn tick(&mut self, now_ns: u64) -> Option<Vec<DiffractionFrame>> {
        match self.deadline_ns {
            Some(d) if now_ns >= d => self.take(),
            _ => None,
        }
    }

    /// Unconditional flush (scan end, connection close).
    pub fn flush(&mut self) -> Option<Vec<DiffractionFrame>> {
        self.take()
    }

    pub fn deadline_ns(&self) -> Option<u64> {
        self.deadline_ns
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

/// Running average of inferred patches over the scan area, kept as sum
/// and count buffers so arrival order cannot matter.
#[derive(Debug, Clone)]
pub struct StitchCanvas {
    height: usize,
    width: usize,
    amp_sum: Vec<f64>,
    phase_sum: Vec<f64>,
    count: Vec<u32>,
    frames_stitched: u64,
    clipped: u64,
}

impl StitchCanvas {
    pub fn new(height: usize, width: usize) -> Self {
        StitchCanvas {
            height,
            width,
            amp_sum: vec![0.0; height * width],
            phase_sum: vec![0.0; height * width],
            count: vec![0; height * width],
            frames_stitched: 0,
            clipped: 0,
        }
    }

    pub fn stitch(
        &mut self,
        position: (f64, f64),
        k: usize,
        amplitude: &[f32],
        phase: &[f32],
    ) -> Result<(), EdgeError> {
        if amplitude.len() != k * k || phase.len() != k * k {
            return Err(EdgeError::BadPatch {
                got: amplitude.len().min(phase.len()),
                need: k * k,
            });
        }
        let (oy, ox) = geom::patch_origin(position, k);
        let mut lost_pixels = false;
        for py in 0..k {
            for px in 0..k {
                let y = oy + py as i64;
                let x = ox + px as i64;
                if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
                    lost_pixels = true;
                    continue;
                }
                let at = y as usize * self.width + x as usize;
                self.amp_sum[at] += amplitude[py * k + px] as f64;
                self.phase_sum[at] += phase[py * k + px] as f64;
                self.count[at] += 1;
            }
        }
        if lost_pixels {
            self.clipped += 1;
        }
        self.frames_stitched += 1;
        Ok(())
    }

    pub fn stitch_result(&mut self, r: &InferenceResult) -> Result<(), EdgeError> {
        self.stitch(r.position, r.k as usize, &r.amplitude, &r.phase)
    }

    fn read_out(&self, sum: &[f64]) -> RealImage {
        RealImage::from_fn(self.height, self.width, |y, x| {
            let at = y * self.width + x;
            sum[at] / self.count[at].max(1) as f64
        })
    }

    pub fn amplitude_image(&self) -> RealImage {
        self.read_out(&self.amp_sum)
    }

    pub fn phase_image(&self) -> RealImage {
        self.read_out(&self.phase_sum)
    }

    /// Per-pixel patch coverage count; zero means never written.
    pub fn coverage(&self) -> RealImage {
        RealImage::from_fn(self.height, self.width, |y, x| self.count[y * self.width + x] as f64)
    }

    pub fn frames_stitched(&self) -> u64 {
        self.frames_stitched
    }

    pub fn clipped(&self) -> u64 {
        self.clipped
    }
}

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub frames: u64,
    pub mean_us: f64,
    pub std_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    /// Distinct model versions in order of first use.
    pub model_versions: Vec<u64>,
}

/// Nearest-rank percentile over sorted values.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Receive-to-result wall latency per frame, against an injectable clock.
pub struct LatencyRecorder {
    clock: Arc<dyn Clock>,
    pending: HashMap<u32, u64>,
    samples_ns: Vec<u64>,
    versions: Vec<u64>,
}

impl LatencyRecorder {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        LatencyRecorder { clock, pending: HashMap::new(), samples_ns: Vec::new(), versions: Vec::new() }
    }

    pub fn frame_received(&mut self, frame_index: u32) {
        self.pending.insert(frame_index, self.clock.now_ns());
    }

    pub fn result_ready(&mut self, frame_index: u32, model_version: u64) {
        if let Some(t0) = self.pending.remove(&frame_index) {
            self.samples_ns.push(self.clock.now_ns().saturating_sub(t0));
        }
        if self.versions.last() != Some(&model_version) {
            self.versions.push(model_version);
        }
    }

    /// `None` until at least one frame has completed; an empty service is
    /// not the same as one with zero-latency frames.
    pub fn report(&self) -> Option<LatencyReport> {
        if self.samples_ns.is_empty() {
            return None;
        }
        let mut sorted = self.samples_ns.clone();
        sorted.sort_unstable();
        let n = sorted.len() as f64;
        let mean_us = sorted.iter().map(|&v| v as f64 / 1e3).sum::<f64>() / n;
        let var = sorted
            .iter()
            .map(|&v| {
                let d = v as f64 / 1e3 - mean_us;
                d * d
            })
            .sum::<f64>()
            / n;
        Some(LatencyReport {
            frames: sorted.len() as u64,
            mean_us,
            std_us: var.sqrt(),
            p50_us: percentile(&sorted, 0.50) as f64 / 1e3,
            p90_us: percentile(&sorted, 0.90) as f64 / 1e3,
            p99_us: percentile(&sorted, 0.99) as f64 / 1e3,
            model_versions: self.versions.clone(),
        })
    }
}

/// Atomically replaceable immutable model snapshot. Batches grab an Arc
/// so a swap never tears a batch; versions only move forward.
pub struct ModelSlot {
    inner: RwLock<Option<Arc<SurrogateModel>>>,
}

impl ModelSlot {
    pub fn new(initial: Option<SurrogateModel>) -> Self {
        ModelSlot { inner: RwLock::new(initial.map(Arc::new)) }
    }

    pub fn snapshot(&self) -> Option<Arc<SurrogateModel>> {
        self.inner.read().expect("slot lock").clone()
    }

    pub fn current_version(&self) -> Option<u64> {
        self.inner.read().expect("slot lock").as_ref().map(|m| m.version)
    }

    /// Installs a strictly newer model; returns the acknowledged version.
    pub fn swap_model(&self, model: SurrogateModel) -> Result<u64, EdgeError> {
        let mut slot = self.inner.write().expect("slot lock");
        if let Some(current) = slot.as_ref() {
            if model.version <= current.version {
                return Err(EdgeError::StaleVersion {
                    pushed: model.version,
                    current: current.version,
                });
            }
        }
        let version = model.version;
        *slot = Some(Arc::new(model));
        Ok(version)
    }

    /// Deserialize-then-swap; corrupt bytes leave the old model in place.
    pub fn swap_bytes(&self, bytes: &[u8]) -> Result<u64, EdgeError> {
        let model = surrogate::deserialize(bytes)?;
        self.swap_model(model)
    }
}

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub batcher: BatcherConfig,
    /// Bounded frame queue; a full queue blocks the socket reader
    /// (backpressure), it never drops.
    pub queue_capacity: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            batcher: BatcherConfig::default(),
            queue_capacity: 10_000,
            canvas_height: 256,
            canvas_width: 256,
        }
    }
}

enum Work {
    Frame(DiffractionFrame),
    ScanEnd(u64),
}

struct Shared {
    slot: ModelSlot,
    canvas: Mutex<StitchCanvas>,
    latency: Mutex<LatencyRecorder>,
    errors: Mutex<Vec<String>>,
    shutdown: AtomicBool,
    clock: Arc<dyn Clock>,
    scale_factor: f64,
}

impl Shared {
    fn log(&self, what: impl Into<String>) {
        self.errors.lock().expect("error log").push(what.into());
    }
}

/// A running edge service bound to a frame port and a control port.
pub struct EdgeService {
    shared: Arc<Shared>,
    threads: Vec<std::thread::JoinHandle<()>>,
    frame_addr: SocketAddr,
    control_addr: SocketAddr,
}

impl EdgeService {
    pub fn start(
        frame_bind: &str,
        control_bind: &str,
        initial_model: Option<SurrogateModel>,
        config: EdgeConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<EdgeService, EdgeError> {
        config.batcher.validate()?;
        let frame_listener = TcpListener::bind(frame_bind)?;
        let control_listener = TcpListener::bind(control_bind)?;
        frame_listener.set_nonblocking(true)?;
        control_listener.set_nonblocking(true)?;
        let frame_addr = frame_listener.local_addr()?;
        let control_addr = control_listener.local_addr()?;

        let shared = Arc::new(Shared {
            slot: ModelSlot::new(initial_model),
            canvas: Mutex::new(StitchCanvas::new(config.canvas_height, config.canvas_width)),
            latency: Mutex::new(LatencyRecorder::new(clock.clone())),
            errors: Mutex::new(Vec::new()),
            shutdown: AtomicBool::new(false),
            clock,
            scale_factor: config.batcher.scale_factor,
        });

        let mut threads = Vec::new();
        {
            let shared = shared.clone();
            let config = config.clone();
            threads.push(std::thread::spawn(move || {
                accept_loop(frame_listener, shared, move |conn, shared| {
                    frame_connection(conn, shared, &config)
                })
            }));
        }
        {
            let shared = shared.clone();
            threads.push(std::thread::spawn(move || {
                accept_loop(control_listener, shared, control_connection)
            }));
        }
        Ok(EdgeService { shared, threads, frame_addr, control_addr })
    }

    pub fn frame_addr(&self) -> SocketAddr {
        self.frame_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn model_version(&self) -> Option<u64> {
        self.shared.slot.current_version()
    }

    pub fn canvas_snapshot(&self) -> StitchCanvas {
        self.shared.canvas.lock().expect("canvas lock").clone()
    }

    pub fn latency_stats(&self) -> Option<LatencyReport> {
        self.shared.latency.lock().expect("latency lock").report()
    }

    pub fn errors(&self) -> Vec<String> {
        self.shared.errors.lock().expect("error log").clone()
    }

    /// Stops accepting, closes workers, and joins every thread.
    pub fn stop(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    handler: impl Fn(TcpStream, Arc<Shared>) + Send + Sync + 'static,
) {
    let handler = Arc::new(handler);
    let mut conns: Vec<std::thread::JoinHandle<()>> = Vec::new();
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((conn, _)) => {
                let shared = shared.clone();
                let handler = handler.clone();
                conns.push(std::thread::spawn(move || handler(conn, shared)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                shared.log(format!("accept: {e}"));
                break;
            }
        }
    }
    for c in conns {
        let _ = c.join();
    }
}

/// Applies one decoded message on the reader thread; frames and scan ends
/// flow to the worker in arrival order.
fn reader_dispatch(
    msg: Message,
    shared: &Shared,
    tx: &SyncSender<Work>,
    writer: &Mutex<TcpStream>,
) {
    match msg {
        Message::Frame(frame) => {
            shared
                .latency
                .lock()
                .expect("latency lock")
                .frame_received(frame.frame_index);
            // blocking send; a full queue pauses this reader (backpressure)
            let _ = tx.send(Work::Frame(frame));
        }
        Message::ScanBegin { .. } => {}
        Message::ScanEnd { scan_id } => {
            let _ = tx.send(Work::ScanEnd(scan_id));
        }
        Message::Model(bytes) => match shared.slot.swap_bytes(&bytes) {
            Ok(_) => send_msg(writer, &Message::Heartbeat, shared),
            Err(e) => shared.log(format!("model push rejected: {e}")),
        },
        Message::Heartbeat => {}
        Message::Result(_) => shared.log("unexpected RESULT from client"),
    }
}

fn send_msg(writer: &Mutex<TcpStream>, msg: &Message, shared: &Shared) {
    match encode(msg) {
        Ok(bytes) => {
            let mut w = writer.lock().expect("writer lock");
            if let Err(e) = w.write_all(&bytes) {
                shared.log(format!("write: {e}"));
            }
        }
        Err(e) => shared.log(format!("encode: {e}")),
    }
}

fn frame_connection(conn: TcpStream, shared: Arc<Shared>, config: &EdgeConfig) {
    let writer = match conn.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(e) => {
            shared.log(format!("clone conn: {e}"));
            return;
        }
    };
    let (tx, rx) = mpsc::sync_channel::<Work>(config.queue_capacity);
    let worker = {
        let shared = shared.clone();
        let writer = writer.clone();
        let batcher_config = config.batcher.clone();
        std::thread::spawn(move || {
            let mut batcher = FrameBatcher::new(&batcher_config);
            loop {
                let wait = batcher
                    .deadline_ns()
                    .map(|d| Duration::from_nanos(d.saturating_sub(shared.clock.now_ns())))
                    .unwrap_or(Duration::from_millis(50))
                    .max(Duration::from_millis(1));
                match rx.recv_timeout(wait) {
                    Ok(Work::Frame(frame)) => {
                        if let Some(batch) = batcher.push(frame, shared.clock.now_ns()) {
                            infer_batch(&shared, &writer, batch);
                        }
                    }
                    Ok(Work::ScanEnd(scan_id)) => {
                        if let Some(batch) = batcher.flush() {
                            infer_batch(&shared, &writer, batch);
                        }
                        // echo only after every result of the scan is out
                        send_msg(&writer, &Message::ScanEnd { scan_id }, &shared);
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        if let Some(batch) = batcher.tick(shared.clock.now_ns()) {
                            infer_batch(&shared, &writer, batch);
                        }
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        if let Some(batch) = batcher.flush() {
                            infer_batch(&shared, &writer, batch);
                        }
                        break;
                    }
                }
            }
        })
    };

    let mut conn = conn;
    let _ = conn.set_read_timeout(Some(Duration::from_millis(10)));
    let mut dec = StreamDecoder::new();
    let mut chunk = vec![0u8; 64 * 1024];
    while !shared.shutdown.load(Ordering::SeqCst) {
        match conn.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                dec.push(&chunk[..n]);
                loop {
                    match dec.next_message() {
                        Ok(Some(msg)) => reader_dispatch(msg, &shared, &tx, &writer),
                        Ok(None) => break,
                        Err(e) => {
                            shared.log(format!("frame stream: {e}"));
                            drop(tx);
                            let _ = worker.join();
                            return;
                        }
                    }
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => {
                shared.log(format!("read: {e}"));
                break;
            }
        }
    }
    drop(tx);
    let _ = worker.join();
}

fn control_connection(conn: TcpStream, shared: Arc<Shared>) {
    let writer = match conn.try_clone() {
        Ok(w) => Mutex::new(w),
        Err(e) => {
            shared.log(format!("clone conn: {e}"));
            return;
        }
    };
    let mut conn = conn;
    let _ = conn.set_read_timeout(Some(Duration::from_millis(10)));
    let mut dec = StreamDecoder::new();
    let mut chunk = vec![0u8; 64 * 1024];
    while !shared.shutdown.load(Ordering::SeqCst) {
        match conn.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                dec.push(&chunk[..n]);
                loop {
                    match dec.next_message() {
                        Ok(Some(Message::Model(bytes))) => match shared.slot.swap_bytes(&bytes) {
                            Ok(_) => send_msg(&writer, &Message::Heartbeat, &shared),
                            Err(e) => shared.log(format!("model push rejected: {e}")),
                        },
                        Ok(Some(Message::Heartbeat)) => {
                            send_msg(&writer, &Message::Heartbeat, &shared)
                        }
                        Ok(Some(_)) => shared.log("unexpected message on control port"),
                        Ok(None) => break,
                        Err(e) => {
                            shared.log(format!("control stream: {e}"));
                            return;
                        }
                    }
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => {
                shared.log(format!("read: {e}"));
                break;
            }
        }
    }
}

/// Runs one whole batch under a single model snapshot; blocks (bounded
/// by shutdown) until a model exists at all.
fn infer_batch(shared: &Shared, writer: &Mutex<TcpStream>, batch: Vec<DiffractionFrame>) {
    let model = loop {
        if let Some(m) = shared.slot.snapshot() {
            break m;
        }
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let refs: Vec<&DiffractionFrame> = batch.iter().collect();
    let input = match surrogate::preprocess_batch(&refs, shared.scale_factor) {
        Ok(t) => t,
        Err(e) => {
            shared.log(format!("preprocess: {e}"));
            return;
        }
    };
    let (amp, phase) = match model.forward(&input) {
        Ok(out) => out,
        Err(e) => {
            shared.log(format!("forward: {e}"));
            return;
        }
    };
    let k = amp.shape().2;
    for (i, frame) in batch.iter().enumerate() {
        let result = InferenceResult {
            frame_index: frame.frame_index,
            position: frame.position,
            k: k as u16,
            model_version: model.version,
            amplitude: amp.batch(i).to_vec(),
            phase: phase.batch(i).to_vec(),
        };
        {
            let mut canvas = shared.canvas.lock().expect("canvas lock");
            if let Err(e) = canvas.stitch_result(&result) {
                shared.log(format!("stitch: {e}"));
            }
        }
        shared
            .latency
            .lock()
            .expect("latency lock")
            .result_ready(result.frame_index, result.model_version);
        send_msg(writer, &Message::Result(result), shared);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{FakeClock, RealClock};
    use crate::wire;
    use rand::seq::SliceRandom as _;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;

    fn frame(index: u32, n: usize) -> DiffractionFrame {
        let counts = (0..n * n).map(|i| ((i * 13 + index as usize * 7) % 900) as u16).collect();
        DiffractionFrame::new(1, index, (20.0 + index as f64, 24.0), 1.0, n, counts)
    }

    #[test]
    fn single_patch_reads_back_exactly() {
        let mut canvas = StitchCanvas::new(32, 32);
        let amp: Vec<f32> = (0..16).map(|i| i as f32 * 0.05).collect();
        let phase: Vec<f32> = (0..16).map(|i| i as f32 * 0.1 - 0.8).collect();
        canvas.stitch((10.0, 12.0), 4, &amp, &phase).unwrap();
        let img = canvas.amplitude_image();
        let ph = canvas.phase_image();
        // origin = position - k/2 = (8, 10)
        for y in 0..4 {
            for x in 0..4 {
                assert!((img.at(8 + y, 10 + x) - amp[y * 4 + x] as f64).abs() < 1e-9);
                assert!((ph.at(8 + y, 10 + x) - phase[y * 4 + x] as f64).abs() < 1e-9);
            }
        }
        assert_eq!(img.at(0, 0), 0.0);
        assert_eq!(canvas.frames_stitched(), 1);
        assert_eq!(canvas.clipped(), 0);
    }

    #[test]
    fn overlap_regions_hold_the_running_average() {
        let mut canvas = StitchCanvas::new(16, 16);
        let zeros = vec![0.0f32; 16];
        let ones = vec![1.0f32; 16];
        canvas.stitch((8.0, 6.0), 4, &zeros, &zeros).unwrap();
        canvas.stitch((8.0, 8.0), 4, &ones, &ones).unwrap();
        let img = canvas.amplitude_image();
        // columns 6..8 covered by both patches
        assert!((img.at(8, 6) - 0.5).abs() < 1e-12);
        assert!((img.at(8, 4) - 0.0).abs() < 1e-12);
        assert!((img.at(8, 9) - 1.0).abs() < 1e-12);
        // a third contribution shifts the shared pixels to (0+1+1)/3
        canvas.stitch((8.0, 8.0), 4, &ones, &ones).unwrap();
        let img = canvas.amplitude_image();
        assert!((img.at(8, 6) - 2.0 / 3.0).abs() < 1e-12);
        assert!((img.at(8, 9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stitch_order_cannot_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches: Vec<(f64, f64, Vec<f32>, Vec<f32>)> = (0..12)
            .map(|i| {
                let y = 6.0 + (i % 4) as f64 * 3.0;
                let x = 6.0 + (i / 4) as f64 * 4.0;
                let amp = (0..16).map(|j| ((i * 16 + j) as f32 * 0.37).sin()).collect();
                let ph = (0..16).map(|j| ((i * 16 + j) as f32 * 0.53).cos()).collect();
                (y, x, amp, ph)
            })
            .collect();
        let mut forward = StitchCanvas::new(24, 24);
        for (y, x, a, p) in &patches {
            forward.stitch((*y, *x), 4, a, p).unwrap();
        }
        let mut shuffled = patches.clone();
        shuffled.shuffle(&mut rng);
        let mut backward = StitchCanvas::new(24, 24);
        for (y, x, a, p) in &shuffled {
            backward.stitch((*y, *x), 4, a, p).unwrap();
        }
        for (a, b) in forward.phase_image().data().iter().zip(backward.phase_image().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_patches_clip_with_a_counter() {
        let mut canvas = StitchCanvas::new(8, 8);
        let vals = vec![1.0f32; 16];
        canvas.stitch((0.0, 0.0), 4, &vals, &vals).unwrap();
        assert_eq!(canvas.clipped(), 1);
        assert_eq!(canvas.frames_stitched(), 1);
        // the in-bounds quadrant still landed
        assert_eq!(canvas.amplitude_image().at(0, 0), 1.0);
        assert_eq!(canvas.coverage().at(0, 0), 1.0);
        assert_eq!(canvas.coverage().at(5, 5), 0.0);
        assert!(matches!(
            canvas.stitch((4.0, 4.0), 4, &vals[..9], &vals),
            Err(EdgeError::BadPatch { .. })
        ));
    }

    #[test]
    fn batcher_emits_full_batches_immediately() {
        let config = BatcherConfig::default();
        let mut b = FrameBatcher::new(&config);
        let mut batches = Vec::new();
        for i in 0..16 {
            if let Some(batch) = b.push(frame(i, 4), i as u64) {
                batches.push(batch);
            }
        }
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 8));
        assert_eq!(batches[0][0].frame_index, 0);
        assert_eq!(batches[1][7].frame_index, 15);
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn batcher_flushes_partials_after_the_timeout() {
        let config = BatcherConfig::default();
        let mut b = FrameBatcher::new(&config);
        let ms = 1_000_000u64;
        for i in 0..3 {
            assert!(b.push(frame(i, 4), i as u64 * ms).is_none());
        }
        // deadline is 10 ms after the first (oldest) frame
        assert!(b.tick(9 * ms).is_none());
        let batch = b.tick(10 * ms).unwrap();
        assert_eq!(batch.len(), 3);
        assert!(b.tick(20 * ms).is_none());
    }

    #[test]
    fn batch_size_one_is_per_frame_mode() {
        let config = BatcherConfig { batch_size: 1, ..Default::default() };
        let mut b = FrameBatcher::new(&config);
        for i in 0..3 {
            assert_eq!(b.push(frame(i, 4), 0).unwrap().len(), 1);
        }
    }

    #[test]
    fn model_slot_enforces_version_monotonicity() {
        let mut v1 = SurrogateModel::new(4, 1).unwrap();
        v1.version = 1;
        let mut v2 = v1.clone();
        v2.version = 2;
        let slot = ModelSlot::new(None);
        assert_eq!(slot.swap_bytes(&surrogate::serialize(&v1)).unwrap(), 1);
        assert_eq!(slot.swap_bytes(&surrogate::serialize(&v2)).unwrap(), 2);
        // stale push rejected, current model untouched
        let err = slot.swap_bytes(&surrogate::serialize(&v1)).unwrap_err();
        assert!(matches!(err, EdgeError::StaleVersion { pushed: 1, current: 2 }));
        assert_eq!(slot.current_version(), Some(2));
        // corrupt bytes rejected, old model retained
        let mut bytes = surrogate::serialize(&v2);
        bytes[0] = b'X';
        assert!(slot.swap_bytes(&bytes).is_err());
        assert_eq!(slot.current_version(), Some(2));
    }

    #[test]
    fn latency_p50_matches_a_fake_clock() {
        let clock = FakeClock::new();
        let mut rec = LatencyRecorder::new(clock.clone());
        assert!(rec.report().is_none());
        for i in 0..10 {
            rec.frame_received(i);
            clock.advance_ms(1);
            rec.result_ready(i, 1);
        }
        let report = rec.report().unwrap();
        assert_eq!(report.frames, 10);
        assert_eq!(report.p50_us, 1000.0);
        assert_eq!(report.p99_us, 1000.0);
        assert!((report.mean_us - 1000.0).abs() < 1e-9);
        assert_eq!(report.std_us, 0.0);
        assert_eq!(report.model_versions, vec![1]);
    }

    fn start_service(model: Option<SurrogateModel>) -> EdgeService {
        let config = EdgeConfig {
            canvas_height: 64,
            canvas_width: 64,
            ..Default::default()
        };
        EdgeService::start("127.0.0.1:0", "127.0.0.1:0", model, config, Arc::new(RealClock::new()))
            .unwrap()
    }

    fn drain_results(conn: &mut TcpStream, until_scan_end: u64) -> Vec<Message> {
        let mut dec = StreamDecoder::new();
        let mut chunk = [0u8; 16384];
        let mut got = Vec::new();
        loop {
            let n = conn.read(&mut chunk).expect("service reply");
            assert!(n > 0, "connection closed before ScanEnd echo");
            dec.push(&chunk[..n]);
            while let Some(msg) = dec.next_message().unwrap() {
                if msg == (Message::ScanEnd { scan_id: until_scan_end }) {
                    return got;
                }
                got.push(msg);
            }
        }
    }

    #[test]
    fn small_scan_is_inferred_exactly_once() {
        let mut model = SurrogateModel::new(6, 3).unwrap();
        model.version = 1;
        let service = start_service(Some(model));
        let mut conn = TcpStream::connect(service.frame_addr()).unwrap();
        conn.write_all(&encode(&Message::ScanBegin { scan_id: 1, n_points: 12, n: 16, k: 8 }).unwrap())
            .unwrap();
        for i in 0..12 {
            conn.write_all(&encode(&Message::Frame(frame(i, 16))).unwrap()).unwrap();
        }
        conn.write_all(&encode(&Message::ScanEnd { scan_id: 1 }).unwrap()).unwrap();
        let replies = drain_results(&mut conn, 1);
        let mut indices: Vec<u32> = replies
            .iter()
            .map(|m| match m {
                Message::Result(r) => {
                    assert_eq!(r.model_version, 1);
                    assert_eq!(r.k, 8);
                    r.frame_index
                }
                other => panic!("unexpected reply {other:?}"),
            })
            .collect();
        indices.sort_unstable();
        assert_eq!(indices, (0..12).collect::<Vec<_>>());
        let canvas = service.canvas_snapshot();
        assert_eq!(canvas.frames_stitched(), 12);
        let stats = service.latency_stats().unwrap();
        assert_eq!(stats.frames, 12);
        assert_eq!(stats.model_versions, vec![1]);
        service.stop();
    }

    #[test]
    fn mid_scan_swap_keeps_exactly_once_and_version_order() {
        let mut v1 = SurrogateModel::new(6, 3).unwrap();
        v1.version = 1;
        let mut v2 = SurrogateModel::new(6, 4).unwrap();
        v2.version = 2;
        let service = start_service(Some(v1));

        let mut conn = TcpStream::connect(service.frame_addr()).unwrap();
        for i in 0..8 {
            conn.write_all(&encode(&Message::Frame(frame(i, 16))).unwrap()).unwrap();
        }
        // push v2 over the control port and wait for the heartbeat ack
        let mut control = TcpStream::connect(service.control_addr()).unwrap();
        control
            .write_all(&encode(&Message::Model(surrogate::serialize(&v2))).unwrap())
            .unwrap();
        let mut ack = [0u8; 12];
        control.read_exact(&mut ack).unwrap();
        assert_eq!(wire::decode(&ack).unwrap(), Message::Heartbeat);
        assert_eq!(service.model_version(), Some(2));

        for i in 8..16 {
            conn.write_all(&encode(&Message::Frame(frame(i, 16))).unwrap()).unwrap();
        }
        conn.write_all(&encode(&Message::ScanEnd { scan_id: 1 }).unwrap()).unwrap();
        let replies = drain_results(&mut conn, 1);
        assert_eq!(replies.len(), 16);
        let versions: Vec<u64> = replies
            .iter()
            .map(|m| match m {
                Message::Result(r) => r.model_version,
                other => panic!("unexpected reply {other:?}"),
            })
            .collect();
        assert!(versions.windows(2).all(|w| w[0] <= w[1]), "versions {versions:?}");
        assert!(versions.iter().all(|v| *v == 1 || *v == 2));
        service.stop();
    }

    #[test]
    fn frames_buffer_until_the_first_model_arrives() {
        let service = start_service(None);
        let mut conn = TcpStream::connect(service.frame_addr()).unwrap();
        for i in 0..4 {
            conn.write_all(&encode(&Message::Frame(frame(i, 16))).unwrap()).unwrap();
        }
        conn.write_all(&encode(&Message::ScanEnd { scan_id: 9 }).unwrap()).unwrap();
        std::thread::sleep(Duration::from_millis(60));
        assert!(service.latency_stats().is_none(), "inference ran without a model");

        let mut v1 = SurrogateModel::new(6, 3).unwrap();
        v1.version = 1;
        let mut control = TcpStream::connect(service.control_addr()).unwrap();
        control
            .write_all(&encode(&Message::Model(surrogate::serialize(&v1))).unwrap())
            .unwrap();
        let replies = drain_results(&mut conn, 9);
        assert_eq!(replies.len(), 4);
        service.stop();
    }
}
