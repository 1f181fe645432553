//! The continual-learning controller. On every completed scan it runs
//! ePIE, crops training pairs, scores the live surrogate against the
//! fresh labels, and either queues a retrain (gap above tolerance) or
//! suspends reconstruction down to a slow verification cadence. Retrains
//! run on the full accumulated corpus; each produces a strictly higher
//! model version that is registered, then pushed to the edge with
//! exponential backoff.
//!
//! Everything on disk is crash-recoverable without a database: the
//! corpus is (frame capture, amplitude PGM, phase PGM) triples plus an
//! index file, the registry an append-only TSV log.

use crate::clock::Clock;
use crate::epie::{self, EpieConfig, EpieError, LabeledPair};
use crate::field::{ComplexField, CoreError, RealImage};
use crate::imageio::{self, PgmError};
use crate::metrics;
use crate::simulator::{DiffractionFrame, ScanPlan};
use crate::surrogate::{self, SurrogateError, SurrogateModel, TrainConfig};
use crate::wire::{self, Message, WireError};
use num_complex::Complex64;
use rand::seq::SliceRandom as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("bad config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Epie(#[from] EpieError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("registry: {0}")]
    Registry(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("validation needs at least one pair")]
    NoPairs,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        OrchestratorError::Io(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// Retrain when 1 - mean SSIM exceeds this; equality stays within
    /// tolerance and suspends.
    pub mismatch_tolerance: f64,
    /// Verification cadence while suspended (stand-in for "once every
    /// hour" at full scale).
    pub suspended_interval: Duration,
    pub corpus_dir: PathBuf,
    pub retrain: TrainConfig,
    pub epie: EpieConfig,
    /// Reconstruction canvas the scans are assumed to fit in.
    pub object_height: usize,
    pub object_width: usize,
    /// Width of the cold-start network.
    pub model_width: usize,
    pub corpus_cap: usize,
    pub push_backoff_base: Duration,
    pub push_backoff_cap: Duration,
    pub push_max_attempts: usize,
    pub seed: u64,
}

impl OrchestratorConfig {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        OrchestratorConfig {
            mismatch_tolerance: 0.10,
            suspended_interval: Duration::from_secs(120),
            corpus_dir: corpus_dir.into(),
            retrain: TrainConfig::default(),
            epie: EpieConfig::default(),
            object_height: 256,
            object_width: 256,
            model_width: surrogate::DEFAULT_WIDTH,
            corpus_cap: 120_000,
            push_backoff_base: Duration::from_secs(1),
            push_backoff_cap: Duration::from_secs(60),
            push_max_attempts: 6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(self.mismatch_tolerance > 0.0 && self.mismatch_tolerance < 1.0) {
            return Err(OrchestratorError::BadConfig("mismatch_tolerance must be in (0, 1)"));
        }
        if self.corpus_cap == 0 {
            return Err(OrchestratorError::BadConfig("corpus_cap must be >= 1"));
        }
        if self.push_max_attempts == 0 {
            return Err(OrchestratorError::BadConfig("push_max_attempts must be >= 1"));
        }
        Ok(())
    }
}

/// Delay before push attempt `attempt` is retried: base * 2^attempt,
/// capped.
pub fn backoff_delay(attempt: u32, base: Duration, cap: Duration) -> Duration {
    let factor = 1u32 << attempt.min(20);
    base.saturating_mul(factor).min(cap)
}

/// Delivery of serialized model bytes to the edge. The TCP impl talks
/// the wire protocol; tests substitute recorders.
pub trait ModelPusher: Send + Sync {
    fn push(&self, bytes: &[u8]) -> Result<(), String>;
}

pub struct TcpModelPusher {
    pub addr: String,
    pub ack_timeout: Duration,
}

impl TcpModelPusher {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpModelPusher { addr: addr.into(), ack_timeout: Duration::from_secs(5) }
    }
}

impl ModelPusher for TcpModelPusher {
    /// A push only counts once the edge acks with a heartbeat; the edge
    /// stays silent on rejected or corrupt pushes.
    fn push(&self, bytes: &[u8]) -> Result<(), String> {
        use std::io::Read as _;
        let mut conn = std::net::TcpStream::connect(&self.addr).map_err(|e| e.to_string())?;
        conn.set_read_timeout(Some(self.ack_timeout)).map_err(|e| e.to_string())?;
        let msg = wire::encode(&Message::Model(bytes.to_vec())).map_err(|e| e.to_string())?;
        conn.write_all(&msg).map_err(|e| e.to_string())?;
        let mut dec = wire::StreamDecoder::new();
        let mut chunk = [0u8; 1024];
        loop {
            let n = conn.read(&mut chunk).map_err(|e| format!("no ack: {e}"))?;
            if n == 0 {
                return Err("connection closed before ack".into());
            }
            dec.push(&chunk[..n]);
            match dec.next_message().map_err(|e| e.to_string())? {
                Some(Message::Heartbeat) => return Ok(()),
                Some(other) => return Err(format!("unexpected ack {other:?}")),
                None => {}
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub version: u64,
    pub path: PathBuf,
    pub val_loss: f64,
    pub corpus_size: usize,
    pub unix_ms: u64,
}

/// Append-only model log, one TSV line per registered version:
/// `version<TAB>path<TAB>val_loss<TAB>corpus_size<TAB>unix_ms`.
pub struct ModelRegistry {
    path: PathBuf,
    entries: Vec<RegistryEntry>,
}

impl ModelRegistry {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let path = path.into();
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in std::fs::read_to_string(&path)?.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let bad = |what| OrchestratorError::Registry(format!("line {}: {what}", i + 1));
                if fields.len() != 5 {
                    return Err(bad("expected 5 tab-separated fields"));
                }
                let entry = RegistryEntry {
                    version: fields[0].parse().map_err(|_| bad("bad version"))?,
                    path: PathBuf::from(fields[1]),
                    val_loss: fields[2].parse().map_err(|_| bad("bad val_loss"))?,
                    corpus_size: fields[3].parse().map_err(|_| bad("bad corpus_size"))?,
                    unix_ms: fields[4].parse().map_err(|_| bad("bad unix_ms"))?,
                };
                if entries.last().map_or(false, |p: &RegistryEntry| entry.version <= p.version) {
                    return Err(bad("versions must strictly increase"));
                }
                entries.push(entry);
            }
        }
        Ok(ModelRegistry { path, entries })
    }

    pub fn append(&mut self, entry: RegistryEntry) -> Result<(), OrchestratorError> {
        if let Some(last) = self.entries.last() {
            if entry.version <= last.version {
                return Err(OrchestratorError::Registry(format!(
                    "version {} not above current {}",
                    entry.version, last.version
                )));
            }
        }
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(
            file,
            "{}\t{}\t{}\t{}\t{}",
            entry.version,
            entry.path.display(),
            entry.val_loss,
            entry.corpus_size,
            entry.unix_ms
        )?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn current(&self) -> Option<&RegistryEntry> {
        self.entries.last()
    }

    pub fn next_version(&self) -> u64 {
        self.current().map_or(1, |e| e.version + 1)
    }
}

/// FIFO-capped labeled-pair store: per pair a one-message frame capture,
/// an amplitude PGM, and a phase PGM (with range sidecars), all listed
/// in `index.txt` in arrival order.
pub struct CorpusStore {
    dir: PathBuf,
    cap: usize,
    stems: VecDeque<String>,
    next_id: u64,
}

impl CorpusStore {
    pub fn open(dir: impl Into<PathBuf>, cap: usize) -> Result<Self, OrchestratorError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let index = dir.join("index.txt");
        let mut stems = VecDeque::new();
        let mut next_id = 0;
        if index.exists() {
            for line in std::fs::read_to_string(&index)?.lines() {
                if line.is_empty() {
                    continue;
                }
                if let Some(id) = line.strip_prefix("pair_").and_then(|s| s.parse::<u64>().ok()) {
                    next_id = next_id.max(id + 1);
                }
                stems.push_back(line.to_string());
            }
        }
        Ok(CorpusStore { dir, cap, stems, next_id })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    fn paths(&self, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            self.dir.join(format!("{stem}.cap")),
            self.dir.join(format!("{stem}_amp.pgm")),
            self.dir.join(format!("{stem}_phase.pgm")),
        )
    }

    fn rewrite_index(&self) -> Result<(), OrchestratorError> {
        let mut body = String::new();
        for stem in &self.stems {
            body.push_str(stem);
            body.push('\n');
        }
        std::fs::write(self.dir.join("index.txt"), body)?;
        Ok(())
    }

    pub fn append(&mut self, pair: &LabeledPair) -> Result<(), OrchestratorError> {
        let stem = format!("pair_{:08}", self.next_id);
        self.next_id += 1;
        let (cap, amp, phase) = self.paths(&stem);
        wire::write_capture(&cap, std::slice::from_ref(&Message::Frame(pair.frame.clone())))?;
        imageio::write_pgm16(&amp, &pair.amplitude)?;
        imageio::write_pgm16(&phase, &pair.phase)?;
        self.stems.push_back(stem);
        while self.stems.len() > self.cap {
            let old = self.stems.pop_front().expect("nonempty");
            let (cap, amp, phase) = self.paths(&old);
            for p in [&cap, &amp, &phase] {
                let _ = std::fs::remove_file(p);
            }
            let _ = std::fs::remove_file(amp.with_extension("pgm.range"));
            let _ = std::fs::remove_file(phase.with_extension("pgm.range"));
        }
        self.rewrite_index()
    }

    pub fn append_all(&mut self, pairs: &[LabeledPair]) -> Result<(), OrchestratorError> {
        for pair in pairs {
            self.append(pair)?;
        }
        Ok(())
    }

    /// Reads every stored pair back, oldest first. Label values come back
    /// through the PGM range sidecars, so they carry 16-bit quantization.
    pub fn load_all(&self) -> Result<Vec<LabeledPair>, OrchestratorError> {
        let mut pairs = Vec::with_capacity(self.stems.len());
        for stem in &self.stems {
            let (cap, amp, phase) = self.paths(stem);
            let messages = wire::read_capture(&cap)?;
            let frame = match messages.as_slice() {
                [Message::Frame(f)] => f.clone(),
                _ => {
                    return Err(OrchestratorError::Corpus(format!(
                        "{stem}.cap does not hold exactly one frame"
                    )))
                }
            };
            pairs.push(LabeledPair {
                frame,
                amplitude: imageio::read_pgm16(&amp)?,
                phase: imageio::read_pgm16(&phase)?,
            });
        }
        Ok(pairs)
    }
}

/// Single-flight retrain queue: at most one job runs; triggers that
/// arrive meanwhile collapse into one pending rerun, so no trigger is
/// ever lost and bursts cost at most two runs.
#[derive(Default)]
struct CoalesceState {
    running: bool,
    pending: bool,
    runs_completed: u64,
}

#[derive(Clone)]
pub struct RetrainCoalescer {
    state: Arc<(Mutex<CoalesceState>, Condvar)>,
}

impl RetrainCoalescer {
    pub fn new() -> Self {
        RetrainCoalescer { state: Arc::new((Mutex::new(CoalesceState::default()), Condvar::new())) }
    }

    /// Returns true when a worker was started, false when the trigger
    /// coalesced into the pending slot. A coalesced rerun re-executes the
    /// job of the trigger that started the worker; jobs must therefore
    /// re-read their inputs (the retrain job reloads the full corpus).
    pub fn trigger(&self, job: impl Fn() + Send + 'static) -> bool {
        {
            let mut s = self.state.0.lock().expect("coalescer lock");
            if s.running {
                s.pending = true;
                return false;
            }
            s.running = true;
        }
        let state = self.state.clone();
        std::thread::spawn(move || loop {
            job();
            let (lock, cvar) = &*state;
            let mut s = lock.lock().expect("coalescer lock");
            s.runs_completed += 1;
            if s.pending {
                s.pending = false;
                drop(s);
                continue;
            }
            s.running = false;
            cvar.notify_all();
            break;
        });
        true
    }

    pub fn is_running(&self) -> bool {
        self.state.0.lock().expect("coalescer lock").running
    }

    pub fn runs_completed(&self) -> u64 {
        self.state.0.lock().expect("coalescer lock").runs_completed
    }

    /// Blocks until no job is running and none is pending.
    pub fn wait_idle(&self) {
        let (lock, cvar) = &*self.state;
        let mut s = lock.lock().expect("coalescer lock");
        while s.running {
            s = cvar.wait(s).expect("coalescer lock");
        }
    }
}

impl Default for RetrainCoalescer {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Active,
    Suspended,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    ColdStart,
    RetrainQueued,
    Suspended,
    Skipped,
    EpieFailed,
}

#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub scan_id: u64,
    pub gap: Option<f64>,
    pub action: Action,
}

pub struct WorkflowState {
    pub mode: Mode,
    pub last_reconstruction_ns: Option<u64>,
    pub log: Vec<ScanRecord>,
}

/// Mode implied by a validation outcome; the boundary is inclusive on
/// the within-tolerance side.
pub fn mode_for_gap(gap: f64, tolerance: f64) -> Mode {
    if gap > tolerance {
        Mode::Active
    } else {
        Mode::Suspended
    }
}

/// Mismatch gap: 1 - mean SSIM between the model's inferred phase and
/// the ePIE phase label, after global phase alignment per pair.
pub fn validate_model(
    model: &SurrogateModel,
    pairs: &[&LabeledPair],
) -> Result<f64, OrchestratorError> {
    if pairs.is_empty() {
        return Err(OrchestratorError::NoPairs);
    }
    let mut total = 0.0;
    for pair in pairs {
        let input = surrogate::preprocess(&pair.frame, 1.0)?;
        let (_, phase) = model.forward(&input)?;
        let k = phase.shape().2;
        let inferred = RealImage::from_fn(k, k, |y, x| phase.at(0, 0, y, x) as f64);
        total += metrics::phase_agreement(&inferred, &pair.phase, 1.0, None)?;
    }
    Ok(1.0 - total / pairs.len() as f64)
}

/// Seeded choice of the held-out validation indices: a fresh 10% (at
/// least one) of the new scan's pairs.
fn validation_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let take = (n / 10).max(1);
    idx.truncate(take);
    idx
}

struct SharedState {
    corpus: Mutex<CorpusStore>,
    registry: Mutex<ModelRegistry>,
    live: RwLock<Option<SurrogateModel>>,
    pusher: Arc<dyn ModelPusher>,
    config: OrchestratorConfig,
    events: Mutex<Vec<String>>,
}

impl SharedState {
    fn log(&self, what: impl Into<String>) {
        self.events.lock().expect("event log").push(what.into());
    }
}

fn unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One full retrain: load the whole corpus, train from the live weights
/// (or fresh ones), register version current+1, then push with backoff.
/// Failures log and leave prior state intact; a push failure still keeps
/// the model registered.
fn retrain_once(shared: &SharedState) {
    let pairs = match shared.corpus.lock().expect("corpus lock").load_all() {
        Ok(p) => p,
        Err(e) => {
            shared.log(format!("retrain: corpus load failed: {e}"));
            return;
        }
    };
    if pairs.is_empty() {
        shared.log("retrain: empty corpus, nothing to do");
        return;
    }
    let start = match shared.live.read().expect("live lock").clone() {
        Some(m) => m,
        None => match SurrogateModel::new(shared.config.model_width, shared.config.seed) {
            Ok(m) => m,
            Err(e) => {
                shared.log(format!("retrain: cold init failed: {e}"));
                return;
            }
        },
    };
    let (mut model, report) = match surrogate::train(&start, &pairs, &shared.config.retrain) {
        Ok(r) => r,
        Err(e) => {
            shared.log(format!("retrain: training failed: {e}"));
            return;
        }
    };
    if report.diverged {
        shared.log("retrain: training diverged, registry unchanged");
        return;
    }
    let bytes;
    {
        let mut registry = shared.registry.lock().expect("registry lock");
        let version = registry.next_version();
        model.version = version;
        bytes = surrogate::serialize(&model);
        let path = shared.config.corpus_dir.join(format!("model_v{version:05}.ptnn"));
        if let Err(e) = std::fs::write(&path, &bytes) {
            shared.log(format!("retrain: writing model file failed: {e}"));
            return;
        }
        let entry = RegistryEntry {
            version,
            path,
            val_loss: report.best_val_loss,
            corpus_size: pairs.len(),
            unix_ms: unix_ms(),
        };
        if let Err(e) = registry.append(entry) {
            shared.log(format!("retrain: registry append failed: {e}"));
            return;
        }
        *shared.live.write().expect("live lock") = Some(model);
        shared.log(format!(
            "registered v{version} (val_loss {:.6}, corpus {})",
            report.best_val_loss,
            pairs.len()
        ));
    }
    let version = shared.live.read().expect("live lock").as_ref().map(|m| m.version).unwrap_or(0);
    for attempt in 0..shared.config.push_max_attempts {
        match shared.pusher.push(&bytes) {
            Ok(()) => {
                shared.log(format!("pushed v{version}"));
                return;
            }
            Err(e) => {
                shared.log(format!("push v{version} attempt {attempt} failed: {e}"));
                std::thread::sleep(backoff_delay(
                    attempt as u32,
                    shared.config.push_backoff_base,
                    shared.config.push_backoff_cap,
                ));
            }
        }
    }
    shared.log(format!(
        "push v{version} abandoned after {} attempts",
        shared.config.push_max_attempts
    ));
}

/// The event loop's owner object: consumes scan-complete events, owns
/// the workflow state exclusively, and hands retrains to the coalescer.
pub struct Orchestrator {
    shared: Arc<SharedState>,
    coalescer: RetrainCoalescer,
    clock: Arc<dyn Clock>,
    probe_init: ComplexField,
    pub state: WorkflowState,
}

impl Orchestrator {
    pub fn new(
        config: OrchestratorConfig,
        probe_init: ComplexField,
        pusher: Arc<dyn ModelPusher>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        std::fs::create_dir_all(&config.corpus_dir)?;
        let corpus = CorpusStore::open(config.corpus_dir.join("pairs"), config.corpus_cap)?;
        let registry = ModelRegistry::open(config.corpus_dir.join("registry.tsv"))?;
        // crash recovery: reload the newest registered model as live
        let live = match registry.current() {
            Some(entry) => match std::fs::read(&entry.path)
                .map_err(OrchestratorError::from)
                .and_then(|b| surrogate::deserialize(&b).map_err(OrchestratorError::from))
            {
                Ok(m) => Some(m),
                Err(_) => None,
            },
            None => None,
        };
        let shared = Arc::new(SharedState {
            corpus: Mutex::new(corpus),
            registry: Mutex::new(registry),
            live: RwLock::new(live),
            pusher,
            config,
            events: Mutex::new(Vec::new()),
        });
        Ok(Orchestrator {
            shared,
            coalescer: RetrainCoalescer::new(),
            clock,
            probe_init,
            state: WorkflowState { mode: Mode::Active, last_reconstruction_ns: None, log: Vec::new() },
        })
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn live_version(&self) -> Option<u64> {
        self.shared.live.read().expect("live lock").as_ref().map(|m| m.version)
    }

    pub fn live_model(&self) -> Option<SurrogateModel> {
        self.shared.live.read().expect("live lock").clone()
    }

    pub fn corpus_len(&self) -> usize {
        self.shared.corpus.lock().expect("corpus lock").len()
    }

    pub fn registry_entries(&self) -> Vec<RegistryEntry> {
        self.shared.registry.lock().expect("registry lock").entries().to_vec()
    }

    pub fn events(&self) -> Vec<String> {
        self.shared.events.lock().expect("event log").clone()
    }

    pub fn retrains_completed(&self) -> u64 {
        self.coalescer.runs_completed()
    }

    /// Blocks until no retrain is running or pending.
    pub fn wait_for_retrains(&self) {
        self.coalescer.wait_idle();
    }

    fn record(&mut self, scan_id: u64, gap: Option<f64>, action: Action) -> ScanRecord {
        let record = ScanRecord { scan_id, gap, action };
        self.state.log.push(record.clone());
        record
    }

    pub fn on_scan_complete(
        &mut self,
        frames: &[DiffractionFrame],
        plan: &ScanPlan,
    ) -> Result<ScanRecord, OrchestratorError> {
        let now = self.clock.now_ns();
        if self.state.mode == Mode::Suspended {
            let due = match self.state.last_reconstruction_ns {
                Some(t) => {
                    now.saturating_sub(t) >= self.shared.config.suspended_interval.as_nanos() as u64
                }
                None => true,
            };
            if !due {
                return Ok(self.record(plan.scan_id, None, Action::Skipped));
            }
        }

        let object_init = ComplexField::from_fn(
            self.shared.config.object_height,
            self.shared.config.object_width,
            |_, _| Complex64::new(1.0, 0.0),
        );
        let mut recon = match epie::epie_reconstruct(
            frames,
            plan,
            &self.probe_init,
            &object_init,
            &self.shared.config.epie,
        ) {
            Ok(r) => r,
            Err(e) => {
                self.shared.log(format!("scan {}: epie failed: {e}", plan.scan_id));
                return Ok(self.record(plan.scan_id, None, Action::EpieFailed));
            }
        };
        epie::canonicalize_gauge(&mut recon, &self.probe_init)?;
        self.state.last_reconstruction_ns = Some(now);

        let k = frames[0].n() / 2;
        let pairs = epie::crop_training_pairs(&recon, plan, frames, k)?;

        let live = self.shared.live.read().expect("live lock").clone();
        let record = match live {
            None => {
                // cold start: build the corpus and train v1 synchronously
                self.shared.corpus.lock().expect("corpus lock").append_all(&pairs)?;
                retrain_once(&self.shared);
                self.state.mode = Mode::Active;
                self.record(plan.scan_id, None, Action::ColdStart)
            }
            Some(model) => {
                let held_out = validation_indices(
                    pairs.len(),
                    self.shared.config.seed ^ plan.scan_id.wrapping_mul(0x9E37_79B9),
                );
                let val: Vec<&LabeledPair> = held_out.iter().map(|&i| &pairs[i]).collect();
                let gap = validate_model(&model, &val)?;
                self.shared.corpus.lock().expect("corpus lock").append_all(&pairs)?;
                self.state.mode = mode_for_gap(gap, self.shared.config.mismatch_tolerance);
                if self.state.mode == Mode::Active {
                    let shared = self.shared.clone();
                    self.coalescer.trigger(move || retrain_once(&shared));
                    self.record(plan.scan_id, Some(gap), Action::RetrainQueued)
                } else {
                    self.record(plan.scan_id, Some(gap), Action::Suspended)
                }
            }
        };
        Ok(record)
    }
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub version: u64,
    pub corpus_size: usize,
    /// Phase MSE per probe area, in the order the areas were given.
    pub mse_per_area: Vec<f64>,
}

/// Fig 5-style learning curve: every registered model version evaluated
/// on fixed labeled probe areas, ordered by the corpus size it saw.
pub fn learning_curve(
    registry: &ModelRegistry,
    probe_sets: &[(String, Vec<LabeledPair>)],
) -> Result<Vec<CurvePoint>, OrchestratorError> {
    if registry.entries().is_empty() {
        return Err(OrchestratorError::Registry("no registered models".into()));
    }
    let mut points = Vec::new();
    for entry in registry.entries() {
        let model = surrogate::deserialize(&std::fs::read(&entry.path)?)?;
        let mut mse_per_area = Vec::with_capacity(probe_sets.len());
        for (_, pairs) in probe_sets {
            let mut total = 0.0;
            for pair in pairs {
                let input = surrogate::preprocess(&pair.frame, 1.0)?;
                let (_, phase) = model.forward(&input)?;
                let kk = phase.shape().2;
                let inferred = RealImage::from_fn(kk, kk, |y, x| phase.at(0, 0, y, x) as f64);
                total += metrics::mse(&inferred, &pair.phase)?;
            }
            mse_per_area.push(total / pairs.len().max(1) as f64);
        }
        points.push(CurvePoint { version: entry.version, corpus_size: entry.corpus_size, mse_per_area });
    }
    points.sort_by_key(|p| (p.corpus_size, p.version));
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;
    use crate::simulator::{
        make_probe, make_spiral_scan, synth_object, Diffractor, NoiseMode, ObjectStyle, ProbeSpec,
    };
    use std::path::Path;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn pair(index: u32, n: usize, salt: f64) -> LabeledPair {
        let counts = (0..n * n).map(|i| ((i * 31 + index as usize * 11) % 700) as u16).collect();
        let frame =
            DiffractionFrame::new(3, index, (12.0 + index as f64, 14.0), 0.8, n, counts);
        let k = n / 2;
        LabeledPair {
            frame,
            amplitude: RealImage::from_fn(k, k, |y, x| {
                0.4 + 0.1 * ((y * k + x) as f64 * 0.7 + salt).sin()
            }),
            phase: RealImage::from_fn(k, k, |y, x| {
                0.5 * ((y as f64 - x as f64) * 0.3 + salt).cos()
            }),
        }
    }

    #[test]
    fn backoff_doubles_from_base_and_caps() {
        let base = Duration::from_secs(1);
        let cap = Duration::from_secs(60);
        let delays: Vec<u64> =
            (0..8).map(|a| backoff_delay(a, base, cap).as_secs()).collect();
        assert_eq!(delays, vec![1, 2, 4, 8, 16, 32, 60, 60]);
        assert_eq!(backoff_delay(40, base, cap), cap);
        assert_eq!(
            backoff_delay(3, Duration::from_millis(5), Duration::from_secs(1)),
            Duration::from_millis(40)
        );
    }

    #[test]
    fn registry_round_trips_and_rejects_stale_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.tsv");
        let mut reg = ModelRegistry::open(&path).unwrap();
        assert_eq!(reg.next_version(), 1);
        reg.append(RegistryEntry {
            version: 1,
            path: dir.path().join("model_v00001.ptnn"),
            val_loss: 0.125,
            corpus_size: 24,
            unix_ms: 1_700_000_000_000,
        })
        .unwrap();
        reg.append(RegistryEntry {
            version: 2,
            path: dir.path().join("model_v00002.ptnn"),
            val_loss: 0.0625,
            corpus_size: 48,
            unix_ms: 1_700_000_100_000,
        })
        .unwrap();
        let err = reg
            .append(RegistryEntry {
                version: 2,
                path: PathBuf::from("x"),
                val_loss: 0.0,
                corpus_size: 0,
                unix_ms: 0,
            })
            .unwrap_err();
        assert!(matches!(err, OrchestratorError::Registry(_)));

        let reloaded = ModelRegistry::open(&path).unwrap();
        assert_eq!(reloaded.entries(), reg.entries());
        assert_eq!(reloaded.current().unwrap().version, 2);
        assert_eq!(reloaded.next_version(), 3);
    }

    #[test]
    fn corpus_store_survives_reload_and_evicts_fifo() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CorpusStore::open(dir.path(), 3).unwrap();
        for i in 0..5 {
            store.append(&pair(i, 8, i as f64)).unwrap();
        }
        assert_eq!(store.len(), 3);
        let pairs = store.load_all().unwrap();
        let indices: Vec<u32> = pairs.iter().map(|p| p.frame.frame_index).collect();
        assert_eq!(indices, vec![2, 3, 4]);

        // reopen from the index file; contents identical
        let reopened = CorpusStore::open(dir.path(), 3).unwrap();
        assert_eq!(reopened.len(), 3);
        let reloaded = reopened.load_all().unwrap();
        for (a, b) in pairs.iter().zip(&reloaded) {
            assert_eq!(a.frame, b.frame);
            for (x, y) in a.phase.data().iter().zip(b.phase.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // labels round-trip within 16-bit quantization of their range
        let original = pair(3, 8, 3.0);
        let stored = &pairs[1];
        let (lo, hi) = original.phase.min_max();
        let quantum = (hi - lo) / 65535.0;
        for (x, y) in original.phase.data().iter().zip(stored.phase.data()) {
            assert!((x - y).abs() <= quantum);
        }
        // new appends after reload continue the id sequence
        let mut reopened = reopened;
        reopened.append(&pair(9, 8, 9.0)).unwrap();
        assert_eq!(reopened.load_all().unwrap().last().unwrap().frame.frame_index, 9);
    }

    #[test]
    fn coalescer_folds_a_burst_into_two_runs() {
        let coalescer = RetrainCoalescer::new();
        let executed = Arc::new(AtomicU64::new(0));
        let mut started = 0;
        for _ in 0..10 {
            let executed = executed.clone();
            if coalescer.trigger(move || {
                executed.fetch_add(1, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(40));
            }) {
                started += 1;
            }
        }
        assert_eq!(started, 1, "only the first trigger starts a worker");
        coalescer.wait_idle();
        assert_eq!(executed.load(Ordering::SeqCst), 2, "burst folds into running + pending");
        assert_eq!(coalescer.runs_completed(), 2);
        assert!(!coalescer.is_running());
    }

    #[test]
    fn gap_is_zero_when_the_model_reproduces_labels() {
        let model = SurrogateModel::new(4, 11).unwrap();
        let mut pairs = Vec::new();
        for i in 0..4 {
            let mut p = pair(i, 16, i as f64);
            let input = surrogate::preprocess(&p.frame, 1.0).unwrap();
            let (amp, phase) = model.forward(&input).unwrap();
            let k = phase.shape().2;
            p.amplitude = RealImage::from_fn(k, k, |y, x| amp.at(0, 0, y, x) as f64);
            p.phase = RealImage::from_fn(k, k, |y, x| phase.at(0, 0, y, x) as f64);
            pairs.push(p);
        }
        let refs: Vec<&LabeledPair> = pairs.iter().collect();
        let gap = validate_model(&model, &refs).unwrap();
        assert!(gap.abs() < 1e-9, "gap {gap}");
        // boundary: equality suspends
        assert_eq!(mode_for_gap(0.10, 0.10), Mode::Suspended);
        assert_eq!(mode_for_gap(0.100001, 0.10), Mode::Active);
        // a random model against structured labels is far off
        let other = SurrogateModel::new(4, 77).unwrap();
        let structured: Vec<&LabeledPair> = pairs.iter().collect();
        let bad_gap = validate_model(&other, &structured).unwrap();
        assert!(bad_gap > 0.10, "random-model gap {bad_gap}");
        assert!(matches!(validate_model(&model, &[]), Err(OrchestratorError::NoPairs)));
    }

    #[test]
    fn validation_subset_is_a_tenth_and_seeded() {
        let a = validation_indices(40, 7);
        let b = validation_indices(40, 7);
        let c = validation_indices(40, 8);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(validation_indices(5, 1).len(), 1);
    }

    struct RecordingPusher {
        pushed: Mutex<Vec<u64>>,
        fail_first: AtomicU64,
    }

    impl RecordingPusher {
        fn new(fail_first: u64) -> Arc<Self> {
            Arc::new(RecordingPusher { pushed: Mutex::new(Vec::new()), fail_first: AtomicU64::new(fail_first) })
        }

        fn versions(&self) -> Vec<u64> {
            self.pushed.lock().unwrap().clone()
        }
    }

    impl ModelPusher for RecordingPusher {
        fn push(&self, bytes: &[u8]) -> Result<(), String> {
            if self.fail_first.load(Ordering::SeqCst) > 0 {
                self.fail_first.fetch_sub(1, Ordering::SeqCst);
                return Err("edge down".into());
            }
            let model = surrogate::deserialize(bytes).map_err(|e| e.to_string())?;
            self.pushed.lock().unwrap().push(model.version);
            Ok(())
        }
    }

    /// A small but real scene: spiral scan over a synthetic phase object.
    fn scene(scan_id: u64, object_seed: u64) -> (Vec<DiffractionFrame>, ScanPlan, ComplexField) {
        let obj = synth_object(64, 64, ObjectStyle::RandomEtch, object_seed, 1.0, 1.0).unwrap();
        let probe = make_probe(ProbeSpec {
            window: 16,
            beam_fwhm: 5.0,
            inner_fraction: 0.5,
            phase_curvature: 6.0,
        })
        .unwrap();
        let plan = make_spiral_scan(14, 3.0, scan_id).unwrap().offset(32.0, 32.0);
        let mut diffractor =
            Diffractor::new(&obj.field, &probe, 2e5, NoiseMode::Noiseless, scan_id).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let frames: Vec<DiffractionFrame> = plan
            .positions
            .iter()
            .enumerate()
            .map(|(i, &p)| diffractor.frame(p, i as u32, &mut rng).unwrap())
            .collect();
        (frames, plan, probe)
    }

    fn quick_config(dir: &Path) -> OrchestratorConfig {
        let mut config = OrchestratorConfig::new(dir);
        config.model_width = 4;
        config.retrain.epochs = 2;
        config.retrain.batch_size = 4;
        config.epie.n_iterations = 30;
        config.object_height = 64;
        config.object_width = 64;
        config.push_backoff_base = Duration::from_millis(1);
        config.push_backoff_cap = Duration::from_millis(4);
        config.push_max_attempts = 3;
        config
    }

    #[test]
    fn cold_start_trains_and_pushes_v1_then_tolerance_drives_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FakeClock::new();
        let pusher = RecordingPusher::new(0);
        let mut config = quick_config(dir.path());
        // huge tolerance: everything after cold start suspends
        config.mismatch_tolerance = 0.999;
        config.suspended_interval = Duration::from_secs(100);
        let (frames, plan, probe) = scene(1, 5);
        let mut orch =
            Orchestrator::new(config, probe, pusher.clone(), clock.clone()).unwrap();

        let r1 = orch.on_scan_complete(&frames, &plan).unwrap();
        assert_eq!(r1.action, Action::ColdStart);
        assert_eq!(orch.live_version(), Some(1));
        assert_eq!(pusher.versions(), vec![1]);
        assert_eq!(orch.corpus_len(), 14);

        clock.advance_ms(1_000);
        let (frames2, plan2, _) = scene(2, 5);
        let r2 = orch.on_scan_complete(&frames2, &plan2).unwrap();
        assert_eq!(r2.action, Action::Suspended);
        assert!(r2.gap.unwrap() <= 0.999);
        assert_eq!(orch.mode(), Mode::Suspended);
        assert_eq!(orch.corpus_len(), 28);

        // within the interval: skipped, corpus untouched, no reconstruction
        clock.advance_ms(5_000);
        let r3 = orch.on_scan_complete(&frames2, &plan2).unwrap();
        assert_eq!(r3.action, Action::Skipped);
        assert_eq!(orch.corpus_len(), 28);

        // after the interval: reconstructs and validates again
        clock.advance_ms(100_000);
        let r4 = orch.on_scan_complete(&frames2, &plan2).unwrap();
        assert_eq!(r4.action, Action::Suspended);
        assert_eq!(orch.corpus_len(), 42);
    }

    #[test]
    fn drift_queues_a_retrain_and_pushes_a_higher_version() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FakeClock::new();
        let pusher = RecordingPusher::new(0);
        let mut config = quick_config(dir.path());
        // tiny tolerance: every validated scan drifts
        config.mismatch_tolerance = 1e-9;
        let (frames, plan, probe) = scene(1, 5);
        let mut orch =
            Orchestrator::new(config, probe, pusher.clone(), clock.clone()).unwrap();
        orch.on_scan_complete(&frames, &plan).unwrap();

        let (frames2, plan2, _) = scene(2, 6);
        let r2 = orch.on_scan_complete(&frames2, &plan2).unwrap();
        assert_eq!(r2.action, Action::RetrainQueued);
        assert!(r2.gap.unwrap() > 1e-9);
        assert_eq!(orch.mode(), Mode::Active);
        orch.wait_for_retrains();
        assert_eq!(orch.live_version(), Some(2));
        let versions = pusher.versions();
        assert_eq!(versions, vec![1, 2]);
        let entries = orch.registry_entries();
        assert_eq!(entries.len(), 2);
        assert!(entries[1].corpus_size > entries[0].corpus_size);

        // the registry log survives a restart and re-arms the live model
        let reloaded = ModelRegistry::open(dir.path().join("registry.tsv")).unwrap();
        assert_eq!(reloaded.current().unwrap().version, 2);
    }

    #[test]
    fn push_failure_keeps_the_registered_model() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FakeClock::new();
        // more failures than attempts: the push is abandoned
        let pusher = RecordingPusher::new(99);
        let config = quick_config(dir.path());
        let (frames, plan, probe) = scene(1, 5);
        let mut orch =
            Orchestrator::new(config, probe, pusher.clone(), clock.clone()).unwrap();
        orch.on_scan_complete(&frames, &plan).unwrap();
        assert_eq!(pusher.versions(), Vec::<u64>::new());
        assert_eq!(orch.live_version(), Some(1), "model registered despite push failure");
        assert_eq!(orch.registry_entries().len(), 1);
        assert!(orch.events().iter().any(|e| e.contains("abandoned")));
    }

    #[test]
    fn epie_failure_changes_no_state() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FakeClock::new();
        let pusher = RecordingPusher::new(0);
        let config = quick_config(dir.path());
        let (frames, mut plan, probe) = scene(1, 5);
        plan.n_points += 1; // frame/plan mismatch
        let mut orch = Orchestrator::new(config, probe, pusher, clock).unwrap();
        let r = orch.on_scan_complete(&frames, &plan).unwrap();
        assert_eq!(r.action, Action::EpieFailed);
        assert_eq!(orch.mode(), Mode::Active);
        assert_eq!(orch.corpus_len(), 0);
        assert_eq!(orch.state.last_reconstruction_ns, None);
        assert!(orch.events().iter().any(|e| e.contains("epie failed")));
    }

    #[test]
    fn learning_curve_orders_rows_by_corpus_size() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FakeClock::new();
        let pusher = RecordingPusher::new(0);
        let mut config = quick_config(dir.path());
        config.mismatch_tolerance = 1e-9;
        let (frames, plan, probe) = scene(1, 5);
        let mut orch =
            Orchestrator::new(config, probe, pusher, clock).unwrap();
        orch.on_scan_complete(&frames, &plan).unwrap();
        let (frames2, plan2, _) = scene(2, 6);
        orch.on_scan_complete(&frames2, &plan2).unwrap();
        orch.wait_for_retrains();

        let registry = ModelRegistry::open(dir.path().join("registry.tsv")).unwrap();
        let probe_sets = vec![
            ("seen".to_string(), vec![pair(0, 16, 0.0), pair(1, 16, 1.0)]),
            ("unseen".to_string(), vec![pair(2, 16, 9.0)]),
        ];
        let points = learning_curve(&registry, &probe_sets).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points[0].corpus_size < points[1].corpus_size);
        for p in &points {
            assert_eq!(p.mse_per_area.len(), 2);
            assert!(p.mse_per_area.iter().all(|m| m.is_finite()));
        }
        assert!(matches!(
            learning_curve(&ModelRegistry::open(dir.path().join("none.tsv")).unwrap(), &probe_sets),
            Err(OrchestratorError::Registry(_))
        ));
    }
}
