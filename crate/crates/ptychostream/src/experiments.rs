//! Experiment drivers behind the CLI: the end-to-end live pipeline, the
//! sparse-overlap and low-dose sweeps, the inference latency benchmark,
//! and the continual-learning curve.
//!
//! Every driver is a plain function of an [`ExperimentConfig`] returning
//! rows and images; serialization to CSV/PGM goes through [`Artifacts`],
//! which records every file it writes and emits a `manifest.txt`. Apart
//! from wall-clock timing columns, outputs are fully determined by the
//! config (threaded services included: canvas stitches happen in frame
//! order because scans are drained one at a time).

use crate::clock::RealClock;
use crate::config::ExperimentConfig;
use crate::csvout::{fmt_f64, CsvWriter};
use crate::edge::{BatcherConfig, EdgeConfig, EdgeError, EdgeService, StitchCanvas};
use crate::epie::{
    canonicalize_gauge, crop_training_pairs, epie_reconstruct, EpieError, LabeledPair,
    Reconstruction,
};
use crate::field::{ComplexField, CoreError, RealImage};
use crate::imageio::{write_pgm16, PgmError};
use crate::metrics::phase_agreement;
use crate::orchestrator::{
    learning_curve, ModelRegistry, Orchestrator, OrchestratorConfig, OrchestratorError,
    TcpModelPusher,
};
use crate::simulator::{
    make_probe, make_spiral_scan, synth_object, DiffractionFrame, Diffractor, NoiseMode,
    ObjectStyle, ScanPlan, SimError, SyntheticObject,
};
use crate::surrogate::{
    self, preprocess_batch, train, SurrogateError, SurrogateModel,
};
use crate::wire::{Message, StreamDecoder, WireError};
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("epie: {0}")]
    Epie(#[from] EpieError),
    #[error("surrogate: {0}")]
    Surrogate(#[from] SurrogateError),
    #[error("core: {0}")]
    Core(#[from] CoreError),
    #[error("edge: {0}")]
    Edge(#[from] EdgeError),
    #[error("orchestrator: {0}")]
    Orchestrator(#[from] OrchestratorError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("image: {0}")]
    Pgm(#[from] PgmError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

/// Output directory bookkeeping: every artifact goes through here so the
/// final `manifest.txt` lists exactly what a run produced.
pub struct Artifacts {
    out_dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    pub fn new(out_dir: &Path) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Artifacts { out_dir: out_dir.to_path_buf(), names: Vec::new() })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn write_csv<S: AsRef<str>>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<S>],
    ) -> Result<PathBuf, ExperimentError> {
        let path = self.out_dir.join(name);
        let file = std::fs::File::create(&path)?;
        let mut csv = CsvWriter::new(file, header)?;
        for row in rows {
            csv.write_row(row)?;
        }
        csv.finish()?;
        self.names.push(name.to_string());
        Ok(path)
    }

    /// PGM plus its `.range` sidecar; both land in the manifest.
    pub fn write_image(&mut self, name: &str, img: &RealImage) -> Result<PathBuf, ExperimentError> {
        let path = self.out_dir.join(name);
        write_pgm16(&path, img)?;
        self.names.push(name.to_string());
        self.names.push(format!("{name}.range"));
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf, ExperimentError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, text)?;
        self.names.push(name.to_string());
        Ok(path)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Lists every artifact written so far, one per line, then itself.
    pub fn write_manifest(mut self) -> Result<PathBuf, ExperimentError> {
        let path = self.out_dir.join("manifest.txt");
        let mut file = std::fs::File::create(&path)?;
        self.names.push("manifest.txt".to_string());
        for name in &self.names {
            writeln!(file, "{name}")?;
        }
        Ok(path)
    }
}

/// One synthetic acquisition setup shared by every driver.
pub struct Scene {
    pub object: SyntheticObject,
    pub probe: ComplexField,
}

pub fn build_scene(config: &ExperimentConfig) -> Result<Scene, ExperimentError> {
    let object = synth_object(
        config.object_height,
        config.object_width,
        config.object_style,
        config.seed,
        config.a_min,
        config.phi_max,
    )?;
    let probe = make_probe(config.probe_spec())?;
    Ok(Scene { object, probe })
}

/// Spiral of `n_points` at `step`, centered on `(cy, cx)`.
pub fn centered_spiral(
    config: &ExperimentConfig,
    scan_id: u64,
    n_points: usize,
    step: f64,
    center: (f64, f64),
) -> Result<ScanPlan, ExperimentError> {
    Ok(make_spiral_scan(n_points, step, scan_id)?
        .offset(center.0, center.1)
        .with_beam_size(config.beam_fwhm))
}

pub fn object_center(config: &ExperimentConfig) -> (f64, f64) {
    (config.object_height as f64 / 2.0, config.object_width as f64 / 2.0)
}

/// Records every frame of `plan` with a fresh seeded rng, so identical
/// (plan, budget, noise, seed) yields identical frames.
pub fn record_frames(
    scene: &Scene,
    plan: &ScanPlan,
    photon_budget: f64,
    noise: NoiseMode,
    exposure_ms: f32,
    seed: u64,
) -> Result<Vec<DiffractionFrame>, ExperimentError> {
    let mut diffractor =
        Diffractor::new(&scene.object.field, &scene.probe, photon_budget, noise, plan.scan_id)?
            .with_exposure_ms(exposure_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(plan.n_points);
    for (i, &pos) in plan.positions.iter().enumerate() {
        frames.push(diffractor.frame(pos, i as u32, &mut rng)?);
    }
    Ok(frames)
}

/// Full ePIE from flat initials, gauge-fixed against the true probe.
pub fn ground_truth_recon(
    scene: &Scene,
    plan: &ScanPlan,
    frames: &[DiffractionFrame],
    config: &ExperimentConfig,
) -> Result<Reconstruction, ExperimentError> {
    let object_init = ComplexField::ones(config.object_height, config.object_width);
    let mut recon =
        epie_reconstruct(frames, plan, &scene.probe, &object_init, &config.epie_config())?;
    canonicalize_gauge(&mut recon, &scene.probe)?;
    Ok(recon)
}

/// Runs `model` over `frames` in batches of 16 and stitches every patch
/// into a fresh canvas at the plan positions.
pub fn stitch_inferences(
    model: &SurrogateModel,
    frames: &[DiffractionFrame],
    plan: &ScanPlan,
    height: usize,
    width: usize,
    scale_factor: f64,
) -> Result<StitchCanvas, ExperimentError> {
    let mut canvas = StitchCanvas::new(height, width);
    for (chunk_start, chunk) in frames.chunks(16).enumerate().map(|(i, c)| (i * 16, c)) {
        let refs: Vec<&DiffractionFrame> = chunk.iter().collect();
        let batch = preprocess_batch(&refs, scale_factor)?;
        let (amp, phase) = model.forward(&batch)?;
        let k = amp.shape().2;
        for (i, _) in chunk.iter().enumerate() {
            canvas.stitch(plan.positions[chunk_start + i], k, amp.batch(i), phase.batch(i))?;
        }
    }
    Ok(canvas)
}

/// Phase SSIM of `estimate` against a ground-truth reconstruction,
/// restricted to illuminated pixels (intersected with `extra_mask` when
/// given, e.g. canvas coverage).
pub fn masked_phase_ssim(
    estimate: &RealImage,
    gt: &Reconstruction,
    extra_mask: Option<&RealImage>,
) -> Result<f64, ExperimentError> {
    let illum = gt.illumination_mask();
    let mask = match extra_mask {
        Some(extra) => RealImage::from_fn(illum.height(), illum.width(), |y, x| {
            if illum.at(y, x) > 0.0 && extra.at(y, x) > 0.0 {
                1.0
            } else {
                0.0
            }
        }),
        None => illum,
    };
    Ok(phase_agreement(estimate, &gt.object.phase(), 1.0, Some(&mask))?)
}

// ---------------------------------------------------------------------------
// live pipeline

#[derive(Debug)]
pub struct PipelineSummary {
    pub frames_streamed: u64,
    pub results_received: u64,
    /// Model versions the orchestrator pushed, in push order.
    pub models_pushed: Vec<u64>,
    pub scan_log: Vec<String>,
    pub final_canvas_ssim: f64,
    pub canvas_amplitude: RealImage,
    pub canvas_phase: RealImage,
    pub gt_phase: RealImage,
    pub mean_latency_us: Option<f64>,
    pub events: Vec<String>,
}

fn drain_results(stream: &mut TcpStream) -> Result<u64, ExperimentError> {
    use std::io::Read as _;
    let mut decoder = StreamDecoder::new();
    let mut buf = [0u8; 16 * 1024];
    let mut results = 0u64;
    loop {
        while let Some(msg) = decoder.next_message()? {
            match msg {
                Message::Result(_) => results += 1,
                Message::ScanEnd { .. } => return Ok(results),
                _ => {}
            }
        }
        let got = stream.read(&mut buf).map_err(|e| {
            ExperimentError::Failed(format!("edge stopped answering mid-scan: {e}"))
        })?;
        if got == 0 {
            return Err(ExperimentError::Failed("edge closed mid-scan".into()));
        }
        decoder.push(&buf[..got]);
    }
}

fn orchestrator_config(config: &ExperimentConfig, work_dir: &Path) -> OrchestratorConfig {
    let mut oc = OrchestratorConfig::new(work_dir.join("orchestrator"));
    oc.mismatch_tolerance = config.tolerance;
    oc.suspended_interval = Duration::from_secs(config.interval_s);
    oc.retrain = config.train_config();
    oc.epie = config.epie_config();
    oc.object_height = config.object_height;
    oc.object_width = config.object_width;
    oc.model_width = config.model_width;
    oc.corpus_cap = config.corpus_cap;
    oc.push_backoff_base = Duration::from_millis(100);
    oc.push_backoff_cap = Duration::from_secs(2);
    oc.seed = config.seed;
    oc
}

/// The whole loop live: a detector stream, the edge service, and the
/// orchestrator run concurrently in-process for `n_scans` scans over one
/// region. Scan 1 cold-starts the model, later scans retrain on demand;
/// the summary scores the final stitched canvas against the scan-1 ePIE
/// ground truth.
pub fn run_pipeline(
    config: &ExperimentConfig,
    work_dir: &Path,
) -> Result<PipelineSummary, ExperimentError> {
    let scene = build_scene(config)?;
    let center = object_center(config);

    let edge_config = EdgeConfig {
        batcher: BatcherConfig {
            batch_size: config.batch_size,
            flush_timeout: config.flush_timeout(),
            scale_factor: 1.0,
        },
        canvas_height: config.canvas_height,
        canvas_width: config.canvas_width,
        ..EdgeConfig::default()
    };
    let edge = EdgeService::start("127.0.0.1:0", "127.0.0.1:0", None, edge_config, {
        Arc::new(RealClock::new())
    })?;
    let pusher = Arc::new(TcpModelPusher::new(edge.control_addr().to_string()));
    let mut orchestrator = Orchestrator::new(
        orchestrator_config(config, work_dir),
        scene.probe.clone(),
        pusher,
        Arc::new(RealClock::new()),
    )?;

    let frame_addr = edge.frame_addr().to_string();
    let mut frames_streamed = 0u64;
    let mut results_received = 0u64;
    let mut scan_log = Vec::new();
    let mut gt: Option<Reconstruction> = None;

    for s in 0..config.n_scans {
        let scan_id = s as u64 + 1;
        let plan =
            centered_spiral(config, scan_id, config.scan_points, config.scan_step, center)?;
        let frames = record_frames(
            &scene,
            &plan,
            config.photon_budget,
            config.noise,
            config.exposure_ms,
            config.seed ^ scan_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?;

        // scan 1 has no model yet: the edge buffers (bounded, blocking)
        // until the cold-start retrain pushes v1, so reconstruct first
        // and drain afterwards
        let mut sender = TcpStream::connect(&frame_addr)?;
        sender.set_read_timeout(Some(Duration::from_secs(120)))?;
        let k = (frames[0].n() / 2) as u16;
        sender.write_all(&crate::wire::encode(&Message::ScanBegin {
            scan_id,
            n_points: plan.n_points as u32,
            n: frames[0].n() as u16,
            k,
        })?)?;
        for frame in &frames {
            sender.write_all(&crate::wire::encode(&Message::Frame(frame.clone()))?)?;
        }
        sender.write_all(&crate::wire::encode(&Message::ScanEnd { scan_id })?)?;
        frames_streamed += frames.len() as u64;

        let record = orchestrator.on_scan_complete(&frames, &plan)?;
        scan_log.push(format!(
            "scan {scan_id}: {:?} gap {}",
            record.action,
            record.gap.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into())
        ));
        results_received += drain_results(&mut sender)?;
        drop(sender);
        // settle retrains so each scan runs against a fixed model
        orchestrator.wait_for_retrains();

        if s == 0 {
            gt = Some(ground_truth_recon(&scene, &plan, &frames, config)?);
        }
    }

    let gt = gt.expect("n_scans >= 1 is validated");
    let canvas = edge.canvas_snapshot();
    let coverage = canvas.coverage();
    let final_canvas_ssim = masked_phase_ssim(&canvas.phase_image(), &gt, Some(&coverage))?;
    let mean_latency_us = edge.latency_stats().map(|r| r.mean_us);
    let events = orchestrator.events();
    let models_pushed = events
        .iter()
        .filter_map(|e| e.strip_prefix("pushed v").and_then(|v| v.parse().ok()))
        .collect();
    let summary = PipelineSummary {
        frames_streamed,
        results_received,
        models_pushed,
        scan_log,
        final_canvas_ssim,
        canvas_amplitude: canvas.amplitude_image(),
        canvas_phase: canvas.phase_image(),
        gt_phase: gt.object.phase(),
        mean_latency_us,
        events,
    };
    edge.stop();
    Ok(summary)
}

// ---------------------------------------------------------------------------
// overlap sweep

/// Density of the reference scan every sweep row is thinned from. At 0.9
/// the default overlap grid maps to exact integer strides
/// ((1-r)/(1-0.9))² ∈ {4, 16, 25, 36, 49, 64, 100}, so achieved overlaps
/// equal their targets.
pub const DENSE_OVERLAP: f64 = 0.9;

/// Stride that thins a dense scan down to a target overlap: spiral
/// density scales as 1/step², so keeping every k-th point multiplies the
/// step by √k.
pub fn stride_for_overlap(target: f64, dense: f64) -> usize {
    (((1.0 - target) / (1.0 - dense)).powi(2)).round().max(1.0) as usize
}

#[derive(Debug, Clone)]
pub struct OverlapRow {
    pub target_overlap: f64,
    pub stride: usize,
    pub n_points: usize,
    pub achieved_overlap: f64,
    pub ssim_surrogate: f64,
    pub ssim_epie: f64,
}

pub struct OverlapSweep {
    pub rows: Vec<OverlapRow>,
    pub dense_points: usize,
    pub model: SurrogateModel,
    pub gt_phase: RealImage,
}

/// Fig-3-style sweep: one dense scan makes the ground truth and the
/// training corpus; each row subsamples the same scan to a target
/// overlap, then scores a from-scratch ePIE and stitched surrogate
/// inference against the dense ground truth on the row's covered pixels.
pub fn overlap_sweep(config: &ExperimentConfig) -> Result<OverlapSweep, ExperimentError> {
    let scene = build_scene(config)?;
    let center = object_center(config);
    let dense_step = config.step_for_overlap(DENSE_OVERLAP);
    let plan = centered_spiral(config, 1, config.scan_points, dense_step, center)?;
    let frames = record_frames(
        &scene,
        &plan,
        config.photon_budget,
        config.noise,
        config.exposure_ms,
        config.seed,
    )?;
    let gt = ground_truth_recon(&scene, &plan, &frames, config)?;
    let pairs = crop_training_pairs(&gt, &plan, &frames, config.probe_window / 2)?;
    let start = SurrogateModel::new(config.model_width, config.seed)?;
    let (model, report) = train(&start, &pairs, &config.train_config())?;
    if report.diverged {
        return Err(ExperimentError::Failed("surrogate training diverged".into()));
    }

    let mut rows = Vec::new();
    for &target in &config.overlap_ratios {
        let stride = stride_for_overlap(target, DENSE_OVERLAP);
        let sub_plan = plan.subsample(stride)?;
        let sub_frames: Vec<DiffractionFrame> =
            frames.iter().step_by(stride).cloned().collect();
        let achieved = 1.0 - sub_plan.step_size / config.beam_fwhm;

        let object_init = ComplexField::ones(config.object_height, config.object_width);
        let mut row_recon = epie_reconstruct(
            &sub_frames,
            &sub_plan,
            &scene.probe,
            &object_init,
            &config.epie_config(),
        )?;
        canonicalize_gauge(&mut row_recon, &scene.probe)?;

        let canvas = stitch_inferences(
            &model,
            &sub_frames,
            &sub_plan,
            config.object_height,
            config.object_width,
            1.0,
        )?;
        // one mask for both scores: pixels the row actually covers
        let coverage = canvas.coverage();
        let ssim_surrogate = masked_phase_ssim(&canvas.phase_image(), &gt, Some(&coverage))?;
        let ssim_epie = masked_phase_ssim(&row_recon.object.phase(), &gt, Some(&coverage))?;
        rows.push(OverlapRow {
            target_overlap: target,
            stride,
            n_points: sub_plan.n_points,
            achieved_overlap: achieved,
            ssim_surrogate,
            ssim_epie,
        });
    }
    Ok(OverlapSweep {
        rows,
        dense_points: plan.n_points,
        model,
        gt_phase: gt.object.phase(),
    })
}

pub fn write_overlap_csv(
    artifacts: &mut Artifacts,
    sweep: &OverlapSweep,
) -> Result<PathBuf, ExperimentError> {
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.target_overlap),
                fmt_f64(r.ssim_surrogate),
                fmt_f64(r.ssim_epie),
                fmt_f64(r.achieved_overlap),
                r.stride.to_string(),
                r.n_points.to_string(),
            ]
        })
        .collect();
    artifacts.write_csv(
        "overlap_sweep.csv",
        &["overlap_ratio", "ssim_surrogate", "ssim_epie", "achieved_overlap", "stride", "n_points"],
        &rows,
    )
}

// ---------------------------------------------------------------------------
// dose sweep

#[derive(Debug, Clone)]
pub struct DoseRow {
    /// "upscale" (reuse the high-count model, preprocess with
    /// scale_factor = f) or "retrain" (fine-tune on attenuated pairs).
    pub strategy: &'static str,
    pub factor: f64,
    /// Largest detector count over the attenuated test frames.
    pub max_count: u16,
    pub ssim: f64,
}

pub struct DoseSweep {
    pub rows: Vec<DoseRow>,
    /// The factor-1 upscale row: full-dose frames through the baseline.
    pub baseline_ssim: f64,
}

/// Fig-4-style sweep. The baseline model trains on full-dose labels from
/// one scan; every row measures the same scan re-recorded at 1/f of the
/// photon budget with Poisson noise, scored against the full-dose ePIE
/// ground truth.
pub fn dose_sweep(config: &ExperimentConfig) -> Result<DoseSweep, ExperimentError> {
    let scene = build_scene(config)?;
    let center = object_center(config);
    let plan = centered_spiral(config, 1, config.scan_points, config.scan_step, center)?;
    let frames = record_frames(
        &scene,
        &plan,
        config.photon_budget,
        config.noise,
        config.exposure_ms,
        config.seed,
    )?;
    let gt = ground_truth_recon(&scene, &plan, &frames, config)?;
    let pairs = crop_training_pairs(&gt, &plan, &frames, config.probe_window / 2)?;
    let start = SurrogateModel::new(config.model_width, config.seed)?;
    let (baseline, report) = train(&start, &pairs, &config.train_config())?;
    if report.diverged {
        return Err(ExperimentError::Failed("baseline training diverged".into()));
    }

    let attenuated_frames = |factor: f64, salt: u64| -> Result<Vec<DiffractionFrame>, ExperimentError> {
        let noise = if factor == 1.0 { config.noise } else { NoiseMode::Poisson };
        record_frames(
            &scene,
            &plan,
            config.photon_budget / factor,
            noise,
            config.exposure_ms,
            config.seed ^ salt ^ factor.to_bits(),
        )
    };
    let score = |model: &SurrogateModel,
                 test: &[DiffractionFrame],
                 scale: f64|
     -> Result<f64, ExperimentError> {
        let canvas = stitch_inferences(
            model,
            test,
            &plan,
            config.object_height,
            config.object_width,
            scale,
        )?;
        masked_phase_ssim(&canvas.phase_image(), &gt, Some(&canvas.coverage()))
    };
    let max_count = |test: &[DiffractionFrame]| test.iter().map(|f| f.max_count()).max().unwrap_or(0);

    let mut rows = Vec::new();
    let mut baseline_ssim = None;
    for (i, &factor) in std::iter::once(&1.0).chain(&config.dose_factors_upscale).enumerate() {
        let test = attenuated_frames(factor, 0xA000 + i as u64)?;
        let ssim = score(&baseline, &test, factor)?;
        if factor == 1.0 {
            baseline_ssim = Some(ssim);
        }
        rows.push(DoseRow { strategy: "upscale", factor, max_count: max_count(&test), ssim });
    }
    for (i, &factor) in std::iter::once(&1.0).chain(&config.dose_factors_retrain).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xB000 ^ factor.to_bits());
        let noise = if factor == 1.0 { config.noise } else { NoiseMode::Poisson };
        let corpus: Vec<LabeledPair> = pairs
            .iter()
            .map(|p| surrogate::attenuate_training_pair(p, factor, noise, &mut rng))
            .collect::<Result<_, _>>()?;
        // fine-tune from the baseline rather than from scratch
        let (model, report) = train(&baseline, &corpus, &config.train_config())?;
        if report.diverged {
            return Err(ExperimentError::Failed(format!(
                "retrain at factor {factor} diverged"
            )));
        }
        let test = attenuated_frames(factor, 0xB100 + i as u64)?;
        let ssim = score(&model, &test, 1.0)?;
        rows.push(DoseRow { strategy: "retrain", factor, max_count: max_count(&test), ssim });
    }
    Ok(DoseSweep { rows, baseline_ssim: baseline_ssim.expect("factor 1 row always runs") })
}

pub fn write_dose_csv(
    artifacts: &mut Artifacts,
    sweep: &DoseSweep,
) -> Result<PathBuf, ExperimentError> {
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                fmt_f64(r.factor),
                r.max_count.to_string(),
                fmt_f64(r.ssim),
            ]
        })
        .collect();
    artifacts.write_csv("dose_sweep.csv", &["strategy", "factor", "max_count", "ssim"], &rows)
}

// ---------------------------------------------------------------------------
// latency benchmark

pub const BENCH_BATCH_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub batch_size: usize,
    pub runs: usize,
    /// Wall time of one whole-batch forward, averaged over `runs`.
    pub mean_us: f64,
    pub std_us: f64,
    pub per_frame_us: f64,
}

/// Table-1-style timing: `config.bench_runs` forwards per batch size on
/// seeded random inputs, after 3 warmup runs each. Values are recorded,
/// never asserted; hardware owns them.
pub fn bench_latency(config: &ExperimentConfig) -> Result<Vec<BenchRow>, ExperimentError> {
    let model = SurrogateModel::new(config.model_width, config.seed)?;
    let n = config.probe_window;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    for &batch_size in &BENCH_BATCH_SIZES {
        let input = crate::surrogate::Tensor4::from_fn((batch_size, 1, n, n), |_, _, _, _| {
            rand::Rng::random::<f32>(&mut rng)
        });
        for _ in 0..3 {
            model.forward(&input)?;
        }
        let mut samples_us = Vec::with_capacity(config.bench_runs);
        for _ in 0..config.bench_runs {
            let t0 = Instant::now();
            model.forward(&input)?;
            samples_us.push(t0.elapsed().as_secs_f64() * 1e6);
        }
        let runs = samples_us.len();
        let mean = samples_us.iter().sum::<f64>() / runs as f64;
        let var = samples_us.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64;
        rows.push(BenchRow {
            batch_size,
            runs,
            mean_us: mean,
            std_us: var.sqrt(),
            per_frame_us: mean / batch_size as f64,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(
    artifacts: &mut Artifacts,
    rows: &[BenchRow],
) -> Result<PathBuf, ExperimentError> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.batch_size.to_string(),
                fmt_f64(r.mean_us),
                fmt_f64(r.std_us),
                fmt_f64(r.per_frame_us),
                r.runs.to_string(),
            ]
        })
        .collect();
    artifacts.write_csv(
        "bench_latency.csv",
        &["batch_size", "mean_us", "std_us", "per_frame_us", "runs"],
        &out,
    )
}

// ---------------------------------------------------------------------------
// continual-learning curve

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub version: u64,
    pub corpus_size: u64,
    /// Validation loss the retrain reported when this version registered.
    pub val_loss: f64,
    pub seen_mse: f64,
    pub unseen_mse: f64,
}

pub struct LearningCurveRun {
    pub rows: Vec<CurveRow>,
    pub scan_log: Vec<String>,
}

/// Fig-5-style run: the object is forced to [`ObjectStyle::Mixed`]
/// (etched blobs left, letters right); `n_scans` scans walk the left
/// half through the orchestrator with retrains after every scan, then
/// every registered version is scored on a seen-style area (the first
/// scan) and an unseen-style area (a right-half scan never added to the
/// corpus).
pub fn learning_curve_run(
    config: &ExperimentConfig,
    work_dir: &Path,
) -> Result<LearningCurveRun, ExperimentError> {
    let mut config = config.clone();
    config.object_style = ObjectStyle::Mixed;
    let scene = build_scene(&config)?;
    let h = config.object_height as f64;
    let w = config.object_width as f64;
    let seen_center = (h / 2.0, w / 4.0);
    let unseen_center = (h / 2.0, 3.0 * w / 4.0);

    struct NullPusher;
    impl crate::orchestrator::ModelPusher for NullPusher {
        fn push(&self, _bytes: &[u8]) -> Result<(), String> {
            Ok(())
        }
    }
    let mut oc = orchestrator_config(&config, work_dir);
    // force a retrain per scan so the curve has one point per scan
    oc.mismatch_tolerance = 1e-9;
    let mut orchestrator = Orchestrator::new(
        oc,
        scene.probe.clone(),
        Arc::new(NullPusher),
        Arc::new(RealClock::new()),
    )?;

    let mut jitter = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC0FFEE);
    let mut scan_log = Vec::new();
    let mut seen: Option<(ScanPlan, Vec<DiffractionFrame>)> = None;
    for s in 0..config.n_scans {
        let scan_id = s as u64 + 1;
        // small center jitter keeps scans distinct without leaving the
        // seen (left) half
        let dy = (rand::Rng::random::<f64>(&mut jitter) - 0.5) * config.scan_step;
        let dx = (rand::Rng::random::<f64>(&mut jitter) - 0.5) * config.scan_step;
        let center = (seen_center.0 + dy, seen_center.1 + dx);
        let plan = centered_spiral(&config, scan_id, config.scan_points, config.scan_step, center)?;
        let frames = record_frames(
            &scene,
            &plan,
            config.photon_budget,
            config.noise,
            config.exposure_ms,
            config.seed ^ scan_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?;
        let record = orchestrator.on_scan_complete(&frames, &plan)?;
        orchestrator.wait_for_retrains();
        scan_log.push(format!("scan {scan_id}: {:?}", record.action));
        if s == 0 {
            seen = Some((plan, frames));
        }
    }

    let k = config.probe_window / 2;
    let (seen_plan, seen_frames) = seen.expect("n_scans >= 1 is validated");
    let seen_gt = ground_truth_recon(&scene, &seen_plan, &seen_frames, &config)?;
    let seen_pairs = crop_training_pairs(&seen_gt, &seen_plan, &seen_frames, k)?;

    let unseen_plan =
        centered_spiral(&config, 9000, config.scan_points, config.scan_step, unseen_center)?;
    let unseen_frames = record_frames(
        &scene,
        &unseen_plan,
        config.photon_budget,
        config.noise,
        config.exposure_ms,
        config.seed ^ 0xDEAD,
    )?;
    let unseen_gt = ground_truth_recon(&scene, &unseen_plan, &unseen_frames, &config)?;
    let unseen_pairs = crop_training_pairs(&unseen_gt, &unseen_plan, &unseen_frames, k)?;

    let registry = ModelRegistry::open(work_dir.join("orchestrator").join("registry.tsv"))?;
    let areas = vec![("seen".to_string(), seen_pairs), ("unseen".to_string(), unseen_pairs)];
    let points = learning_curve(&registry, &areas)?;
    let rows = points
        .into_iter()
        .map(|p| {
            let val_loss = registry
                .entries()
                .iter()
                .find(|e| e.version == p.version)
                .map(|e| e.val_loss)
                .unwrap_or(f64::NAN);
            CurveRow {
                version: p.version,
                corpus_size: p.corpus_size as u64,
                val_loss,
                seen_mse: p.mse_per_area[0],
                unseen_mse: p.mse_per_area[1],
            }
        })
        .collect();
    Ok(LearningCurveRun { rows, scan_log })
}

pub fn write_curve_csv(
    artifacts: &mut Artifacts,
    run: &LearningCurveRun,
) -> Result<PathBuf, ExperimentError> {
    let rows: Vec<Vec<String>> = run
        .rows
        .iter()
        .map(|r| {
            vec![
                r.version.to_string(),
                r.corpus_size.to_string(),
                fmt_f64(r.val_loss),
                fmt_f64(r.seen_mse),
                fmt_f64(r.unseen_mse),
            ]
        })
        .collect();
    artifacts.write_csv(
        "learning_curve.csv",
        &["version", "corpus_size", "val_loss", "seen_mse", "unseen_mse"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small enough for test speed, big enough for ePIE and training to
    /// hold together: 16-wide probe, 24 points, width-2 model.
    fn micro_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = 11;
        c.out_dir = dir.to_path_buf();
        c.object_height = 96;
        c.object_width = 96;
        c.probe_window = 16;
        c.beam_fwhm = 5.0;
        c.phase_curvature = 6.0;
        c.photon_budget = 2e5;
        c.scan_points = 24;
        c.scan_step = 2.0;
        c.n_scans = 2;
        c.model_width = 2;
        c.train_epochs = 2;
        c.train_batch = 8;
        c.epie_iterations = 30;
        c.canvas_height = 96;
        c.canvas_width = 96;
        c.bench_runs = 3;
        c
    }

    #[test]
    fn artifacts_list_everything_they_wrote() {
        let dir = tempfile::tempdir().unwrap();
        let mut artifacts = Artifacts::new(dir.path()).unwrap();
        artifacts
            .write_csv("a.csv", &["x", "y"], &[vec!["1".to_string(), "2".to_string()]])
            .unwrap();
        let img = RealImage::from_fn(4, 4, |y, x| (y + x) as f64);
        artifacts.write_image("b.pgm", &img).unwrap();
        artifacts.write_text("note.txt", "hello\n").unwrap();
        let manifest = artifacts.write_manifest().unwrap();
        let listed = std::fs::read_to_string(manifest).unwrap();
        let lines: Vec<&str> = listed.lines().collect();
        assert_eq!(lines, ["a.csv", "b.pgm", "b.pgm.range", "note.txt", "manifest.txt"]);
        for name in &lines {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv, "x,y\r\n1,2\r\n");
    }

    #[test]
    fn default_grid_strides_are_exact_squares() {
        let targets = [0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.0];
        let strides: Vec<usize> =
            targets.iter().map(|&t| stride_for_overlap(t, DENSE_OVERLAP)).collect();
        assert_eq!(strides, [4, 16, 25, 36, 49, 64, 100]);
        // exact squares mean the thinned step hits the target exactly
        for (&t, &k) in targets.iter().zip(&strides) {
            let step = (1.0 - DENSE_OVERLAP) * (k as f64).sqrt();
            assert!((1.0 - step - t).abs() < 1e-12);
        }
        assert_eq!(stride_for_overlap(0.95, DENSE_OVERLAP), 1);
    }

    #[test]
    fn bench_rows_have_the_table_shape() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path());
        let rows = bench_latency(&config).unwrap();
        assert_eq!(rows.len(), 5);
        for (row, &b) in rows.iter().zip(&BENCH_BATCH_SIZES) {
            assert_eq!(row.batch_size, b);
            assert_eq!(row.runs, 3);
            assert!(row.mean_us > 0.0);
            assert!(row.std_us >= 0.0);
            assert!((row.per_frame_us - row.mean_us / b as f64).abs() < 1e-9);
        }
        let mut artifacts = Artifacts::new(dir.path()).unwrap();
        let path = write_bench_csv(&mut artifacts, &rows).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("batch_size,mean_us,std_us,per_frame_us,runs\r\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn stitched_inference_covers_the_scanned_region() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path());
        let scene = build_scene(&config).unwrap();
        let plan =
            centered_spiral(&config, 1, 12, config.scan_step, object_center(&config)).unwrap();
        let frames =
            record_frames(&scene, &plan, config.photon_budget, config.noise, 1.0, 5).unwrap();
        let model = SurrogateModel::new(2, 0).unwrap();
        let canvas = stitch_inferences(&model, &frames, &plan, 96, 96, 1.0).unwrap();
        assert_eq!(canvas.frames_stitched(), 12);
        assert_eq!(canvas.clipped(), 0);
        let coverage = canvas.coverage();
        assert!(coverage.at(48, 48) > 0.0);
        assert_eq!(coverage.at(0, 0), 0.0);
    }

    #[test]
    fn pipeline_counts_frames_and_pushes_a_model() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path());
        let summary = run_pipeline(&config, dir.path()).unwrap();
        assert_eq!(summary.frames_streamed, 48);
        assert_eq!(summary.results_received, 48, "events: {:?}", summary.events);
        assert!(!summary.models_pushed.is_empty());
        assert_eq!(summary.models_pushed[0], 1);
        assert!(summary.final_canvas_ssim.is_finite());
        assert_eq!(summary.scan_log.len(), 2);
        assert!(summary.mean_latency_us.is_some());
    }

    #[test]
    fn pipeline_metrics_repeat_under_the_same_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_pipeline(&micro_config(dir_a.path()), dir_a.path()).unwrap();
        let b = run_pipeline(&micro_config(dir_b.path()), dir_b.path()).unwrap();
        assert_eq!(a.frames_streamed, b.frames_streamed);
        assert_eq!(a.results_received, b.results_received);
        assert_eq!(a.models_pushed, b.models_pushed);
        assert_eq!(a.final_canvas_ssim, b.final_canvas_ssim);
    }

    #[test]
    fn overlap_rows_report_achieved_ratios() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = micro_config(dir.path());
        config.scan_points = 120;
        config.train_epochs = 1;
        config.epie_iterations = 10;
        config.overlap_ratios = vec![0.8, 0.0];
        let sweep = overlap_sweep(&config).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        assert_eq!(sweep.rows[0].stride, 4);
        assert_eq!(sweep.rows[1].stride, 100);
        assert_eq!(sweep.rows[0].n_points, 30);
        assert_eq!(sweep.rows[1].n_points, 2);
        for row in &sweep.rows {
            assert!((row.achieved_overlap - row.target_overlap).abs() < 1e-9);
            assert!(row.ssim_surrogate.is_finite() && row.ssim_epie.is_finite());
        }
        let mut artifacts = Artifacts::new(dir.path()).unwrap();
        let path = write_overlap_csv(&mut artifacts, &sweep).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("overlap_ratio,ssim_surrogate,ssim_epie,"));
    }

    #[test]
    fn dose_rows_cover_both_strategies_with_baselines() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = micro_config(dir.path());
        config.train_epochs = 1;
        config.epie_iterations = 10;
        config.dose_factors_upscale = vec![16.0];
        config.dose_factors_retrain = vec![16.0];
        let sweep = dose_sweep(&config).unwrap();
        assert_eq!(sweep.rows.len(), 4);
        let upscale: Vec<&DoseRow> =
            sweep.rows.iter().filter(|r| r.strategy == "upscale").collect();
        let retrain: Vec<&DoseRow> =
            sweep.rows.iter().filter(|r| r.strategy == "retrain").collect();
        assert_eq!(upscale.iter().map(|r| r.factor).collect::<Vec<_>>(), [1.0, 16.0]);
        assert_eq!(retrain.iter().map(|r| r.factor).collect::<Vec<_>>(), [1.0, 16.0]);
        // attenuation actually dims the detector
        assert!(upscale[1].max_count < upscale[0].max_count / 8);
        assert_eq!(sweep.baseline_ssim, upscale[0].ssim);
        for row in &sweep.rows {
            assert!(row.ssim.is_finite(), "{row:?}");
        }
    }

    #[test]
    fn learning_curve_scores_every_version_on_both_areas() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = micro_config(dir.path());
        config.object_width = 128;
        config.canvas_width = 128;
        config.scan_points = 16;
        config.epie_iterations = 15;
        let run = learning_curve_run(&config, dir.path()).unwrap();
        assert_eq!(run.rows.len(), 2, "log: {:?}", run.scan_log);
        assert_eq!(run.rows[0].version, 1);
        assert_eq!(run.rows[1].version, 2);
        assert!(run.rows[1].corpus_size > run.rows[0].corpus_size);
        for row in &run.rows {
            assert!(row.seen_mse.is_finite() && row.unseen_mse.is_finite());
            assert!(row.val_loss.is_finite());
        }
        let mut artifacts = Artifacts::new(dir.path()).unwrap();
        let path = write_curve_csv(&mut artifacts, &run).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("version,corpus_size,val_loss,seen_mse,unseen_mse\r\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
