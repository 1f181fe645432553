//! Timed replay of a scan plan into a frame sink.

use std::io;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffractionFrame, Diffractor, NoiseMode, ScanPlan, SimError};
use crate::field::ComplexField;

/// Receives frames from a single producer thread.
pub trait FrameSink {
    fn send(&mut self, frame: &DiffractionFrame) -> io::Result<()>;
    /// Called once after the last frame; lets socket sinks signal scan end.
    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Collects frames in memory; test and label-building sink.
#[derive(Default)]
pub struct MemorySink {
    pub frames: Vec<DiffractionFrame>,
}

impl FrameSink for MemorySink {
    fn send(&mut self, frame: &DiffractionFrame) -> io::Result<()> {
        self.frames.push(frame.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StreamReport {
    pub frames_sent: usize,
    pub wall: Duration,
    pub achieved_hz: f64,
    /// Set when the sink failed and the stream stopped early.
    pub abort_error: Option<String>,
}

/// Emits every frame of the plan in order, paced at `frame_rate_hz`
/// (None = unpaced). Frames are generated up-front so pacing measures the
/// delivery path, not the physics. A sink failure aborts the stream and
/// the partial report carries the error.
pub fn run_scan_stream(
    object: &ComplexField,
    probe: &ComplexField,
    plan: &ScanPlan,
    photon_budget: f64,
    noise: NoiseMode,
    frame_rate_hz: Option<f64>,
    seed: u64,
    sink: &mut dyn FrameSink,
) -> Result<StreamReport, SimError> {
    if let Some(rate) = frame_rate_hz {
        if rate <= 0.0 {
            return Err(SimError::BadRate(rate));
        }
    }
    let exposure_ms = frame_rate_hz.map(|r| 1000.0 / r as f32).unwrap_or(1.0) as f32;
    let mut diff = Diffractor::new(object, probe, photon_budget, noise, plan.scan_id)?
        .with_exposure_ms(exposure_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(plan.n_points);
    for (i, &pos) in plan.positions.iter().enumerate() {
        frames.push(diff.frame(pos, i as u32, &mut rng)?);
    }

    let period = frame_rate_hz.map(|r| Duration::from_secs_f64(1.0 / r));
    let start = Instant::now();
    let mut sent = 0usize;
    let mut abort_error = None;
    for (i, frame) in frames.iter().enumerate() {
        if let Some(period) = period {
            pace_until(start + period * i as u32);
        }
        match sink.send(frame) {
            Ok(()) => sent += 1,
            Err(e) => {
                abort_error = Some(e.to_string());
                break;
            }
        }
    }
    if abort_error.is_none() {
        if let Err(e) = sink.finish() {
            abort_error = Some(e.to_string());
        }
    }
    let wall = start.elapsed();
    let achieved_hz = if wall.as_secs_f64() > 0.0 {
        sent as f64 / wall.as_secs_f64()
    } else {
        0.0
    };
    Ok(StreamReport { frames_sent: sent, wall, achieved_hz, abort_error })
}

/// Sleeps coarsely then spins for the final stretch; plain sleep alone
/// overshoots by more than a frame period at kilohertz rates.
fn pace_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let remaining = deadline - now;
        if remaining > Duration::from_micros(300) {
            std::thread::sleep(remaining - Duration::from_micros(200));
        } else {
            std::hint::spin_loop();
        }
    }
}
