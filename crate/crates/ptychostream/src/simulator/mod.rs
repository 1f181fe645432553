//! Synthetic measurement side of the workflow: objects, probes, scan
//! plans, photon-limited diffraction frames, and timed frame streams.

mod diffract;
mod frame;
mod object;
mod probe;
mod scan;
mod stream;

pub use diffract::{diffract, far_field_intensity, Diffractor, NoiseMode};
pub use frame::DiffractionFrame;
pub use object::{synth_object, ObjectStyle, SyntheticObject};
pub use probe::{make_probe, ProbeSpec};
pub use scan::{make_spiral_scan, ScanPlan, GOLDEN_ANGLE};
pub use stream::{run_scan_stream, FrameSink, MemorySink, StreamReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n_points must be ≥ 1, got {0}")]
    NoPoints(usize),
    #[error("step_size must be positive, got {0}")]
    BadStep(f64),
    #[error("beam_fwhm {fwhm} must satisfy 0 < fwhm < window {window}")]
    BadBeam { fwhm: f64, window: usize },
    #[error("inner_fraction must be in [0,1), got {0}")]
    BadInnerFraction(f64),
    #[error("object {h}x{w} too small; need at least {min}x{min}")]
    ObjectTooSmall { h: usize, w: usize, min: usize },
    #[error("amplitude floor must be in (0,1], got {0}")]
    BadAmplitudeFloor(f64),
    #[error("phase_max must be in [0, π], got {0}")]
    BadPhaseMax(f64),
    #[error("probe window {n} does not fit object {h}x{w} at position ({y}, {x})")]
    PositionOutOfBounds { n: usize, h: usize, w: usize, y: f64, x: f64 },
    #[error("photon_budget must be ≥ 0, got {0}")]
    NegativeBudget(f64),
    #[error("frame rate must be positive, got {0}")]
    BadRate(f64),
    #[error("subsample stride must be ≥ 1")]
    BadStride,
}
