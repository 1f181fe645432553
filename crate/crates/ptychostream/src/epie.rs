//! Iterative ptychographic phase retrieval (ePIE).
//!
//! Produces the ground-truth object and refined probe used for training
//! labels and accuracy baselines. The measured amplitudes are rescaled
//! once, up front, by the ratio of total detected counts to the forward
//! model's power at the initial probe, so the solver works at the probe's
//! native scale and the recovered object stays near unit amplitude
//! regardless of photon budget. Per-iteration visit order is reshuffled
//! with a seed derived from `shuffle_seed`, so runs are bit-reproducible.

use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::{check_same_shape, ComplexField, CoreError, RealImage};
use crate::fft::Fft2;
use crate::geom;
use crate::imageio::{write_pgm16, PgmError};
use crate::simulator::{DiffractionFrame, ScanPlan};

#[derive(Debug, Error)]
pub enum EpieError {
    #[error("no frames to reconstruct from")]
    EmptyFrames,
    #[error("{frames} frames but plan has {plan} positions")]
    CountMismatch { frames: usize, plan: usize },
    #[error("frame {index} is {got}x{got}, probe is {expected}x{expected}")]
    FrameSizeMismatch { index: usize, expected: usize, got: usize },
    #[error("probe must be square")]
    ProbeNotSquare,
    #[error("probe window at position {index} falls outside the object")]
    PositionOutOfBounds { index: usize },
    #[error("alpha {0} outside (0, 2]")]
    BadAlpha(f64),
    #[error("beta {0} outside [0, 2]")]
    BadBeta(f64),
    #[error("n_iterations must be >= 1")]
    ZeroIterations,
    #[error("patch size {k} invalid for probe window {window}")]
    BadPatch { k: usize, window: usize },
    #[error("patch at position {index} falls outside the reconstruction")]
    PatchOutsideObject { index: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Solver knobs. `alpha`/`beta` are the object/probe step sizes of the
/// update rule; the probe is held frozen for the first
/// `probe_update_start` iterations so a flat object guess cannot corrupt
/// it.
#[derive(Debug, Clone)]
pub struct EpieConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_iterations: usize,
    pub probe_update_start: usize,
    pub epsilon: f64,
    pub shuffle_seed: u64,
}

impl Default for EpieConfig {
    fn default() -> Self {
        EpieConfig {
            alpha: 1.0,
            beta: 1.0,
            n_iterations: 200,
            probe_update_start: 5,
            epsilon: 1e-12,
            shuffle_seed: 0,
        }
    }
}

impl EpieConfig {
    fn validate(&self) -> Result<(), EpieError> {
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(EpieError::BadAlpha(self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta <= 2.0) {
            return Err(EpieError::BadBeta(self.beta));
        }
        if self.n_iterations == 0 {
            return Err(EpieError::ZeroIterations);
        }
        Ok(())
    }
}

/// Solver output. `error[i]` is the RMS difference between measured and
/// model far-field amplitudes accumulated while sweeping iteration `i`.
/// `illumination` is the final probe's accumulated |P|^2 footprint over
/// all scan positions; pixels it never touched hold the initial guess.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub object: ComplexField,
    pub probe: ComplexField,
    pub error: Vec<f64>,
    pub iterations_run: usize,
    pub illumination: RealImage,
}

impl Reconstruction {
    /// 0/1 mask of pixels receiving more than 1% of the peak illumination;
    /// comparisons are meaningful only there.
    pub fn illumination_mask(&self) -> RealImage {
        let (_, max) = self.illumination.min_max();
        let thresh = 0.01 * max;
        RealImage::from_data(
            self.illumination.height(),
            self.illumination.width(),
            self.illumination.data().iter().map(|&v| if v > thresh { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Replaces the amplitude of `far_field` with `measured_amplitude`,
/// keeping the phase. Pixels where the model amplitude is exactly zero
/// carry no phase and come out as `measured + 0i`.
pub fn modulus_projection(
    far_field: &ComplexField,
    measured_amplitude: &RealImage,
    epsilon: f64,
) -> Result<ComplexField, CoreError> {
    check_same_shape(
        (far_field.height(), far_field.width()),
        (measured_amplitude.height(), measured_amplitude.width()),
    )?;
    let data = far_field
        .data()
        .iter()
        .zip(measured_amplitude.data())
        .map(|(&f, &m)| project_pixel(f, m, epsilon))
        .collect();
    Ok(ComplexField::from_data(far_field.height(), far_field.width(), data))
}

#[inline]
fn project_pixel(f: Complex64, m: f64, epsilon: f64) -> Complex64 {
    let a = f.norm();
    if a == 0.0 {
        Complex64::new(m, 0.0)
    } else {
        f * (m / (a + epsilon))
    }
}

/// Runs ePIE over the given frames. Per frame j (in shuffled order):
/// psi = P * O_j, PSI = DFT(psi), PSI' = modulus projection against the
/// measured amplitude, psi' = IDFT(PSI'), then
/// O_j += alpha * conj(P)/max|P|^2 * (psi' - psi) and, once
/// `probe_update_start` is reached,
/// P += beta * conj(O_j)/max|O_j|^2 * (psi' - psi), both computed from
/// the pre-update P and O_j.
pub fn epie_reconstruct(
    frames: &[DiffractionFrame],
    plan: &ScanPlan,
    probe_init: &ComplexField,
    object_init: &ComplexField,
    config: &EpieConfig,
) -> Result<Reconstruction, EpieError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(EpieError::EmptyFrames);
    }
    if frames.len() != plan.n_points {
        return Err(EpieError::CountMismatch { frames: frames.len(), plan: plan.n_points });
    }
    if probe_init.height() != probe_init.width() {
        return Err(EpieError::ProbeNotSquare);
    }
    let n = probe_init.height();
    for (i, f) in frames.iter().enumerate() {
        if f.n() != n {
            return Err(EpieError::FrameSizeMismatch { index: i, expected: n, got: f.n() });
        }
    }
    let (oh, ow) = (object_init.height(), object_init.width());
    for (i, &pos) in plan.positions.iter().enumerate() {
        if !geom::patch_in_bounds(pos, n, oh, ow) {
            return Err(EpieError::PositionOutOfBounds { index: i });
        }
    }

    // One global scale maps detector counts onto the model's power scale:
    // s = mean total counts / (N^2 * sum|P_init|^2), the count total a
    // unit-amplitude object would produce under the initial probe.
    let n2 = n * n;
    let mean_counts = frames.iter().map(|f| f.total_counts() as f64).sum::<f64>() / frames.len() as f64;
    let probe_power: f64 = probe_init.data().iter().map(|p| p.norm_sqr()).sum();
    let denom = n2 as f64 * probe_power;
    let scale = if denom > 0.0 { (mean_counts / denom).sqrt() } else { 1.0 };
    let inv_scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let mut measured = vec![0.0f64; frames.len() * n2];
    for (j, f) in frames.iter().enumerate() {
        for (dst, &c) in measured[j * n2..(j + 1) * n2].iter_mut().zip(f.counts()) {
            *dst = (c as f64).sqrt() * inv_scale;
        }
    }

    let mut object = object_init.clone();
    let mut probe = probe_init.clone();
    let mut fft = Fft2::new(n, n);
    let mut patch = vec![Complex64::default(); n2];
    let mut psi = vec![Complex64::default(); n2];
    let mut far = vec![Complex64::default(); n2];
    let mut diff = vec![Complex64::default(); n2];
    let mut probe_next = vec![Complex64::default(); n2];
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut error = Vec::with_capacity(config.n_iterations);

    for iter in 0..config.n_iterations {
        let iter_seed = config.shuffle_seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(iter_seed));
        let update_probe = config.beta > 0.0 && iter >= config.probe_update_start;
        let mut sq_sum = 0.0;

        for &j in &order {
            let origin = geom::patch_origin(plan.positions[j], n);
            object.copy_patch(origin, n, &mut patch);
            for i in 0..n2 {
                psi[i] = probe.data()[i] * patch[i];
            }
            fft.forward_centered_into(&psi, &mut far);
            let m = &measured[j * n2..(j + 1) * n2];
            for i in 0..n2 {
                let a = far[i].norm();
                let d = a - m[i];
                sq_sum += d * d;
                far[i] = project_pixel(far[i], m[i], config.epsilon);
            }
            fft.inverse_centered_into(&far, &mut diff);
            for i in 0..n2 {
                diff[i] -= psi[i];
            }

            // both updates read the pre-update estimates; updating the
            // probe from the already-stepped object double-applies the
            // correction and destabilizes the joint iteration
            let max_p2 = probe.data().iter().map(|p| p.norm_sqr()).fold(0.0, f64::max);
            if update_probe {
                let max_o2 = patch.iter().map(|o| o.norm_sqr()).fold(0.0, f64::max);
                if max_o2 > 0.0 {
                    let gain = config.beta / max_o2;
                    for i in 0..n2 {
                        let upd = gain * patch[i].conj() * diff[i];
                        let p = probe.data()[i] + upd;
                        probe_next[i] = p;
                    }
                } else {
                    probe_next.copy_from_slice(probe.data());
                }
            }
            if max_p2 > 0.0 {
                let gain = config.alpha / max_p2;
                for i in 0..n2 {
                    patch[i] += gain * probe.data()[i].conj() * diff[i];
                }
            }
            if update_probe {
                probe.data_mut().copy_from_slice(&probe_next);
            }
            paste_patch(&mut object, origin, n, &patch);
        }
        error.push((sq_sum / (frames.len() * n2) as f64).sqrt());
    }

    let mut illumination = RealImage::zeros(oh, ow);
    for &pos in &plan.positions {
        let (oy, ox) = geom::patch_origin(pos, n);
        for y in 0..n {
            for x in 0..n {
                let v = probe.at(y, x).norm_sqr();
                let iy = (oy as usize) + y;
                let ix = (ox as usize) + x;
                illumination.set(iy, ix, illumination.at(iy, ix) + v);
            }
        }
    }

    Ok(Reconstruction {
        object,
        probe,
        error,
        iterations_run: config.n_iterations,
        illumination,
    })
}

/// Writes an `n`x`n` patch back at `origin`; caller guarantees bounds.
fn paste_patch(field: &mut ComplexField, origin: (i64, i64), n: usize, src: &[Complex64]) {
    let w = field.width();
    let (oy, ox) = (origin.0 as usize, origin.1 as usize);
    let data = field.data_mut();
    for y in 0..n {
        let row = (oy + y) * w + ox;
        data[row..row + n].copy_from_slice(&src[y * n..(y + 1) * n]);
    }
}

/// Pins the two gauge freedoms the update rule cannot see. Scaling
/// (O/s, sP) and the linear ramp pair (O e^{iq.r}, P e^{-iq.r}) leave
/// every modeled intensity untouched, so the iteration drifts along
/// both once probe updates are enabled. This rescales the probe to the
/// reference's total power and recenters its far-field intensity
/// centroid, applying the inverse scale and counter-ramp to the object.
/// No modeled intensity changes; `error` stays valid.
pub fn canonicalize_gauge(
    recon: &mut Reconstruction,
    reference_probe: &ComplexField,
) -> Result<(), EpieError> {
    let n = recon.probe.height();
    if reference_probe.height() != n || reference_probe.width() != recon.probe.width() {
        return Err(EpieError::Core(CoreError::ShapeMismatch(
            n,
            recon.probe.width(),
            reference_probe.height(),
            reference_probe.width(),
        )));
    }
    let ref_power: f64 = reference_probe.data().iter().map(|c| c.norm_sqr()).sum();
    let cur_power: f64 = recon.probe.data().iter().map(|c| c.norm_sqr()).sum();
    if ref_power > 0.0 && cur_power > 0.0 {
        let s = (ref_power / cur_power).sqrt();
        recon.probe.scale(Complex64::new(s, 0.0));
        recon.object.scale(Complex64::new(1.0 / s, 0.0));
        for v in recon.illumination.data_mut() {
            *v *= s * s;
        }
    }

    // Centroid of a non-integer ramp is only approximately linear in q,
    // so correct iteratively; a handful of rounds reaches fp precision.
    // The target is the reference probe's own centroid, which makes the
    // whole pass a no-op when the probe never moved.
    let mut fft = Fft2::new(n, n);
    let center = n as f64 / 2.0;
    let (oh, ow) = (recon.object.height(), recon.object.width());
    let far_centroid = |far: &ComplexField| -> Option<(f64, f64)> {
        let mut total = 0.0;
        let (mut my, mut mx) = (0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let w = far.at(y, x).norm_sqr();
                total += w;
                my += w * y as f64;
                mx += w * x as f64;
            }
        }
        (total > 0.0).then(|| (my / total, mx / total))
    };
    let reference = far_centroid(&fft.forward_centered(reference_probe));
    for _ in 0..16 {
        let current = far_centroid(&fft.forward_centered(&recon.probe));
        let (Some(want), Some(have)) = (reference, current) else {
            break;
        };
        let (dy, dx) = (have.0 - want.0, have.1 - want.1);
        if dy.abs() < 1e-12 && dx.abs() < 1e-12 {
            break;
        }
        let (qy, qx) = (
            2.0 * std::f64::consts::PI * dy / n as f64,
            2.0 * std::f64::consts::PI * dx / n as f64,
        );
        for y in 0..n {
            for x in 0..n {
                let ph = qy * (y as f64 - center) + qx * (x as f64 - center);
                let v = recon.probe.at(y, x) * Complex64::from_polar(1.0, -ph);
                recon.probe.set(y, x, v);
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                let ph = qy * (y as f64 - oh as f64 / 2.0) + qx * (x as f64 - ow as f64 / 2.0);
                let v = recon.object.at(y, x) * Complex64::from_polar(1.0, ph);
                recon.object.set(y, x, v);
            }
        }
    }
    Ok(())
}

/// A diffraction frame paired with the real-space amplitude and phase
/// patches cropped from a reconstruction at its scan position.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub frame: DiffractionFrame,
    pub amplitude: RealImage,
    pub phase: RealImage,
}

/// Crops the K x K region of the reconstructed object centered on each
/// (rounded) scan position and pairs it with the corresponding frame.
pub fn crop_training_pairs(
    recon: &Reconstruction,
    plan: &ScanPlan,
    frames: &[DiffractionFrame],
    patch_size: usize,
) -> Result<Vec<LabeledPair>, EpieError> {
    let window = recon.probe.height();
    if patch_size == 0 || patch_size > window {
        return Err(EpieError::BadPatch { k: patch_size, window });
    }
    if frames.len() != plan.n_points {
        return Err(EpieError::CountMismatch { frames: frames.len(), plan: plan.n_points });
    }
    let (oh, ow) = (recon.object.height(), recon.object.width());
    let mut pairs = Vec::with_capacity(frames.len());
    for (j, &pos) in plan.positions.iter().enumerate() {
        if !geom::patch_in_bounds(pos, patch_size, oh, ow) {
            return Err(EpieError::PatchOutsideObject { index: j });
        }
        let (oy, ox) = geom::patch_origin(pos, patch_size);
        let (oy, ox) = (oy as usize, ox as usize);
        let amplitude = RealImage::from_fn(patch_size, patch_size, |y, x| {
            recon.object.at(oy + y, ox + x).norm()
        });
        let phase = RealImage::from_fn(patch_size, patch_size, |y, x| {
            recon.object.at(oy + y, ox + x).arg()
        });
        pairs.push(LabeledPair { frame: frames[j].clone(), amplitude, phase });
    }
    Ok(pairs)
}

/// Handle to a reconstruction running on a worker thread. `is_done` may
/// be polled from any thread; `wait` joins and yields the result.
pub struct EpieJob {
    done: Arc<AtomicBool>,
    slot: Arc<Mutex<Option<Result<Reconstruction, EpieError>>>>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl EpieJob {
    pub fn is_done(&self) -> bool {
        self.done.load(Ordering::Acquire)
    }

    pub fn wait(mut self) -> Result<Reconstruction, EpieError> {
        if let Some(h) = self.handle.take() {
            h.join().expect("epie worker panicked");
        }
        self.slot.lock().unwrap().take().expect("epie job finished without a result")
    }
}

/// Starts a reconstruction on a dedicated thread.
pub fn submit(
    frames: Vec<DiffractionFrame>,
    plan: ScanPlan,
    probe_init: ComplexField,
    object_init: ComplexField,
    config: EpieConfig,
) -> EpieJob {
    let done = Arc::new(AtomicBool::new(false));
    let slot = Arc::new(Mutex::new(None));
    let handle = {
        let done = Arc::clone(&done);
        let slot = Arc::clone(&slot);
        std::thread::spawn(move || {
            let result = epie_reconstruct(&frames, &plan, &probe_init, &object_init, &config);
            *slot.lock().unwrap() = Some(result);
            done.store(true, Ordering::Release);
        })
    };
    EpieJob { done, slot, handle: Some(handle) }
}

/// Persists a reconstruction as amplitude/phase PGMs (with range
/// sidecars) plus a plain-text metadata file.
pub fn save_reconstruction(
    dir: &Path,
    recon: &Reconstruction,
    scan_id: u64,
) -> Result<(), PgmError> {
    std::fs::create_dir_all(dir)?;
    write_pgm16(&dir.join("amplitude.pgm"), &recon.object.amplitude())?;
    write_pgm16(&dir.join("phase.pgm"), &recon.object.phase())?;
    let mut meta = std::fs::File::create(dir.join("meta.txt"))?;
    writeln!(meta, "scan_id {scan_id}")?;
    writeln!(meta, "iterations {}", recon.iterations_run)?;
    writeln!(meta, "final_error {}", recon.error.last().copied().unwrap_or(f64::NAN))?;
    Ok(())
}
