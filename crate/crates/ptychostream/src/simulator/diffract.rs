//! Photon-limited far-field diffraction of a probe against an object.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{DiffractionFrame, SimError};
use crate::fft::Fft2;
use crate::field::{ComplexField, RealImage};
use crate::geom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Poisson,
    /// Rounds the expected intensity instead of sampling it.
    Noiseless,
}

/// Repeated-frame generator holding the FFT plan and scratch buffers so a
/// whole scan costs one allocation.
pub struct Diffractor<'a> {
    object: &'a ComplexField,
    probe: &'a ComplexField,
    photon_budget: f64,
    noise: NoiseMode,
    scan_id: u64,
    exposure_ms: f32,
    fft: Fft2,
    psi: Vec<Complex64>,
    far: Vec<Complex64>,
}

impl<'a> Diffractor<'a> {
    pub fn new(
        object: &'a ComplexField,
        probe: &'a ComplexField,
        photon_budget: f64,
        noise: NoiseMode,
        scan_id: u64,
    ) -> Result<Self, SimError> {
        if photon_budget < 0.0 {
            return Err(SimError::NegativeBudget(photon_budget));
        }
        let n = probe.height();
        assert_eq!(probe.width(), n, "probe window must be square");
        Ok(Diffractor {
            object,
            probe,
            photon_budget,
            noise,
            scan_id,
            exposure_ms: 1.0,
            fft: Fft2::new(n, n),
            psi: vec![Complex64::default(); n * n],
            far: vec![Complex64::default(); n * n],
        })
    }

    pub fn with_exposure_ms(mut self, exposure_ms: f32) -> Self {
        self.exposure_ms = exposure_ms;
        self
    }

    /// Exit wave ψ = probe ⊙ object patch; intensity |DFT ψ|² scaled so
    /// its sum equals the photon budget; then Poisson-sampled (or rounded)
    /// and clipped to 16 bits.
    pub fn frame(
        &mut self,
        position: (f64, f64),
        frame_index: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<DiffractionFrame, SimError> {
        let n = self.probe.height();
        let origin = geom::patch_origin(position, n);
        if !geom::patch_in_bounds(position, n, self.object.height(), self.object.width()) {
            return Err(SimError::PositionOutOfBounds {
                n,
                h: self.object.height(),
                w: self.object.width(),
                y: position.0,
                x: position.1,
            });
        }
        self.object.copy_patch(origin, n, &mut self.psi);
        for (p, v) in self.probe.data().iter().zip(self.psi.iter_mut()) {
            *v *= p;
        }
        self.fft.forward_centered_into(&self.psi, &mut self.far);

        let total: f64 = self.far.iter().map(|v| v.norm_sqr()).sum();
        let scale = if total > 0.0 { self.photon_budget / total } else { 0.0 };
        let mut counts = Vec::with_capacity(n * n);
        for v in &self.far {
            let lambda = scale * v.norm_sqr();
            let c = match self.noise {
                NoiseMode::Noiseless => lambda.round(),
                NoiseMode::Poisson => {
                    if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive mean").sample(rng)
                    } else {
                        0.0
                    }
                }
            };
            counts.push(c.min(65535.0).max(0.0) as u16);
        }
        Ok(DiffractionFrame::new(
            self.scan_id,
            frame_index,
            position,
            self.exposure_ms,
            n,
            counts,
        ))
    }
}

/// One-shot convenience wrapper around [`Diffractor`].
pub fn diffract(
    object: &ComplexField,
    probe: &ComplexField,
    position: (f64, f64),
    photon_budget: f64,
    noise: NoiseMode,
    rng: &mut ChaCha8Rng,
) -> Result<DiffractionFrame, SimError> {
    Diffractor::new(object, probe, photon_budget, noise, 0)?.frame(position, 0, rng)
}

/// Unscaled pre-noise far-field intensity |DFT(probe ⊙ patch)|².
pub fn far_field_intensity(
    object: &ComplexField,
    probe: &ComplexField,
    position: (f64, f64),
) -> Result<RealImage, SimError> {
    let n = probe.height();
    if !geom::patch_in_bounds(position, n, object.height(), object.width()) {
        return Err(SimError::PositionOutOfBounds {
            n,
            h: object.height(),
            w: object.width(),
            y: position.0,
            x: position.1,
        });
    }
    let origin = geom::patch_origin(position, n);
    let mut psi = vec![Complex64::default(); n * n];
    object.copy_patch(origin, n, &mut psi);
    for (p, v) in probe.data().iter().zip(psi.iter_mut()) {
        *v *= p;
    }
    let mut far = vec![Complex64::default(); n * n];
    Fft2::new(n, n).forward_centered_into(&psi, &mut far);
    Ok(RealImage::from_data(n, n, far.iter().map(|v| v.norm_sqr()).collect()))
}
