//! Core numeric types: complex fields, real images, and the overlap spec.
//!
//! A [`ComplexField`] holds probes, object transmission functions, exit
//! waves, and far fields; a [`RealImage`] holds amplitude or phase views
//! and every reconstructed or inferred image in the pipeline.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("beam size must be positive, got {0}")]
    NonPositiveBeam(f64),
    #[error("step size must be non-negative, got {0}")]
    NegativeStep(f64),
    #[error("row {row} out of range for height {height}")]
    RowOutOfRange { row: usize, height: usize },
    #[error("dynamic range must be positive, got {0}")]
    NonPositiveDynamicRange(f64),
    #[error("image {0}x{1} is smaller than the {2}x{2} metric window")]
    ImageSmallerThanWindow(usize, usize, usize),
    #[error("data length {got} does not match {height}x{width}")]
    BadDataLength { got: usize, height: usize, width: usize },
}

/// 2-D array of complex amplitudes, row-major, 64-bit components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexField { height, width, data: vec![Complex64::default(); height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        ComplexField { height, width, data: vec![Complex64::new(1.0, 0.0); height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), height * width, "data length must be height*width");
        ComplexField { height, width, data }
    }

    pub fn try_from_data(
        height: usize,
        width: usize,
        data: Vec<Complex64>,
    ) -> Result<Self, CoreError> {
        if data.len() != height * width {
            return Err(CoreError::BadDataLength { got: data.len(), height, width });
        }
        Ok(ComplexField { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ComplexField { height, width, data }
    }

    /// Amplitude and phase images from polar parts, same shape as the field.
    pub fn from_polar(amplitude: &RealImage, phase: &RealImage) -> Result<Self, CoreError> {
        check_same_shape(
            (amplitude.height, amplitude.width),
            (phase.height, phase.width),
        )?;
        let data = amplitude
            .data
            .iter()
            .zip(&phase.data)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        Ok(ComplexField { height: amplitude.height, width: amplitude.width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: Complex64) {
        self.data[y * self.width + x] = v;
    }

    pub fn amplitude(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn phase(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.arg()).collect(),
        }
    }

    /// Copies the square patch with top-left `origin` into `dst` (len n*n).
    pub fn copy_patch(&self, origin: (i64, i64), n: usize, dst: &mut [Complex64]) {
        debug_assert!(dst.len() == n * n);
        let (oy, ox) = origin;
        assert!(
            oy >= 0 && ox >= 0 && oy + n as i64 <= self.height as i64 && ox + n as i64 <= self.width as i64,
            "patch out of bounds"
        );
        for dy in 0..n {
            let src_row = (oy as usize + dy) * self.width + ox as usize;
            dst[dy * n..(dy + 1) * n].copy_from_slice(&self.data[src_row..src_row + n]);
        }
    }

    pub fn scale(&mut self, factor: Complex64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// 2-D array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        RealImage { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "data length must be height*width");
        RealImage { height, width, data }
    }

    pub fn try_from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self, CoreError> {
        if data.len() != height * width {
            return Err(CoreError::BadDataLength { got: data.len(), height, width });
        }
        Ok(RealImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        RealImage { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
        }
        (min, max)
    }

    /// Rectangular crop; panics when the rect exceeds the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> RealImage {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let start = (top + y) * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        RealImage { height, width, data }
    }
}

/// Step size S and beam size B (FWHM), both in grid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapSpec {
    pub step_size: f64,
    pub beam_size: f64,
}

/// Overlap ratio 1 - S/B. Negative when the step exceeds the beam;
/// the caller decides whether that is meaningful.
pub fn overlap_ratio(spec: OverlapSpec) -> Result<f64, CoreError> {
    if spec.beam_size <= 0.0 {
        return Err(CoreError::NonPositiveBeam(spec.beam_size));
    }
    if spec.step_size < 0.0 {
        return Err(CoreError::NegativeStep(spec.step_size));
    }
    Ok(1.0 - spec.step_size / spec.beam_size)
}

/// Result of removing the global phase ambiguity from an estimate.
#[derive(Debug, Clone)]
pub struct PhaseAlignment {
    pub field: ComplexField,
    /// Rotation that was removed, in radians.
    pub rotation: f64,
    /// True when the inner product was zero and no rotation could be found;
    /// the estimate is returned unchanged in that case.
    pub degenerate: bool,
}

/// Rotates `estimate` by the unit complex number that maximizes the real
/// part of its inner product with `reference`. Phase retrieval recovers
/// phase only up to a global constant, so this runs before any comparison.
pub fn align_global_phase(
    estimate: &ComplexField,
    reference: &ComplexField,
) -> Result<PhaseAlignment, CoreError> {
    check_same_shape(
        (estimate.height, estimate.width),
        (reference.height, reference.width),
    )?;
    let mut inner = Complex64::default();
    for (e, r) in estimate.data.iter().zip(&reference.data) {
        inner += r.conj() * e;
    }
    if inner.norm() == 0.0 {
        return Ok(PhaseAlignment { field: estimate.clone(), rotation: 0.0, degenerate: true });
    }
    let theta = inner.arg();
    let mut field = estimate.clone();
    field.scale(Complex64::from_polar(1.0, -theta));
    Ok(PhaseAlignment { field, rotation: theta, degenerate: false })
}

/// Constant phase offset that best aligns a real-valued phase image with a
/// reference, computed on the unit circle so it is robust to wrapping.
/// Subtracting the returned offset from `estimate` aligns it.
pub fn phase_offset(estimate: &RealImage, reference: &RealImage) -> Result<f64, CoreError> {
    check_same_shape(
        (estimate.height, estimate.width),
        (reference.height, reference.width),
    )?;
    let mut inner = Complex64::default();
    for (&e, &r) in estimate.data.iter().zip(&reference.data) {
        inner += Complex64::from_polar(1.0, e - r);
    }
    if inner.norm() == 0.0 {
        return Ok(0.0);
    }
    Ok(inner.arg())
}

/// Pixel values of one image row.
pub fn line_profile(img: &RealImage, row: usize) -> Result<Vec<f64>, CoreError> {
    if row >= img.height {
        return Err(CoreError::RowOutOfRange { row, height: img.height });
    }
    Ok(img.data[row * img.width..(row + 1) * img.width].to_vec())
}

pub(crate) fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), CoreError> {
    if a != b {
        return Err(CoreError::ShapeMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_fn(h, w, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn overlap_ratio_formula() {
        let eq = overlap_ratio(OverlapSpec { step_size: 5.0, beam_size: 5.0 }).unwrap();
        assert_eq!(eq, 0.0);
        let zero_step = overlap_ratio(OverlapSpec { step_size: 0.0, beam_size: 3.0 }).unwrap();
        assert_eq!(zero_step, 1.0);
        // the printed formula gives 0.9333... for S=50, B=750
        let dense = overlap_ratio(OverlapSpec { step_size: 50.0, beam_size: 750.0 }).unwrap();
        assert!((dense - (1.0 - 50.0 / 750.0)).abs() < 1e-15);
        assert!((dense - 0.93333333).abs() < 1e-6);
    }

    #[test]
    fn overlap_ratio_rejects_bad_beam() {
        assert!(overlap_ratio(OverlapSpec { step_size: 1.0, beam_size: 0.0 }).is_err());
        assert!(overlap_ratio(OverlapSpec { step_size: 1.0, beam_size: -2.0 }).is_err());
        assert!(overlap_ratio(OverlapSpec { step_size: -1.0, beam_size: 2.0 }).is_err());
    }

    #[test]
    fn overlap_ratio_decreasing_in_step() {
        let b = 10.0;
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let s = i as f64 * 0.7;
            let r = overlap_ratio(OverlapSpec { step_size: s, beam_size: b }).unwrap();
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn align_identity_is_noop() {
        let x = random_field(6, 6, 1);
        let aligned = align_global_phase(&x, &x).unwrap();
        assert!(!aligned.degenerate);
        assert!(aligned.rotation.abs() < 1e-12);
        for (a, b) in aligned.field.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn align_removes_exact_rotation() {
        let x = random_field(8, 8, 2);
        let mut rotated = x.clone();
        rotated.scale(Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_3));
        let aligned = align_global_phase(&rotated, &x).unwrap();
        for (a, b) in aligned.field.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn align_recovers_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..50 {
            let x = random_field(8, 8, seed);
            let theta = rng.random::<f64>() * std::f64::consts::TAU - std::f64::consts::PI;
            let mut rotated = x.clone();
            rotated.scale(Complex64::from_polar(1.0, theta));
            let aligned = align_global_phase(&rotated, &x).unwrap();
            for (a, b) in aligned.field.data().iter().zip(x.data()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn align_is_idempotent() {
        let x = random_field(8, 8, 5);
        let mut rotated = x.clone();
        rotated.scale(Complex64::from_polar(1.0, 1.234));
        let once = align_global_phase(&rotated, &x).unwrap();
        let twice = align_global_phase(&once.field, &x).unwrap();
        for (a, b) in twice.field.data().iter().zip(once.field.data()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn align_degenerate_zero_inner_product() {
        let x = random_field(4, 4, 3);
        let zero = ComplexField::zeros(4, 4);
        let aligned = align_global_phase(&x, &zero).unwrap();
        assert!(aligned.degenerate);
        assert_eq!(aligned.field.data(), x.data());
    }

    #[test]
    fn align_shape_mismatch() {
        let a = ComplexField::zeros(4, 4);
        let b = ComplexField::zeros(4, 5);
        assert!(align_global_phase(&a, &b).is_err());
    }

    #[test]
    fn phase_offset_recovers_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reference = RealImage::from_fn(8, 8, |_, _| rng.random::<f64>());
        let offset = 0.37;
        let shifted = RealImage::from_fn(8, 8, |y, x| reference.at(y, x) + offset);
        let found = phase_offset(&shifted, &reference).unwrap();
        assert!((found - offset).abs() < 1e-12);
    }

    #[test]
    fn line_profile_rows() {
        let img = RealImage::from_data(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(line_profile(&img, 1).unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(line_profile(&img, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(line_profile(&img, 2).is_err());
    }

    #[test]
    fn amplitude_phase_views_shape() {
        let f = random_field(5, 7, 10);
        let amp = f.amplitude();
        let ph = f.phase();
        assert_eq!((amp.height(), amp.width()), (5, 7));
        assert_eq!((ph.height(), ph.width()), (5, 7));
        for i in 0..f.data().len() {
            assert!((amp.data()[i] - f.data()[i].norm()).abs() < 1e-15);
        }
    }
}
