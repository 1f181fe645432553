//! Image comparison metrics: SSIM, MSE, MAE, and masked variants.
//!
//! SSIM follows the windowed form: Gaussian-weighted local means,
//! variances, and covariance on a square window slid over every position
//! where the window fits entirely inside the image, averaged over those
//! positions. No padding is used.

use crate::field::{check_same_shape, CoreError, RealImage};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized Gaussian window weights, row-major `size*size`.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct WindowStats {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats(
    a: &RealImage,
    b: &RealImage,
    top: usize,
    left: usize,
    weights: &[f64],
    size: usize,
) -> WindowStats {
    let mut mean_a = 0.0;
    let mut mean_b = 0.0;
    for wy in 0..size {
        for wx in 0..size {
            let w = weights[wy * size + wx];
            mean_a += w * a.at(top + wy, left + wx);
            mean_b += w * b.at(top + wy, left + wx);
        }
    }
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for wy in 0..size {
        for wx in 0..size {
            let w = weights[wy * size + wx];
            let da = a.at(top + wy, left + wx) - mean_a;
            let db = b.at(top + wy, left + wx) - mean_b;
            var_a += w * da * da;
            var_b += w * db * db;
            cov += w * da * db;
        }
    }
    WindowStats { mean_a, mean_b, var_a, var_b, cov }
}

#[inline]
fn ssim_term(s: &WindowStats, c1: f64, c2: f64) -> f64 {
    let num = (2.0 * s.mean_a * s.mean_b + c1) * (2.0 * s.cov + c2);
    let den = (s.mean_a * s.mean_a + s.mean_b * s.mean_b + c1) * (s.var_a + s.var_b + c2);
    num / den
}

/// Mean SSIM over all fully-interior window positions.
///
/// `dynamic_range` is L in C1 = (0.01 L)^2, C2 = (0.03 L)^2; pass the
/// value range the images actually live in (1.0 for unit-normalized data).
pub fn ssim(a: &RealImage, b: &RealImage, dynamic_range: f64) -> Result<f64, CoreError> {
    ssim_masked(a, b, dynamic_range, None)
}

/// SSIM restricted to windows whose every pixel is inside the mask.
///
/// `mask` is a same-shape image treated as boolean (> 0.5 is inside).
/// Windows touching any outside pixel are skipped; the mean runs over the
/// surviving windows only. With `None` this is plain [`ssim`].
pub fn ssim_masked(
    a: &RealImage,
    b: &RealImage,
    dynamic_range: f64,
    mask: Option<&RealImage>,
) -> Result<f64, CoreError> {
    check_same_shape((a.height(), a.width()), (b.height(), b.width()))?;
    if let Some(m) = mask {
        check_same_shape((a.height(), a.width()), (m.height(), m.width()))?;
    }
    if dynamic_range <= 0.0 {
        return Err(CoreError::NonPositiveDynamicRange(dynamic_range));
    }
    let size = SSIM_WINDOW;
    if a.height() < size || a.width() < size {
        return Err(CoreError::ImageSmallerThanWindow(a.height(), a.width(), size));
    }
    let weights = gaussian_window(size, SSIM_SIGMA);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(a.height() - size) {
        'windows: for left in 0..=(a.width() - size) {
            if let Some(m) = mask {
                for wy in 0..size {
                    for wx in 0..size {
                        if m.at(top + wy, left + wx) <= 0.5 {
                            continue 'windows;
                        }
                    }
                }
            }
            let stats = window_stats(a, b, top, left, &weights, size);
            total += ssim_term(&stats, c1, c2);
            count += 1;
        }
    }
    if count == 0 {
        // mask excluded every window; define the score as 0 so sweeps
        // treat fully-occluded comparisons as failures, not successes
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Phase-image agreement: removes the best-fit constant phase offset
/// (computed on the unit circle over mask pixels, so wrapped values and
/// out-of-mask garbage cannot bias it), then scores SSIM on the masked
/// region. This is the scoring used everywhere a reconstruction or an
/// inference is compared against a phase reference.
pub fn phase_agreement(
    estimate: &RealImage,
    reference: &RealImage,
    dynamic_range: f64,
    mask: Option<&RealImage>,
) -> Result<f64, CoreError> {
    check_same_shape(
        (estimate.height(), estimate.width()),
        (reference.height(), reference.width()),
    )?;
    if let Some(m) = mask {
        check_same_shape((estimate.height(), estimate.width()), (m.height(), m.width()))?;
    }
    let mut inner = num_complex::Complex64::default();
    for i in 0..estimate.data().len() {
        if mask.map_or(true, |m| m.data()[i] > 0.5) {
            inner += num_complex::Complex64::from_polar(1.0, estimate.data()[i] - reference.data()[i]);
        }
    }
    let offset = if inner.norm() == 0.0 { 0.0 } else { inner.arg() };
    let aligned = RealImage::from_data(
        estimate.height(),
        estimate.width(),
        estimate.data().iter().map(|&v| v - offset).collect(),
    );
    ssim_masked(&aligned, reference, dynamic_range, mask)
}

/// Mean squared error over all pixels.
pub fn mse(a: &RealImage, b: &RealImage) -> Result<f64, CoreError> {
    check_same_shape((a.height(), a.width()), (b.height(), b.width()))?;
    let n = a.data().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Mean absolute error over all pixels.
pub fn mae(a: &RealImage, b: &RealImage) -> Result<f64, CoreError> {
    check_same_shape((a.height(), a.width()), (b.height(), b.width()))?;
    let n = a.data().len() as f64;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(sum / n)
}

/// MSE over pixels where the mask is > 0.5. Empty mask gives 0.
pub fn mse_masked(a: &RealImage, b: &RealImage, mask: &RealImage) -> Result<f64, CoreError> {
    check_same_shape((a.height(), a.width()), (b.height(), b.width()))?;
    check_same_shape((a.height(), a.width()), (mask.height(), mask.width()))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.data().len() {
        if mask.data()[i] > 0.5 {
            let d = a.data()[i] - b.data()[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// MAE over pixels where the mask is > 0.5. Empty mask gives 0.
pub fn mae_masked(a: &RealImage, b: &RealImage, mask: &RealImage) -> Result<f64, CoreError> {
    check_same_shape((a.height(), a.width()), (b.height(), b.width()))?;
    check_same_shape((a.height(), a.width()), (mask.height(), mask.width()))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.data().len() {
        if mask.data()[i] > 0.5 {
            sum += (a.data()[i] - b.data()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}
