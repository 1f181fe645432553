//! Two-level synthetic test objects: random etched blobs, rasterized
//! letters, or a mix of both.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SimError;
use crate::field::{ComplexField, RealImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectStyle {
    RandomEtch,
    Letters,
    /// Etched blobs on the left half, letters on the right half.
    Mixed,
}

/// A complex transmission function with binary contrast: etched regions
/// carry amplitude `a_min` and phase `phi_max`, the substrate carries
/// amplitude 1 and phase 0.
#[derive(Debug, Clone)]
pub struct SyntheticObject {
    pub field: ComplexField,
    pub style: ObjectStyle,
    pub a_min: f64,
    pub phi_max: f64,
    /// 1.0 where etched, 0.0 elsewhere.
    pub etched: RealImage,
}

const MIN_DIM: usize = 32;

pub fn synth_object(
    height: usize,
    width: usize,
    style: ObjectStyle,
    seed: u64,
    a_min: f64,
    phi_max: f64,
) -> Result<SyntheticObject, SimError> {
    if height < MIN_DIM || width < MIN_DIM {
        return Err(SimError::ObjectTooSmall { h: height, w: width, min: MIN_DIM });
    }
    if !(a_min > 0.0 && a_min <= 1.0) {
        return Err(SimError::BadAmplitudeFloor(a_min));
    }
    if !(0.0..=std::f64::consts::PI).contains(&phi_max) {
        return Err(SimError::BadPhaseMax(phi_max));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let etched = match style {
        ObjectStyle::RandomEtch => etch_mask(height, width, &mut rng),
        ObjectStyle::Letters => letters_mask(height, width, &mut rng),
        ObjectStyle::Mixed => {
            let blobs = etch_mask(height, width, &mut rng);
            let glyphs = letters_mask(height, width, &mut rng);
            RealImage::from_fn(height, width, |y, x| {
                if x < width / 2 {
                    blobs.at(y, x)
                } else {
                    glyphs.at(y, x)
                }
            })
        }
    };
    let field = ComplexField::from_fn(height, width, |y, x| {
        if etched.at(y, x) > 0.5 {
            Complex64::from_polar(a_min, phi_max)
        } else {
            Complex64::new(1.0, 0.0)
        }
    });
    Ok(SyntheticObject { field, style, a_min, phi_max, etched })
}

/// Smoothed random blobs: uniform noise, separable Gaussian low-pass,
/// threshold at the 0.65 quantile (roughly 35% of the area etched).
fn etch_mask(height: usize, width: usize, rng: &mut ChaCha8Rng) -> RealImage {
    let noise: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
    let sigma = (height.min(width) as f64 / 24.0).clamp(3.0, 8.0);
    let blurred = gaussian_blur(&noise, height, width, sigma);
    let mut sorted = blurred.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[((sorted.len() - 1) as f64 * 0.65).round() as usize];
    RealImage::from_data(
        height,
        width,
        blurred.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
    )
}

fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();

    let mut horizontal = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, width as i64 - 1) as usize;
                acc += kv * data[y * width + sx];
            }
            horizontal[y * width + x] = acc / ksum;
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, height as i64 - 1) as usize;
                acc += kv * horizontal[sy * width + x];
            }
            out[y * width + x] = acc / ksum;
        }
    }
    out
}

/// 5×7 uppercase bitmap font; each glyph row is 5 bits, MSB leftmost.
const FONT_5X7: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
];

/// Grid of randomly chosen glyphs scaled to the object size. Cells are
/// filled with probability 0.75 so the texture is irregular.
fn letters_mask(height: usize, width: usize, rng: &mut ChaCha8Rng) -> RealImage {
    let scale = ((height.min(width)) / 50).clamp(2, 6);
    let cell_h = 10 * scale;
    let cell_w = 8 * scale;
    let mut mask = RealImage::zeros(height, width);
    let rows = height / cell_h;
    let cols = width / cell_w;
    let margin_y = (height - rows * cell_h) / 2;
    let margin_x = (width - cols * cell_w) / 2;
    for row in 0..rows {
        for col in 0..cols {
            let glyph = &FONT_5X7[rng.random_range(0..26)];
            let keep = rng.random::<f64>() < 0.75;
            if !keep {
                continue;
            }
            let top = margin_y + row * cell_h + scale;
            let left = margin_x + col * cell_w + scale;
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..5 {
                    if bits & (0x10 >> gx) == 0 {
                        continue;
                    }
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let y = top + gy * scale + sy;
                            let x = left + gx * scale + sx;
                            if y < height && x < width {
                                mask.set(y, x, 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
    mask
}
