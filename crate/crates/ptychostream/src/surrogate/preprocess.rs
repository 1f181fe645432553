//! Frame conditioning for the network and the low-dose study's
//! attenuation/up-scaling pair.
//!
//! Counts are taken linearly (no sqrt or log), multiplied by the dose
//! scale factor, normalized by the frame's 99.9th-percentile count
//! (floored at 1.0 so empty frames stay zero), and clipped to [0, 1].

use super::tensor::Tensor4;
use super::SurrogateError;
use crate::epie::LabeledPair;
use crate::simulator::{DiffractionFrame, NoiseMode};
use rand::Rng;
use rand_distr::{Distribution as _, Poisson};

/// Nearest-rank 99.9th percentile of the scaled counts.
fn percentile_999(values: &mut [f32]) -> f32 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("counts are finite"));
    let rank = ((values.len() as f64 * 0.999).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Scales, normalizes, and clips one frame into a (1, 1, N, N) tensor.
pub fn preprocess(frame: &DiffractionFrame, scale_factor: f64) -> Result<Tensor4, SurrogateError> {
    if !(scale_factor > 0.0 && scale_factor.is_finite()) {
        return Err(SurrogateError::BadFactor(scale_factor));
    }
    let n = frame.n();
    let scaled: Vec<f32> =
        frame.counts().iter().map(|&c| (c as f64 * scale_factor) as f32).collect();
    let denom = percentile_999(&mut scaled.clone()).max(1.0);
    let data = scaled.iter().map(|&v| (v / denom).clamp(0.0, 1.0)).collect();
    Tensor4::from_data((1, 1, n, n), data)
}

/// Stacks many frames into one (B, 1, N, N) batch; frames must share N.
pub fn preprocess_batch(
    frames: &[&DiffractionFrame],
    scale_factor: f64,
) -> Result<Tensor4, SurrogateError> {
    let parts = frames
        .iter()
        .map(|f| preprocess(f, scale_factor))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Tensor4> = parts.iter().collect();
    Tensor4::concat_batch(&refs)
}

/// Replaces a pair's counts with a `factor`-times-dimmer exposure,
/// Poisson-resampled unless noise is disabled; labels stay untouched.
pub fn attenuate_training_pair(
    pair: &LabeledPair,
    factor: f64,
    noise: NoiseMode,
    rng: &mut impl Rng,
) -> Result<LabeledPair, SurrogateError> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(SurrogateError::BadFactor(factor));
    }
    let counts: Vec<u16> = pair
        .frame
        .counts()
        .iter()
        .map(|&c| {
            let mean = c as f64 / factor;
            let drawn = match noise {
                NoiseMode::Noiseless => mean.round(),
                NoiseMode::Poisson => {
                    if mean > 0.0 {
                        Poisson::new(mean).expect("positive mean").sample(rng)
                    } else {
                        0.0
                    }
                }
            };
            drawn.min(u16::MAX as f64) as u16
        })
        .collect();
    let frame = DiffractionFrame::new(
        pair.frame.scan_id,
        pair.frame.frame_index,
        pair.frame.position,
        pair.frame.exposure_ms,
        pair.frame.n(),
        counts,
    );
    Ok(LabeledPair { frame, amplitude: pair.amplitude.clone(), phase: pair.phase.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RealImage;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;

    fn frame_of(counts: Vec<u16>, n: usize) -> DiffractionFrame {
        DiffractionFrame::new(1, 0, (0.0, 0.0), 1.0, n, counts)
    }

    #[test]
    fn unit_scale_normalizes_to_unit_range() {
        let mut counts = vec![0u16; 64 * 64];
        counts[10] = 1000;
        counts[20] = 400;
        let t = preprocess(&frame_of(counts, 64), 1.0).unwrap();
        assert_eq!(t.shape(), (1, 1, 64, 64));
        let max = t.data().iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn percentile_clips_hot_pixels() {
        // one hot pixel above the 99.9th percentile saturates to 1.0
        let mut counts = vec![100u16; 64 * 64];
        counts[0] = 60000;
        let t = preprocess(&frame_of(counts, 64), 1.0).unwrap();
        assert_eq!(t.data()[0], 1.0);
        // the bulk normalizes against the percentile, not the hot pixel
        assert!(t.data()[1] > 0.9);
    }

    #[test]
    fn all_zero_frame_stays_zero() {
        let t = preprocess(&frame_of(vec![0; 16 * 16], 16), 1.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(preprocess(&frame_of(vec![0; 4], 2), 0.0).is_err());
        assert!(preprocess(&frame_of(vec![0; 4], 2), -2.0).is_err());
    }

    #[test]
    fn upscale_matches_unattenuated_distribution() {
        // factor-10 dimming then factor-10 upscale preprocesses close to
        // the bright original
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // bright source: factor-10 counts stay in the thousands, so the
        // relative Poisson noise after upscaling is a couple of percent
        let counts: Vec<u16> =
            (0..32 * 32).map(|i| (((i * 37) % 100) as u16) * 400 + 20000).collect();
        let pair = LabeledPair {
            frame: frame_of(counts, 32),
            amplitude: RealImage::zeros(16, 16),
            phase: RealImage::zeros(16, 16),
        };
        let bright = preprocess(&pair.frame, 1.0).unwrap();
        let dim = attenuate_training_pair(&pair, 10.0, NoiseMode::Poisson, &mut rng).unwrap();
        let restored = preprocess(&dim.frame, 10.0).unwrap();
        let mean_diff: f64 = bright
            .data()
            .iter()
            .zip(restored.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / bright.numel() as f64;
        assert!(mean_diff < 0.03, "mean diff {mean_diff}");
    }

    #[test]
    fn attenuation_is_identity_at_factor_one_without_noise() {
        let pair = LabeledPair {
            frame: frame_of((0..16).map(|i| i * 11).collect(), 4),
            amplitude: RealImage::zeros(2, 2),
            phase: RealImage::zeros(2, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = attenuate_training_pair(&pair, 1.0, NoiseMode::Noiseless, &mut rng).unwrap();
        assert_eq!(out.frame.counts(), pair.frame.counts());
        assert!(attenuate_training_pair(&pair, 0.5, NoiseMode::Noiseless, &mut rng).is_err());
    }

    #[test]
    fn attenuation_mean_tracks_the_factor() {
        let pair = LabeledPair {
            frame: frame_of(vec![40000; 64], 8),
            amplitude: RealImage::zeros(4, 4),
            phase: RealImage::zeros(4, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0u64;
        let draws = 50;
        for _ in 0..draws {
            let out =
                attenuate_training_pair(&pair, 1000.0, NoiseMode::Poisson, &mut rng).unwrap();
            total += out.frame.total_counts();
        }
        let mean = total as f64 / (draws * 64) as f64;
        assert!((mean - 40.0).abs() < 1.0, "mean {mean}");
        // deep attenuation reaches the paper's handful-of-photons regime
        let deep =
            attenuate_training_pair(&pair, 10000.0, NoiseMode::Poisson, &mut rng).unwrap();
        assert!(deep.frame.max_count() <= 15);
        assert!(deep.frame.max_count() >= 1);
    }
}
