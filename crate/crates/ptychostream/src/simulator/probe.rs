//! Donut-shaped illumination probes built from a difference of Gaussians.

use num_complex::Complex64;

use super::SimError;
use crate::field::ComplexField;

/// Probe geometry. The amplitude is a difference of two centered
/// Gaussians (outer FWHM = `beam_fwhm`, inner FWHM = `inner_fraction` ×
/// `beam_fwhm`), clipped at zero and normalized to unit peak; the phase is
/// a quadratic radial term reaching `phase_curvature` radians at the
/// window edge. `inner_fraction == 0` degenerates to a single Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    pub window: usize,
    pub beam_fwhm: f64,
    pub inner_fraction: f64,
    pub phase_curvature: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            window: 64,
            beam_fwhm: 20.0,
            inner_fraction: 0.5,
            phase_curvature: std::f64::consts::PI,
        }
    }
}

const FWHM_TO_SIGMA: f64 = 2.354820045030949; // 2·√(2 ln 2)

pub fn make_probe(spec: ProbeSpec) -> Result<ComplexField, SimError> {
    if !(spec.beam_fwhm > 0.0 && spec.beam_fwhm < spec.window as f64) {
        return Err(SimError::BadBeam { fwhm: spec.beam_fwhm, window: spec.window });
    }
    if !(0.0..1.0).contains(&spec.inner_fraction) {
        return Err(SimError::BadInnerFraction(spec.inner_fraction));
    }
    let n = spec.window;
    let center = (n as f64 - 1.0) / 2.0;
    let r_edge = n as f64 / 2.0;
    let sigma_outer = spec.beam_fwhm / FWHM_TO_SIGMA;
    let sigma_inner = spec.inner_fraction * sigma_outer;

    let mut amplitude = vec![0.0f64; n * n];
    let mut peak = 0.0f64;
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let r2 = dy * dy + dx * dx;
            let outer = (-r2 / (2.0 * sigma_outer * sigma_outer)).exp();
            let inner = if sigma_inner > 0.0 {
                (-r2 / (2.0 * sigma_inner * sigma_inner)).exp()
            } else {
                0.0
            };
            let a = (outer - inner).max(0.0);
            amplitude[y * n + x] = a;
            if a > peak {
                peak = a;
            }
        }
    }
    // peak > 0 is guaranteed: the outer Gaussian dominates away from center
    let data = (0..n * n)
        .map(|i| {
            let y = i / n;
            let x = i % n;
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let r2 = dy * dy + dx * dx;
            let phase = spec.phase_curvature * r2 / (r_edge * r_edge);
            Complex64::from_polar(amplitude[i] / peak, phase)
        })
        .collect();
    Ok(ComplexField::from_data(n, n, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn amp_at_radius(probe: &ComplexField, radius: f64) -> f64 {
        // sample along +x from the window center
        let n = probe.width();
        let center = (n as f64 - 1.0) / 2.0;
        let x = (center + radius).round() as usize;
        probe.at(n / 2, x).norm()
    }

    #[test]
    fn unit_peak_after_normalization() {
        for inner in [0.0, 0.3, 0.5, 0.8] {
            let probe = make_probe(ProbeSpec { inner_fraction: inner, ..Default::default() })
                .unwrap();
            let max = probe.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert_eq!(max, 1.0, "inner_fraction {inner}");
        }
    }

    #[test]
    fn degenerate_donut_is_centered_gaussian() {
        let probe = make_probe(ProbeSpec {
            window: 64,
            beam_fwhm: 20.0,
            inner_fraction: 0.0,
            phase_curvature: 0.0,
        })
        .unwrap();
        let center_amp = probe.at(32, 32).norm();
        for &r in &[5.0, 10.0, 20.0] {
            assert!(center_amp > amp_at_radius(&probe, r));
        }
        // FWHM check: amplitude at r = fwhm/2 is half the peak
        let half = amp_at_radius(&probe, 10.0);
        let peak = probe.at(31, 31).norm().max(center_amp);
        assert!((half / peak - 0.5).abs() < 0.05);
    }

    #[test]
    fn donut_has_annular_maximum() {
        let probe = make_probe(ProbeSpec {
            window: 64,
            beam_fwhm: 20.0,
            inner_fraction: 0.5,
            phase_curvature: 0.0,
        })
        .unwrap();
        let center_amp = probe.at(32, 32).norm();
        let ring_amp = amp_at_radius(&probe, 10.0);
        assert!(
            center_amp < ring_amp,
            "center {center_amp} should be below ring {ring_amp}"
        );
        // the global maximum sits away from the center
        let n = probe.width();
        let c = (n as f64 - 1.0) / 2.0;
        let (mut best_r, mut best_a) = (0.0, -1.0);
        for y in 0..n {
            for x in 0..n {
                let a = probe.at(y, x).norm();
                if a > best_a {
                    best_a = a;
                    best_r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                }
            }
        }
        assert!(best_r > 2.0, "maximum at radius {best_r}");
    }

    #[test]
    fn quadratic_phase_reaches_curvature_at_edge() {
        let curvature = 1.5;
        let spec = ProbeSpec {
            window: 64,
            beam_fwhm: 20.0,
            inner_fraction: 0.5,
            phase_curvature: curvature,
        };
        let probe = make_probe(spec).unwrap();
        let c = 31.5;
        let r_edge = 32.0;
        for &(y, x) in &[(32usize, 40usize), (10, 31), (50, 50)] {
            let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let expect = curvature * r2 / (r_edge * r_edge);
            // compare on the unit circle to ignore 2π wrapping
            let got = probe.at(y, x).arg();
            let diff = (Complex64::from_polar(1.0, got - expect)).arg().abs();
            assert!(diff < 1e-9, "phase at ({y},{x})");
        }
        // near-center phase is near zero
        assert!(probe.at(32, 32).arg().abs() < 0.01);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(make_probe(ProbeSpec { beam_fwhm: 0.0, ..Default::default() }).is_err());
        assert!(make_probe(ProbeSpec { beam_fwhm: 64.0, window: 64, ..Default::default() })
            .is_err());
        assert!(make_probe(ProbeSpec { inner_fraction: 1.0, ..Default::default() }).is_err());
        assert!(make_probe(ProbeSpec { inner_fraction: -0.1, ..Default::default() }).is_err());
    }
}
