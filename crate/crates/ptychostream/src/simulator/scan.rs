//! Fermat-spiral scan plans with golden-angle point placement.

use super::SimError;

/// Golden angle in radians, π(3 − √5).
pub const GOLDEN_ANGLE: f64 = 2.399963229728653;

/// Ordered scan positions in grid pixels plus spacing metadata.
///
/// `beam_size` is carried for overlap bookkeeping when known; plans built
/// directly by [`make_spiral_scan`] leave it unset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPlan {
    pub scan_id: u64,
    pub positions: Vec<(f64, f64)>,
    pub step_size: f64,
    pub beam_size: Option<f64>,
    pub n_points: usize,
}

impl ScanPlan {
    pub fn with_beam_size(mut self, beam_size: f64) -> Self {
        self.beam_size = Some(beam_size);
        self
    }

    /// Translates every position by (dy, dx); used to center a spiral on
    /// an object region.
    pub fn offset(&self, dy: f64, dx: f64) -> ScanPlan {
        ScanPlan {
            scan_id: self.scan_id,
            positions: self.positions.iter().map(|&(y, x)| (y + dy, x + dx)).collect(),
            step_size: self.step_size,
            beam_size: self.beam_size,
            n_points: self.n_points,
        }
    }

    /// Keeps every `stride`-th position (indices 0, stride, 2·stride, …).
    ///
    /// Thinning a Fermat spiral this way preserves its spatial extent and
    /// uniformity while raising the mean spacing by √stride, so the
    /// effective step size is updated accordingly.
    pub fn subsample(&self, stride: usize) -> Result<ScanPlan, SimError> {
        if stride == 0 {
            return Err(SimError::BadStride);
        }
        let positions: Vec<(f64, f64)> =
            self.positions.iter().copied().step_by(stride).collect();
        let n_points = positions.len();
        Ok(ScanPlan {
            scan_id: self.scan_id,
            positions,
            step_size: self.step_size * (stride as f64).sqrt(),
            beam_size: self.beam_size,
            n_points,
        })
    }

    /// Axis-aligned bounding box of the positions: (y_min, x_min, y_max, x_max).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(y, x) in &self.positions {
            b.0 = b.0.min(y);
            b.1 = b.1.min(x);
            b.2 = b.2.max(y);
            b.3 = b.3.max(x);
        }
        b
    }
}

/// Golden-angle Fermat spiral: point k at radius c·√k, angle k·γ, with c
/// calibrated so the mean nearest-neighbor spacing equals `step_size`.
/// The first point sits at the origin; callers offset the plan onto their
/// object region.
pub fn make_spiral_scan(n_points: usize, step_size: f64, scan_id: u64) -> Result<ScanPlan, SimError> {
    if n_points < 1 {
        return Err(SimError::NoPoints(n_points));
    }
    if step_size <= 0.0 {
        return Err(SimError::BadStep(step_size));
    }
    let mut positions: Vec<(f64, f64)> = (0..n_points)
        .map(|k| {
            let r = (k as f64).sqrt();
            let theta = k as f64 * GOLDEN_ANGLE;
            (r * theta.sin(), r * theta.cos())
        })
        .collect();
    // positions scale linearly with c, so one calibration pass is exact
    if n_points > 1 {
        let mean_nn = mean_nearest_neighbor(&positions);
        let c = step_size / mean_nn;
        for p in &mut positions {
            p.0 *= c;
            p.1 *= c;
        }
    }
    Ok(ScanPlan { scan_id, positions, step_size, beam_size: None, n_points })
}

/// Brute-force mean nearest-neighbor distance; O(n²) but only used on
/// plan-sized inputs.
pub fn mean_nearest_neighbor(positions: &[(f64, f64)]) -> f64 {
    assert!(positions.len() >= 2);
    let mut total = 0.0;
    for (i, &(yi, xi)) in positions.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &(yj, xj)) in positions.iter().enumerate() {
            if i == j {
                continue;
            }
            let d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total / positions.len() as f64
}
