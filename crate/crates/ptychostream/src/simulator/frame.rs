//! One detector exposure: integer photon counts plus scan metadata.

/// A single far-field diffraction measurement. `counts` is an `n`×`n`
/// row-major grid of photon counts; `max_count` caches its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionFrame {
    pub scan_id: u64,
    pub frame_index: u32,
    /// (y, x) in grid pixels; may carry a sub-pixel part.
    pub position: (f64, f64),
    pub exposure_ms: f32,
    n: usize,
    counts: Vec<u16>,
    max_count: u16,
}

impl DiffractionFrame {
    /// Panics unless counts length == n².
    pub fn new(
        scan_id: u64,
        frame_index: u32,
        position: (f64, f64),
        exposure_ms: f32,
        n: usize,
        counts: Vec<u16>,
    ) -> Self {
        assert_eq!(counts.len(), n * n, "counts must be n*n");
        let max_count = counts.iter().copied().max().unwrap_or(0);
        DiffractionFrame { scan_id, frame_index, position, exposure_ms, n, counts, max_count }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &[u16] {
        &self.counts
    }

    pub fn max_count(&self) -> u16 {
        self.max_count
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}
