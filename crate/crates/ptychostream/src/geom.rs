//! Pixel-grid geometry shared by the simulator, the solver, and the stitcher.
//!
//! Scan positions are float grid-pixel coordinates. Every consumer rounds
//! them to integers the same way before extracting or placing a patch, so
//! the forward model, ePIE, and the edge stitcher stay aligned.

/// Rounds a scan position to integer pixels.
pub fn round_position(pos: (f64, f64)) -> (i64, i64) {
    (pos.0.round() as i64, pos.1.round() as i64)
}

/// Top-left corner of a `size`-pixel square patch centered on the rounded
/// position. The rounded center lands on pixel `origin + size/2`.
pub fn patch_origin(pos: (f64, f64), size: usize) -> (i64, i64) {
    let (py, px) = round_position(pos);
    let half = (size / 2) as i64;
    (py - half, px - half)
}

/// True when the patch at `pos` lies fully inside a `height`x`width` grid.
pub fn patch_in_bounds(pos: (f64, f64), size: usize, height: usize, width: usize) -> bool {
    let (oy, ox) = patch_origin(pos, size);
    oy >= 0 && ox >= 0 && oy + size as i64 <= height as i64 && ox + size as i64 <= width as i64
}
