//! Centered 2-D FFTs over [`ComplexField`] buffers.
//!
//! The forward transform is the unnormalized DFT followed by an fftshift,
//! so the zero-frequency sample sits at the detector center; the inverse
//! undoes the shift and applies the 1/(h*w) normalization. Plans are cached
//! per engine, which matters in the ePIE inner loop.

use crate::field::ComplexField;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached forward/inverse plans for one field shape.
pub struct Fft2 {
    height: usize,
    width: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
    col_buf: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            fwd_row: planner.plan_fft_forward(width),
            fwd_col: planner.plan_fft_forward(height),
            inv_row: planner.plan_fft_inverse(width),
            inv_col: planner.plan_fft_inverse(height),
            col_buf: vec![Complex64::default(); height],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn transform_in_place(&mut self, data: &mut [Complex64], inverse: bool) {
        let (row_plan, col_plan) = if inverse {
            (self.inv_row.clone(), self.inv_col.clone())
        } else {
            (self.fwd_row.clone(), self.fwd_col.clone())
        };
        for row in data.chunks_exact_mut(self.width) {
            row_plan.process(row);
        }
        for x in 0..self.width {
            for y in 0..self.height {
                self.col_buf[y] = data[y * self.width + x];
            }
            col_plan.process(&mut self.col_buf);
            for y in 0..self.height {
                data[y * self.width + x] = self.col_buf[y];
            }
        }
    }

    /// Unnormalized forward DFT with the zero frequency shifted to the center.
    pub fn forward_centered(&mut self, field: &ComplexField) -> ComplexField {
        assert_eq!((field.height(), field.width()), (self.height, self.width));
        let mut data = field.data().to_vec();
        self.transform_in_place(&mut data, false);
        let mut out = ComplexField::from_data(self.height, self.width, data);
        fftshift(&mut out);
        out
    }

    /// Inverse of [`Fft2::forward_centered`], including 1/(h*w) scaling.
    pub fn inverse_centered(&mut self, field: &ComplexField) -> ComplexField {
        assert_eq!((field.height(), field.width()), (self.height, self.width));
        let mut shifted = field.clone();
        ifftshift(&mut shifted);
        let mut data = shifted.into_data();
        self.transform_in_place(&mut data, true);
        let norm = 1.0 / (self.height * self.width) as f64;
        for v in &mut data {
            *v *= norm;
        }
        ComplexField::from_data(self.height, self.width, data)
    }

    /// Forward transform into a caller-provided buffer, reusing `scratch`
    /// layout. Used by the ePIE inner loop to avoid reallocation.
    pub fn forward_centered_into(&mut self, src: &[Complex64], dst: &mut [Complex64]) {
        dst.copy_from_slice(src);
        self.transform_in_place(dst, false);
        shift_slice(dst, self.height, self.width, false);
    }

    /// Inverse counterpart of [`Fft2::forward_centered_into`].
    pub fn inverse_centered_into(&mut self, src: &[Complex64], dst: &mut [Complex64]) {
        dst.copy_from_slice(src);
        shift_slice(dst, self.height, self.width, true);
        self.transform_in_place(dst, true);
        let norm = 1.0 / (self.height * self.width) as f64;
        for v in dst.iter_mut() {
            *v *= norm;
        }
    }
}

fn roll_amounts(height: usize, width: usize, inverse: bool) -> (usize, usize) {
    if inverse {
        // undo a forward shift, exact for odd sizes too
        (height - height / 2, width - width / 2)
    } else {
        (height / 2, width / 2)
    }
}

fn shift_slice(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let (ry, rx) = roll_amounts(height, width, inverse);
    let mut out = vec![Complex64::default(); data.len()];
    for y in 0..height {
        let ny = (y + ry) % height;
        for x in 0..width {
            let nx = (x + rx) % width;
            out[ny * width + nx] = data[y * width + x];
        }
    }
    data.copy_from_slice(&out);
}

/// Moves the zero-frequency sample to the center of the field.
pub fn fftshift(field: &mut ComplexField) {
    let (h, w) = (field.height(), field.width());
    shift_slice(field.data_mut(), h, w, false);
}

/// Inverse of [`fftshift`].
pub fn ifftshift(field: &mut ComplexField) {
    let (h, w) = (field.height(), field.width());
    shift_slice(field.data_mut(), h, w, true);
}
