//! Small 2-D FFT helpers over row-major complex buffers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Fft2 {
    rows: usize,
    cols: usize,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn forward(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fft: planner.plan_fft_forward(cols),
            col_fft: planner.plan_fft_forward(rows),
        }
    }

    pub fn inverse(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fft: planner.plan_fft_inverse(cols),
            col_fft: planner.plan_fft_inverse(rows),
        }
    }

    /// Unnormalized in-place transform.
    pub fn process(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.rows * self.cols);
        self.row_fft.process(data);
        let mut col = vec![Complex64::default(); self.rows];
        let mut scratch = vec![Complex64::default(); self.col_fft.get_inplace_scratch_len()];
        for c in 0..self.cols {
            for r in 0..self.rows {
                col[r] = data[r * self.cols + c];
            }
            self.col_fft.process_with_scratch(&mut col, &mut scratch);
            for r in 0..self.rows {
                data[r * self.cols + c] = col[r];
            }
        }
    }
}

/// Swaps quadrants so the zero-frequency sample lands at `(n/2, n/2)`.
pub(crate) fn fftshift<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        let sr = (r + rows - rows / 2) % rows;
        for c in 0..cols {
            let sc = (c + cols - cols / 2) % cols;
            out.push(data[sr * cols + sc]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_then_inverse_is_identity() {
        let (r, c) = (6, 10);
        let orig: Vec<Complex64> = (0..r * c)
            .map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut d = orig.clone();
        Fft2::forward(r, c).process(&mut d);
        Fft2::inverse(r, c).process(&mut d);
        for (a, b) in orig.iter().zip(&d) {
            assert!((a - b / (r * c) as f64).norm() < 1e-12);
        }
    }

    #[test]
    fn shift_centres_dc() {
        let v: Vec<usize> = (0..16).collect();
        let s = fftshift(&v, 4, 4);
        assert_eq!(s[2 * 4 + 2], 0);
    }
}
