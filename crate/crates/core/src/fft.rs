use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Row-major 2D FFT. Forward uses the e^{-ikx} kernel without scaling,
/// inverse applies 1/(width*height).
pub(crate) struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.width * self.height) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn run(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (w, h) = (self.width, self.height);
        debug_assert_eq!(data.len(), w * h);
        rows.process(data);
        let mut t = vec![Complex64::new(0.0, 0.0); w * h];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = data[y * w + x];
            }
        }
        cols.process(&mut t);
        for x in 0..w {
            for y in 0..h {
                data[y * w + x] = t[x * h + y];
            }
        }
    }
}

/// Signed FFT index for bin `j` of an `n`-point transform, in [-n/2, n/2).
pub(crate) fn signed_index(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}
