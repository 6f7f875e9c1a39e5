//! Real-valued images and sample-plane grid geometry.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major real image with a physical pitch.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pitch_um: f64,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, pitch_um: f64) -> Self {
        Image {
            width,
            height,
            pitch_um,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, pitch_um: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::GridMismatch(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pitch_um,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_grid(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.pitch_um == other.pitch_um
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn sqrt(&self) -> Image {
        self.map(|v| v.max(0.0).sqrt())
    }

    /// Rescaled to [0, 1]; a constant image maps to zeros.
    pub fn normalized(&self) -> Image {
        let (lo, hi) = (self.min(), self.max());
        if hi > lo {
            self.map(|v| (v - lo) / (hi - lo))
        } else {
            self.map(|_| 0.0)
        }
    }

    /// Separable Gaussian blur with edge clamping; sigma <= 0 returns a copy.
    pub fn gaussian_blur(&self, sigma_px: f64) -> Image {
        if sigma_px <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma_px).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma_px * sigma_px)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = (x + j as i64 - radius).clamp(0, w - 1);
                    acc += k * self.data[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = (y + j as i64 - radius).clamp(0, h - 1);
                    acc += k * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Image {
            data: out,
            ..self.clone()
        }
    }
}

/// Placement of a regular grid in sample-plane coordinates (µm).
///
/// Pixel `i` has its center at `center + (i - (n-1)/2) * pitch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub pitch_um: f64,
    #[serde(default)]
    pub center_um: [f64; 2],
}

impl GridSpec {
    pub fn new(width: usize, height: usize, pitch_um: f64) -> Self {
        GridSpec {
            width,
            height,
            pitch_um,
            center_um: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidParameter("grid must be at least 2x2".into()));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(Error::InvalidParameter("grid pitch must be > 0".into()));
        }
        Ok(())
    }

    pub fn x_um(&self, ix: f64) -> f64 {
        self.center_um[0] + (ix - (self.width as f64 - 1.0) / 2.0) * self.pitch_um
    }

    pub fn y_um(&self, iy: f64) -> f64 {
        self.center_um[1] + (iy - (self.height as f64 - 1.0) / 2.0) * self.pitch_um
    }

    /// Continuous pixel coordinates of a sample-plane point.
    pub fn to_pixel(&self, x_um: f64, y_um: f64) -> (f64, f64) {
        (
            (x_um - self.center_um[0]) / self.pitch_um + (self.width as f64 - 1.0) / 2.0,
            (y_um - self.center_um[1]) / self.pitch_um + (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(&self) -> Image {
        Image::zeros(self.width, self.height, self.pitch_um)
    }
}

/// Normalized cross-correlation of two equally sized images (zero-mean Pearson).
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Median of a slice (average of the two middle values for even length).
/// Normalized RMS error of `estimate` against `truth` after the least-squares
/// scale fit: min over α of ‖α·estimate − truth‖ / ‖truth‖.
pub fn nrms_fit(estimate: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len());
    let ee: f64 = estimate.iter().map(|v| v * v).sum();
    let et: f64 = estimate.iter().zip(truth).map(|(a, b)| a * b).sum();
    let tt: f64 = truth.iter().map(|v| v * v).sum();
    let alpha = if ee > 0.0 { et / ee } else { 0.0 };
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    (err / tt).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
