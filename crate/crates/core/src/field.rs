//! Complex scalar fields and angular-spectrum propagation.

use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft2};
use crate::image::Image;
use num_complex::Complex64;
use std::f64::consts::PI;

/// A sampled complex amplitude on a regular grid with a physical pitch.
///
/// Values are row-major with index `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    width: usize,
    height: usize,
    pitch_um: f64,
    wavelength_um: f64,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(
        width: usize,
        height: usize,
        pitch_um: f64,
        wavelength_um: f64,
        values: Vec<Complex64>,
    ) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidParameter(format!(
                "field must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(Error::InvalidParameter(format!("pitch must be > 0, got {pitch_um}")));
        }
        if !(wavelength_um > 0.0 && wavelength_um.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "wavelength must be > 0, got {wavelength_um}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::GridMismatch(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(ComplexField {
            width,
            height,
            pitch_um,
            wavelength_um,
            values,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        pitch_um: f64,
        wavelength_um: f64,
        value: Complex64,
    ) -> Result<Self> {
        Self::new(width, height, pitch_um, wavelength_um, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        pitch_um: f64,
        wavelength_um: f64,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, pitch_um, wavelength_um, values)
    }

    /// Real image embedded as a zero-phase field.
    pub fn from_image(image: &Image, wavelength_um: f64) -> Result<Self> {
        Self::new(
            image.width,
            image.height,
            image.pitch_um,
            wavelength_um,
            image.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    /// Field with the given amplitude and phase images (same grid).
    pub fn from_polar(amplitude: &Image, phase: &Image, wavelength_um: f64) -> Result<Self> {
        if !amplitude.same_grid(phase) {
            return Err(Error::GridMismatch("amplitude and phase grids differ".into()));
        }
        Self::new(
            amplitude.width,
            amplitude.height,
            amplitude.pitch_um,
            wavelength_um,
            amplitude
                .data
                .iter()
                .zip(&phase.data)
                .map(|(&a, &p)| Complex64::from_polar(a, p))
                .collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pitch_um(&self) -> f64 {
        self.pitch_um
    }
    pub fn wavelength_um(&self) -> f64 {
        self.wavelength_um
    }
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }
    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.values[y * self.width + x]
    }

    /// Copy of this field's metadata carrying new values.
    pub fn with_values(&self, values: Vec<Complex64>) -> Result<Self> {
        Self::new(self.width, self.height, self.pitch_um, self.wavelength_um, values)
    }

    pub fn same_grid(&self, other: &ComplexField) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pitch_um == other.pitch_um
            && self.wavelength_um == other.wavelength_um
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Total power Σ|u|²·pitch².
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.pitch_um * self.pitch_um
    }

    pub fn intensity(&self) -> Image {
        self.map_image(|v| v.norm_sqr())
    }

    pub fn amplitude(&self) -> Image {
        self.map_image(|v| v.norm())
    }

    pub fn phase(&self) -> Image {
        self.map_image(|v| v.arg())
    }

    fn map_image(&self, f: impl Fn(Complex64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pitch_um: self.pitch_um,
            data: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength_um
    }

    /// Distance beyond which the sampled quadratic phase starts to wrap.
    pub fn aliasing_limit_um(&self) -> f64 {
        self.width.min(self.height) as f64 * self.pitch_um * self.pitch_um / self.wavelength_um
    }
}

/// Longitudinal wavenumber of one spectral sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kz {
    Propagating(f64),
    /// Decay constant κ = sqrt(k⊥² − k²).
    Evanescent(f64),
}

/// Transverse wavenumbers of the DFT grid, `k_x[j] = 2π j' / (N pitch)`.
#[derive(Clone, Debug)]
pub struct SpatialFrequencyGrid {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    pub k: f64,
}

impl SpatialFrequencyGrid {
    pub fn new(width: usize, height: usize, pitch_um: f64, wavelength_um: f64) -> Self {
        let axis = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|j| 2.0 * PI * signed_index(j, n) as f64 / (n as f64 * pitch_um))
                .collect()
        };
        SpatialFrequencyGrid {
            kx: axis(width),
            ky: axis(height),
            k: 2.0 * PI / wavelength_um,
        }
    }

    pub fn for_field(field: &ComplexField) -> Self {
        Self::new(field.width, field.height, field.pitch_um, field.wavelength_um)
    }

    pub fn kz(&self, ix: usize, iy: usize) -> Kz {
        let kt2 = self.kx[ix] * self.kx[ix] + self.ky[iy] * self.ky[iy];
        let k2 = self.k * self.k;
        if kt2 <= k2 {
            Kz::Propagating((k2 - kt2).sqrt())
        } else {
            Kz::Evanescent((kt2 - k2).sqrt())
        }
    }

    pub fn is_evanescent(&self, ix: usize, iy: usize) -> bool {
        matches!(self.kz(ix, iy), Kz::Evanescent(_))
    }

    /// e^{i k_z d} on propagating samples, e^{-κ|d|} on evanescent ones.
    /// With `reduced`, the carrier e^{ikd} is removed from propagating samples.
    pub fn transfer(&self, d: f64, reduced: bool) -> Vec<Complex64> {
        let (w, h) = (self.kx.len(), self.ky.len());
        let mut out = Vec::with_capacity(w * h);
        for iy in 0..h {
            for ix in 0..w {
                out.push(match self.kz(ix, iy) {
                    Kz::Propagating(kz) => {
                        let phase = if reduced { (kz - self.k) * d } else { kz * d };
                        Complex64::from_polar(1.0, phase)
                    }
                    Kz::Evanescent(kappa) => Complex64::new((-kappa * d.abs()).exp(), 0.0),
                });
            }
        }
        out
    }
}

/// Precomputed angular-spectrum propagator for one grid and distance.
pub struct Propagator {
    width: usize,
    height: usize,
    pitch_um: f64,
    wavelength_um: f64,
    distance_um: f64,
    fft: Fft2,
    transfer: Vec<Complex64>,
}

impl Propagator {
    pub fn new(
        width: usize,
        height: usize,
        pitch_um: f64,
        wavelength_um: f64,
        distance_um: f64,
    ) -> Result<Self> {
        if !distance_um.is_finite() {
            return Err(Error::NonFinite("propagation distance".into()));
        }
        let limit = width.min(height) as f64 * pitch_um * pitch_um / wavelength_um;
        if distance_um.abs() > limit {
            log::warn!(
                "propagation distance {distance_um} um exceeds the aliasing limit {limit:.1} um for a {width}x{height} grid at {pitch_um} um pitch; zero-pad the field"
            );
        }
        let grid = SpatialFrequencyGrid::new(width, height, pitch_um, wavelength_um);
        Ok(Propagator {
            width,
            height,
            pitch_um,
            wavelength_um,
            distance_um,
            fft: Fft2::new(width, height),
            transfer: grid.transfer(distance_um, false),
        })
    }

    pub fn for_field(field: &ComplexField, distance_um: f64) -> Result<Self> {
        Self::new(
            field.width,
            field.height,
            field.pitch_um,
            field.wavelength_um,
            distance_um,
        )
    }

    pub fn distance_um(&self) -> f64 {
        self.distance_um
    }

    pub fn apply(&self, field: &ComplexField) -> Result<ComplexField> {
        if field.width != self.width
            || field.height != self.height
            || field.pitch_um != self.pitch_um
            || field.wavelength_um != self.wavelength_um
        {
            return Err(Error::GridMismatch(format!(
                "propagator built for {}x{} @ {} um / {} um, field is {}x{} @ {} um / {} um",
                self.width,
                self.height,
                self.pitch_um,
                self.wavelength_um,
                field.width,
                field.height,
                field.pitch_um,
                field.wavelength_um
            )));
        }
        if !field.is_finite() {
            return Err(Error::NonFinite("field values".into()));
        }
        let mut data = field.values.clone();
        self.apply_in_place(&mut data);
        field.with_values(data)
    }

    /// Propagates raw row-major samples in place (length must match the grid).
    pub fn apply_in_place(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.width * self.height);
        self.fft.forward(data);
        for (v, h) in data.iter_mut().zip(&self.transfer) {
            *v *= h;
        }
        self.fft.inverse(data);
    }
}

/// Angular-spectrum propagation by `z_um` (negative reverses direction).
pub fn propagate(field: &ComplexField, z_um: f64) -> Result<ComplexField> {
    if z_um == 0.0 {
        if !field.is_finite() {
            return Err(Error::NonFinite("field values".into()));
        }
        return Ok(field.clone());
    }
    Propagator::for_field(field, z_um)?.apply(field)
}

/// Equivalent to `propagate(field, -z_um)`.
pub fn inverse_propagate(field: &ComplexField, z_um: f64) -> Result<ComplexField> {
    propagate(field, -z_um)
}
