//! Digital refocusing: ray-trace rebinning of coincidences and
//! Gerchberg–Saxton amplitude retrieval.

use crate::coincidence::{signal_slope, CoincidenceRecord};
use crate::error::{Error, Result};
use crate::field::{ComplexField, Propagator};
use crate::image::{GridSpec, Image};
use crate::optics::slope_from_k;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefocusOptions {
    pub binning: Binning,
    /// Gaussian smoothing of the counts before the square root (pixels).
    pub smoothing_px: f64,
    /// Use the negated idler momentum as the signal momentum. Only a sign
    /// regression check should turn this off.
    pub negate_idler: bool,
}

impl Default for RefocusOptions {
    fn default() -> Self {
        RefocusOptions {
            binning: Binning::Nearest,
            smoothing_px: 0.5,
            negate_idler: true,
        }
    }
}

/// Coincidence counts after the per-photon shift, and the derived amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedSumImage {
    pub counts: Image,
    pub amplitude: Image,
    pub grid: GridSpec,
    pub z_um: f64,
    pub off_grid: usize,
    pub total: usize,
}

const CHUNK: usize = 1 << 16;

/// Shifts each record by θ·z and bins it on `grid`.
pub fn ray_trace_refocus(
    records: &[CoincidenceRecord],
    z_um: f64,
    grid: &GridSpec,
    wavelength_um: f64,
    opts: &RefocusOptions,
) -> Result<ShiftedSumImage> {
    if records.is_empty() {
        return Err(Error::Empty("no coincidence records".into()));
    }
    if !z_um.is_finite() {
        return Err(Error::NonFinite("refocus depth".into()));
    }
    if !(wavelength_um > 0.0) {
        return Err(Error::InvalidParameter("wavelength must be > 0".into()));
    }
    if !(opts.smoothing_px >= 0.0) {
        return Err(Error::InvalidParameter("smoothing must be >= 0".into()));
    }
    grid.validate()?;
    let k = 2.0 * PI / wavelength_um;
    let (w, h) = (grid.width, grid.height);
    let (counts, off_grid) = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; w * h];
            let mut off = 0usize;
            for r in chunk {
                let s = if opts.negate_idler {
                    signal_slope(r, wavelength_um)
                } else {
                    slope_from_k(r.idler_k_per_um, k)
                };
                let (px, py) = grid.to_pixel(r.signal_um[0] + s[0] * z_um, r.signal_um[1] + s[1] * z_um);
                if !deposit(&mut acc, w, h, px, py, opts.binning) {
                    off += 1;
                }
            }
            (acc, off)
        })
        .reduce(
            || (vec![0.0; w * h], 0),
            |(mut a, oa), (b, ob)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                (a, oa + ob)
            },
        );
    if off_grid > 0 {
        log::warn!(
            "{off_grid} of {} shifted photons fell outside the {}x{} grid at z = {z_um} um",
            records.len(),
            w,
            h
        );
    }
    let counts = Image::from_data(w, h, grid.pitch_um, counts)?;
    let amplitude = counts.gaussian_blur(opts.smoothing_px).map(|v| v.max(0.0).sqrt());
    Ok(ShiftedSumImage {
        counts,
        amplitude,
        grid: *grid,
        z_um,
        off_grid,
        total: records.len(),
    })
}

fn deposit(acc: &mut [f64], w: usize, h: usize, px: f64, py: f64, binning: Binning) -> bool {
    match binning {
        Binning::Nearest => {
            let (x, y) = (px.round(), py.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return false;
            }
            acc[y as usize * w + x as usize] += 1.0;
            true
        }
        Binning::Bilinear => {
            if px < -0.5 || py < -0.5 || px >= w as f64 - 0.5 || py >= h as f64 - 0.5 {
                return false;
            }
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    // clamp weights at the border onto the nearest valid pixel
                    let xi = (x0 + dx).clamp(0.0, w as f64 - 1.0) as usize;
                    let yi = (y0 + dy).clamp(0.0, h as f64 - 1.0) as usize;
                    acc[yi * w + xi] += wx * wy;
                }
            }
            true
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Sample-plane field of the final iteration (before the phase constraint).
    pub field: ComplexField,
    /// Diffraction-plane residual per iteration, measured before amplitude replacement.
    pub error_trace: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalOptions {
    pub iterations: usize,
    /// Stop early once the residual drops below this value.
    pub threshold: Option<f64>,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            iterations: 10,
            threshold: None,
        }
    }
}

/// Gerchberg–Saxton retrieval of a target at depth `z_um` from its
/// diffraction-pattern amplitude.
pub fn gs_retrieve(
    measured: &ShiftedSumImage,
    known_phase: Option<&Image>,
    wavelength_um: f64,
    opts: &RetrievalOptions,
) -> Result<RetrievalResult> {
    let mask: Vec<bool> = measured.counts.data.iter().map(|&c| c > 0.0).collect();
    gs_loop(&measured.amplitude, &mask, known_phase, measured.z_um, wavelength_um, opts, |_| {})
}

/// Same loop on a bare amplitude image; every pixel with amplitude > 0 counts
/// toward the residual.
pub fn gs_retrieve_amplitude(
    amplitude: &Image,
    known_phase: Option<&Image>,
    z_um: f64,
    wavelength_um: f64,
    opts: &RetrievalOptions,
) -> Result<RetrievalResult> {
    let mask: Vec<bool> = amplitude.data.iter().map(|&a| a > 0.0).collect();
    gs_loop(amplitude, &mask, known_phase, z_um, wavelength_um, opts, |_| {})
}

fn gs_loop(
    amplitude: &Image,
    mask: &[bool],
    known_phase: Option<&Image>,
    z_um: f64,
    wavelength_um: f64,
    opts: &RetrievalOptions,
    mut after_replace: impl FnMut(&[Complex64]),
) -> Result<RetrievalResult> {
    if opts.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    if !z_um.is_finite() {
        return Err(Error::NonFinite("retrieval depth".into()));
    }
    if !amplitude.data.iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(Error::NonFinite("measured amplitude".into()));
    }
    if !amplitude.data.iter().any(|&v| v > 0.0) {
        return Err(Error::Empty("measured amplitude is all zero".into()));
    }
    if let Some(p) = known_phase {
        if !p.same_grid(amplitude) {
            return Err(Error::GridMismatch("known phase grid differs from the amplitude".into()));
        }
    }
    let (w, h, pitch) = (amplitude.width, amplitude.height, amplitude.pitch_um);
    let back = Propagator::new(w, h, pitch, wavelength_um, z_um)?;
    let fwd = Propagator::new(w, h, pitch, wavelength_um, -z_um)?;
    let a = &amplitude.data;
    let norm: f64 = a.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let known: Vec<Complex64> = match known_phase {
        Some(p) => p.data.iter().map(|&ph| Complex64::from_polar(1.0, ph)).collect(),
        None => vec![Complex64::new(1.0, 0.0); w * h],
    };
    // (1) flat initial phase
    let mut g: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut sample = Vec::new();
    let mut trace = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        // (2) to the sample plane
        let mut s = g.clone();
        back.apply_in_place(&mut s);
        // (3) impose the known phase, return to the measurement plane
        let mut p: Vec<Complex64> = s.iter().zip(&known).map(|(v, u)| u * v.norm()).collect();
        fwd.apply_in_place(&mut p);
        let err: f64 = p
            .iter()
            .zip(a)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((v, &m), _)| (v.norm() - m).powi(2))
            .sum();
        let residual = (err / norm).sqrt();
        if !residual.is_finite() {
            return Err(Error::NonFinite("retrieval residual".into()));
        }
        trace.push(residual);
        // (4) keep the phase, restore the measured amplitude
        for (gv, (pv, &m)) in g.iter_mut().zip(p.iter().zip(a)) {
            let n = pv.norm();
            *gv = if n > 0.0 { pv * (m / n) } else { Complex64::new(m, 0.0) };
        }
        after_replace(&g);
        sample = s;
        if opts.threshold.is_some_and(|t| residual < t) {
            break;
        }
    }
    let iterations = trace.len();
    Ok(RetrievalResult {
        field: ComplexField::new(w, h, pitch, wavelength_um, sample)?,
        error_trace: trace,
        iterations,
    })
}

/// Error-trace CSV: `iter,residual`.
pub fn error_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iter,residual\n");
    for (i, r) in trace.iter().enumerate() {
        s.push_str(&format!("{},{:.9e}\n", i + 1, r));
    }
    s
}
