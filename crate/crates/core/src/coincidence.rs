//! Coincidence pairing, momentum-correlation histograms and ghost images.

use crate::detector::DetectionEvent;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optics::{k_from_slope, solve_angles, slope_from_k, RayTransferMatrix};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Which events belong to the idler arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IdlerRegion {
    /// Two-camera mode: every event from this camera is an idler.
    Camera { cam: u8 },
    /// Single-camera mode: a half-open pixel rectangle on one camera.
    Pixels { cam: u8, x0: u32, y0: u32, x1: u32, y1: u32 },
}

impl IdlerRegion {
    pub fn contains(&self, e: &DetectionEvent) -> bool {
        match *self {
            IdlerRegion::Camera { cam } => e.cam == cam,
            IdlerRegion::Pixels { cam, x0, y0, x1, y1 } => {
                let (x, y) = (e.x_px.round(), e.y_px.round());
                e.cam == cam && x >= x0 as f64 && x < x1 as f64 && y >= y0 as f64 && y < y1 as f64
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let IdlerRegion::Pixels { x0, y0, x1, y1, .. } = *self {
            if x1 <= x0 || y1 <= y0 {
                return Err(Error::InvalidParameter("idler region is empty".into()));
            }
        }
        Ok(())
    }
}

/// Indices into the signal and idler streams plus dt = t_idler + shift − t_signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairIndex {
    pub signal: usize,
    pub idler: usize,
    pub dt_ns: f64,
}

fn check_sorted(t: &[f64]) -> Result<()> {
    match t.windows(2).position(|w| !(w[1] >= w[0])) {
        Some(i) => Err(Error::Unsorted(i + 1)),
        None => Ok(()),
    }
}

/// Unique greedy nearest-in-time matching of two sorted time streams.
///
/// Candidates satisfy |dt| ≤ gate/2; they are accepted in order of
/// (|dt|, signal index, idler index) while both events are unused.
pub fn pair_times(signal_t: &[f64], idler_t: &[f64], gate_ns: f64, shift_ns: f64) -> Result<Vec<PairIndex>> {
    if !(gate_ns > 0.0 && gate_ns.is_finite()) {
        return Err(Error::InvalidParameter(format!("gate must be > 0, got {gate_ns}")));
    }
    if !shift_ns.is_finite() {
        return Err(Error::NonFinite("time shift".into()));
    }
    check_sorted(signal_t)?;
    check_sorted(idler_t)?;
    let half = gate_ns / 2.0;
    let mut cand = Vec::new();
    let mut lo = 0;
    for (j, &ti) in idler_t.iter().enumerate() {
        let t = ti + shift_ns;
        while lo < signal_t.len() && signal_t[lo] < t - half {
            lo += 1;
        }
        let mut i = lo;
        while i < signal_t.len() && signal_t[i] <= t + half {
            cand.push(PairIndex {
                signal: i,
                idler: j,
                dt_ns: t - signal_t[i],
            });
            i += 1;
        }
    }
    cand.sort_by(|a, b| {
        a.dt_ns
            .abs()
            .total_cmp(&b.dt_ns.abs())
            .then(a.signal.cmp(&b.signal))
            .then(a.idler.cmp(&b.idler))
    });
    let mut used_s = vec![false; signal_t.len()];
    let mut used_i = vec![false; idler_t.len()];
    let mut out = Vec::new();
    for c in cand {
        if !used_s[c.signal] && !used_i[c.idler] {
            used_s[c.signal] = true;
            used_i[c.idler] = true;
            out.push(c);
        }
    }
    out.sort_by_key(|p| p.signal);
    Ok(out)
}

/// A matched signal/idler event pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventPair {
    pub signal: DetectionEvent,
    pub idler: DetectionEvent,
    pub dt_ns: f64,
}

/// Pairs a time-sorted mixed event stream. `shift_ns` delays the idler stream
/// (non-zero for accidental-floor estimation).
pub fn pair_events(events: &[DetectionEvent], gate_ns: f64, region: &IdlerRegion, shift_ns: f64) -> Result<Vec<EventPair>> {
    region.validate()?;
    if let Some(i) = events.windows(2).position(|w| !(w[1].t_ns >= w[0].t_ns)) {
        return Err(Error::Unsorted(i + 1));
    }
    let (idl, sig): (Vec<&DetectionEvent>, Vec<&DetectionEvent>) = events.iter().partition(|e| region.contains(e));
    let ts: Vec<f64> = sig.iter().map(|e| e.t_ns).collect();
    let ti: Vec<f64> = idl.iter().map(|e| e.t_ns).collect();
    Ok(pair_times(&ts, &ti, gate_ns, shift_ns)?
        .into_iter()
        .map(|p| EventPair {
            signal: *sig[p.signal],
            idler: *idl[p.idler],
            dt_ns: p.dt_ns,
        })
        .collect())
}

/// Pixel-to-µm mapping on a camera: µm = (px − centre)·pitch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFrame {
    pub center_px: [f64; 2],
    pub pitch_um: f64,
}

impl CameraFrame {
    pub fn to_um(&self, x_px: f64, y_px: f64) -> [f64; 2] {
        [(x_px - self.center_px[0]) * self.pitch_um, (y_px - self.center_px[1]) * self.pitch_um]
    }

    pub fn to_px(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.pitch_um + self.center_px[0], p[1] / self.pitch_um + self.center_px[1]]
    }
}

/// One detection arm: crystal-plane ray → camera plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmGeometry {
    pub frame: CameraFrame,
    pub matrix: RayTransferMatrix,
}

/// Coincidence converted to physical coordinates.
///
/// `idler_k_per_um` is the idler momentum referred to the sample plane: the
/// signal photon crosses the sample plane with transverse momentum −k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoincidenceRecord {
    pub signal_um: [f64; 2],
    pub idler_k_per_um: [f64; 2],
    pub dt_ns: f64,
}

/// Transverse momenta of both photons in the crystal frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumPair {
    pub k_signal: [f64; 2],
    pub k_idler: [f64; 2],
}

/// Calibration for converting event pairs to physical quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    pub signal: ArmGeometry,
    pub idler: ArmGeometry,
    /// Crystal plane → sample (objective focal) plane.
    pub to_sample: RayTransferMatrix,
    pub wavelength_um: f64,
    pub b_threshold_um: f64,
}

impl PairGeometry {
    fn k(&self) -> f64 {
        2.0 * PI / self.wavelength_um
    }

    /// Momentum per pixel on the idler camera (small-angle).
    pub fn idler_momentum_pitch(&self) -> f64 {
        self.k() * self.idler.frame.pitch_um / self.idler.matrix.b.abs()
    }

    fn idler_angle(&self, r_crystal: [f64; 2], e: &DetectionEvent) -> Result<[f64; 2]> {
        let r2 = self.idler.frame.to_um(e.x_px, e.y_px);
        Ok(solve_angles(&self.idler.matrix, r_crystal, r2, self.b_threshold_um)?.0)
    }

    /// Imaging layout: signal camera images the crystal (B ≈ 0), idler camera does not.
    pub fn record(&self, pair: &EventPair) -> Result<CoincidenceRecord> {
        let m = &self.signal.matrix;
        if m.b.abs() >= self.b_threshold_um || m.a == 0.0 {
            return Err(Error::InvalidParameter("signal arm does not image the crystal".into()));
        }
        let cam = self.signal.frame.to_um(pair.signal.x_px, pair.signal.y_px);
        let r1 = [cam[0] / m.a, cam[1] / m.a];
        let ti = self.idler_angle(r1, &pair.idler)?;
        let s = &self.to_sample;
        let mut pos = [0.0; 2];
        let mut slope = [0.0; 2];
        for i in 0..2 {
            pos[i] = s.a * r1[i] - s.b * ti[i];
            slope[i] = s.c * r1[i] - s.d * ti[i];
        }
        let ks = k_from_slope(slope, self.k());
        Ok(CoincidenceRecord {
            signal_um: pos,
            idler_k_per_um: [-ks[0], -ks[1]],
            dt_ns: pair.dt_ns,
        })
    }

    /// Calibration layout: both cameras sit in Fourier planes of the crystal.
    pub fn momentum_pair(&self, pair: &EventPair) -> Result<MomentumPair> {
        let ts = solve_angles(
            &self.signal.matrix,
            [0.0; 2],
            self.signal.frame.to_um(pair.signal.x_px, pair.signal.y_px),
            self.b_threshold_um,
        )?
        .0;
        let ti = self.idler_angle([0.0; 2], &pair.idler)?;
        Ok(MomentumPair {
            k_signal: k_from_slope(ts, self.k()),
            k_idler: k_from_slope(ti, self.k()),
        })
    }
}

/// Fixed-bin 2D histogram; bin (ix, iy) spans origin + i·bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram2D {
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub bin: [f64; 2],
    pub counts: Vec<f64>,
}

impl Histogram2D {
    /// Square histogram centred on zero.
    pub fn centered(half_range: f64, bin: f64) -> Result<Self> {
        if !(bin > 0.0 && half_range > bin) {
            return Err(Error::InvalidParameter("histogram range must exceed one bin".into()));
        }
        let n = (2.0 * half_range / bin).round() as usize;
        let origin = -(n as f64) * bin / 2.0;
        Ok(Histogram2D {
            nx: n,
            ny: n,
            origin: [origin, origin],
            bin: [bin, bin],
            counts: vec![0.0; n * n],
        })
    }

    pub fn add(&mut self, x: f64, y: f64, w: f64) -> bool {
        let fx = ((x - self.origin[0]) / self.bin[0]).floor();
        let fy = ((y - self.origin[1]) / self.bin[1]).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return false;
        }
        self.counts[fy as usize * self.nx + fx as usize] += w;
        true
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn centers_x(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.origin[0] + (i as f64 + 0.5) * self.bin[0]).collect()
    }

    pub fn centers_y(&self) -> Vec<f64> {
        (0..self.ny).map(|i| self.origin[1] + (i as f64 + 0.5) * self.bin[1]).collect()
    }

    /// Sum over y for every x bin.
    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.nx).map(|ix| (0..self.ny).map(|iy| self.counts[iy * self.nx + ix]).sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.ny).map(|iy| self.counts[iy * self.nx..(iy + 1) * self.nx].iter().sum()).collect()
    }

    pub fn subtract(&mut self, other: &Histogram2D) -> Result<()> {
        if self.nx != other.nx || self.ny != other.ny || self.origin != other.origin || self.bin != other.bin {
            return Err(Error::GridMismatch("histogram layouts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a -= b;
        }
        Ok(())
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.nx,
            height: self.ny,
            pitch_um: self.bin[0],
            data: self.counts.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramOptions {
    pub joint_half_range_per_um: f64,
    pub joint_bin_per_um: f64,
    pub sum_half_range_per_um: f64,
    pub sum_bin_per_um: f64,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        HistogramOptions {
            joint_half_range_per_um: 0.7,
            joint_bin_per_um: 6.8e-3,
            sum_half_range_per_um: 0.1,
            sum_bin_per_um: 6.8e-4,
        }
    }
}

/// Below this many pairs the histogram is flagged as low-count.
pub const MIN_RECORDS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct JointMomentumHistogram {
    /// (k_signal_x, k_idler_x)
    pub x_joint: Histogram2D,
    /// (k_signal_y, k_idler_y)
    pub y_joint: Histogram2D,
    /// (k_signal_x + k_idler_x, k_signal_y + k_idler_y)
    pub sum: Histogram2D,
    pub pairs: usize,
    pub low_count: bool,
    pub background_subtracted: bool,
}

fn fill(pairs: &[MomentumPair], opts: &HistogramOptions) -> Result<(Histogram2D, Histogram2D, Histogram2D)> {
    let mut xj = Histogram2D::centered(opts.joint_half_range_per_um, opts.joint_bin_per_um)?;
    let mut yj = xj.clone();
    let mut sum = Histogram2D::centered(opts.sum_half_range_per_um, opts.sum_bin_per_um)?;
    for p in pairs {
        xj.add(p.k_signal[0], p.k_idler[0], 1.0);
        yj.add(p.k_signal[1], p.k_idler[1], 1.0);
        sum.add(p.k_signal[0] + p.k_idler[0], p.k_signal[1] + p.k_idler[1], 1.0);
    }
    Ok((xj, yj, sum))
}

/// Joint and sum-coordinate histograms, optionally minus a time-shifted
/// (accidental) pairing of the same data.
pub fn joint_momentum_histogram(
    pairs: &[MomentumPair],
    accidentals: Option<&[MomentumPair]>,
    opts: &HistogramOptions,
) -> Result<JointMomentumHistogram> {
    let (mut x_joint, mut y_joint, mut sum) = fill(pairs, opts)?;
    if let Some(acc) = accidentals {
        let (ax, ay, asum) = fill(acc, opts)?;
        x_joint.subtract(&ax)?;
        y_joint.subtract(&ay)?;
        sum.subtract(&asum)?;
    }
    let low_count = pairs.len() < MIN_RECORDS;
    if low_count {
        log::warn!("only {} coincidences in the momentum histogram", pairs.len());
    }
    Ok(JointMomentumHistogram {
        x_joint,
        y_joint,
        sum,
        pairs: pairs.len(),
        low_count,
        background_subtracted: accidentals.is_some(),
    })
}

/// f(k) = a·exp(−(k−b)²/2σ²)
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GaussianFit {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl GaussianFit {
    pub fn eval(&self, k: f64) -> f64 {
        self.a * (-(k - self.b).powi(2) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn sigma_px(&self, momentum_pitch: f64) -> f64 {
        self.sigma / momentum_pitch
    }
}

const FIT_MAX_ITER: usize = 500;

fn sse(x: &[f64], y: &[f64], p: [f64; 3]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&k, &v)| {
            let m = p[0] * (-(k - p[1]).powi(2) / (2.0 * p[2] * p[2])).exp();
            (v - m).powi(2)
        })
        .sum()
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][c] = r[row];
        }
        *o = det(&mc) / d;
    }
    Some(out)
}

/// Levenberg–Marquardt least-squares Gaussian fit of `counts` at bin `centers`.
pub fn fit_gaussian(centers: &[f64], counts: &[f64]) -> Result<GaussianFit> {
    if centers.len() != counts.len() {
        return Err(Error::InvalidParameter("centers and counts differ in length".into()));
    }
    if counts.len() < 5 {
        return Err(Error::InvalidParameter(format!("need >= 5 bins, got {}", counts.len())));
    }
    if counts.iter().chain(centers).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram".into()));
    }
    let total: f64 = counts.iter().map(|c| c.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Empty("histogram has no positive counts".into()));
    }
    let lo = centers.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let domain = hi - lo;
    // moment-based start
    let (imax, &amax) = counts.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let half = amax / 2.0;
    let mut l = imax;
    while l > 0 && counts[l] > half {
        l -= 1;
    }
    let mut r = imax;
    while r + 1 < counts.len() && counts[r] > half {
        r += 1;
    }
    let fwhm = (centers[r] - centers[l]).abs().max((centers[1] - centers[0]).abs());
    let mut p = [amax, centers[imax], fwhm / 2.3548];
    let mut cost = sse(centers, counts, p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < FIT_MAX_ITER {
        it += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&k, &v) in centers.iter().zip(counts) {
            let u = (k - p[1]) / p[2];
            let e = (-0.5 * u * u).exp();
            let m = p[0] * e;
            let j = [e, m * u / p[2], m * u * u / p[2]];
            let res = v - m;
            for a in 0..3 {
                jtr[a] += j[a] * res;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut m = jtj;
            for a in 0..3 {
                m[a][a] *= 1.0 + lambda;
            }
            let Some(step) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], (p[2] + step[2]).abs()];
            let c = sse(centers, counts, trial);
            if c.is_finite() && c <= cost {
                let rel = (0..3).map(|i| (step[i] / p[i].abs().max(1e-300)).abs()).fold(0.0, f64::max);
                let dc = cost - c;
                p = trial;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || dc <= 1e-15 * cost.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left: at a minimum to machine precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    let fail = |iterations| Error::NoConvergence {
        iterations,
        last_a: p[0],
        last_b: p[1],
        last_sigma: p[2],
    };
    if !converged || !(p[2] > 0.0) || !p.iter().all(|v| v.is_finite()) {
        return Err(fail(it));
    }
    if p[2] > domain {
        return Err(fail(it));
    }
    Ok(GaussianFit {
        a: p[0],
        b: p[1],
        sigma: p[2],
        residual_norm: cost.sqrt(),
        iterations: it,
    })
}

/// Gaussian fits to the x and y marginals of the sum-coordinate histogram.
pub fn fit_sum_projection(h: &JointMomentumHistogram) -> Result<(GaussianFit, GaussianFit)> {
    Ok((
        fit_gaussian(&h.sum.centers_x(), &h.sum.marginal_x())?,
        fit_gaussian(&h.sum.centers_y(), &h.sum.marginal_y())?,
    ))
}

/// Pixel window on a camera, used to histogram idler coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelWindow {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelWindow {
    pub fn histogram<'a>(&self, points: impl IntoIterator<Item = &'a DetectionEvent>) -> Image {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut img = Image::zeros(w, h, 1.0);
        for e in points {
            let x = e.x_px.round() - self.x0 as f64;
            let y = e.y_px.round() - self.y0 as f64;
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                img.data[y as usize * w + x as usize] += 1.0;
            }
        }
        img
    }
}

/// Coincidence counts in idler pixel coordinates.
pub fn ghost_image(pairs: &[EventPair], window: &PixelWindow) -> Image {
    window.histogram(pairs.iter().map(|p| &p.idler))
}

/// Divides a ghost image by a reference (idler singles) profile; pixels where
/// the reference is below `min_fraction` of its maximum are set to zero.
pub fn normalize_ghost(ghost: &Image, reference: &Image, min_fraction: f64) -> Result<Image> {
    if !ghost.same_grid(reference) {
        return Err(Error::GridMismatch("ghost and reference differ in size".into()));
    }
    let rmax = reference.max();
    if !(rmax > 0.0) {
        return Err(Error::Empty("reference profile is zero".into()));
    }
    let data = ghost
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&g, &r)| if r >= min_fraction * rmax { g / r } else { 0.0 })
        .collect();
    Image::from_data(ghost.width, ghost.height, ghost.pitch_um, data)
}

/// Expected accidental pairs for uncorrelated streams: r₁·r₂·τ·T.
pub fn expected_accidentals(rate1_per_s: f64, rate2_per_s: f64, gate_ns: f64, duration_s: f64) -> f64 {
    rate1_per_s * rate2_per_s * gate_ns * 1e-9 * duration_s
}

/// Signal slope implied by a record (negated idler momentum).
pub fn signal_slope(rec: &CoincidenceRecord, wavelength_um: f64) -> [f64; 2] {
    slope_from_k([-rec.idler_k_per_um[0], -rec.idler_k_per_um[1]], 2.0 * PI / wavelength_um)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    fn ev(cam: u8, t: f64) -> DetectionEvent {
        DetectionEvent {
            cam,
            x_px: 10.0,
            y_px: 10.0,
            t_ns: t,
            cluster_size: 1,
        }
    }

    const TWO_CAM: IdlerRegion = IdlerRegion::Camera { cam: 1 };

    #[test]
    fn gate_examples() {
        let p = pair_events(&[ev(0, 100.0), ev(1, 105.0)], 10.0, &TWO_CAM, 0.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].dt_ns, 5.0);
        assert!(pair_events(&[ev(0, 100.0), ev(1, 120.0)], 10.0, &TWO_CAM, 0.0).unwrap().is_empty());
        assert!(pair_events(&[ev(0, 100.0)], 0.0, &TWO_CAM, 0.0).is_err());
        assert!(matches!(
            pair_events(&[ev(0, 100.0), ev(1, 50.0)], 10.0, &TWO_CAM, 0.0),
            Err(Error::Unsorted(1))
        ));
    }

    #[test]
    fn greedy_prefers_nearest_and_is_unique() {
        // idler at 100 sits between two signals; the closer one wins, the other is left over
        let ts = [97.0, 99.0];
        let ti = [100.0, 101.5];
        let p = pair_times(&ts, &ti, 10.0, 0.0).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].signal, p[0].idler), (0, 1));
        assert_eq!((p[1].signal, p[1].idler), (1, 0));
        // tie goes to the earlier signal
        let p = pair_times(&[98.0, 102.0], &[100.0], 10.0, 0.0).unwrap();
        assert_eq!(p[0].signal, 0);
    }

    #[test]
    fn single_camera_region() {
        let region = IdlerRegion::Pixels {
            cam: 0,
            x0: 156,
            y0: 0,
            x1: 256,
            y1: 100,
        };
        let mut a = ev(0, 10.0);
        a.x_px = 200.0;
        a.y_px = 50.0;
        let b = ev(0, 12.0);
        assert!(region.contains(&a));
        assert!(!region.contains(&b));
        let p = pair_events(&[a, b], 10.0, &region, 0.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].idler.x_px, 200.0);
    }

    fn poisson_times(rate: f64, duration_s: f64, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 99, 0);
        let n = Poisson::new(rate * duration_s).unwrap().sample(&mut rng) as usize;
        let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * duration_s * 1e9).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    #[test]
    fn accidental_rate_matches_formula() {
        let (r, t) = (1e4, 10.0);
        let expect = expected_accidentals(r, r, 10.0, t);
        let n = pair_times(&poisson_times(r, t, 1), &poisson_times(r, t, 2), 10.0, 0.0).unwrap().len() as f64;
        assert!((n - expect).abs() <= 5.0 * expect.sqrt(), "{n} vs {expect}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pairing_symmetric_and_bounded(
            mut a in proptest::collection::vec(0u32..5000, 0..60),
            mut b in proptest::collection::vec(0u32..5000, 0..60),
        ) {
            a.sort();
            b.sort();
            // half-integer offsets avoid exact ties
            let ta: Vec<f64> = a.iter().enumerate().map(|(i, &v)| v as f64 + i as f64 * 1e-6).collect();
            let tb: Vec<f64> = b.iter().enumerate().map(|(i, &v)| v as f64 + 0.5 + i as f64 * 1e-6).collect();
            let p = pair_times(&ta, &tb, 20.0, 0.0).unwrap();
            let q = pair_times(&tb, &ta, 20.0, 0.0).unwrap();
            prop_assert!(p.len() <= ta.len().min(tb.len()));
            let mut ps: Vec<(usize, usize)> = p.iter().map(|x| (x.signal, x.idler)).collect();
            let mut qs: Vec<(usize, usize)> = q.iter().map(|x| (x.idler, x.signal)).collect();
            ps.sort();
            qs.sort();
            prop_assert_eq!(ps, qs);
            for x in &p {
                prop_assert!(x.dt_ns.abs() <= 10.0);
            }
        }
    }

    fn gauss(x: &[f64], a: f64, b: f64, s: f64) -> Vec<f64> {
        x.iter().map(|&k| a * (-(k - b).powi(2) / (2.0 * s * s)).exp()).collect()
    }

    #[test]
    fn exact_gaussian_recovered() {
        let x: Vec<f64> = (-40..=40).map(|i| i as f64 * 6.8e-4).collect();
        let y = gauss(&x, 100.0, 0.0, 6.1e-3);
        let f = fit_gaussian(&x, &y).unwrap();
        assert!((f.a - 100.0).abs() / 100.0 < 1e-6);
        assert!(f.b.abs() < 1e-6 * 6.1e-3);
        assert!((f.sigma - 6.1e-3).abs() / 6.1e-3 < 1e-6);
        assert!((f.sigma_px(6.8e-3) - 0.897).abs() < 1e-3);
        let off = gauss(&x, 50.0, 3e-3, 4e-3);
        let g = fit_gaussian(&x, &off).unwrap();
        assert!((g.b - 3e-3).abs() < 1e-9);
    }

    #[test]
    fn poisson_gaussian_sigma_within_five_percent() {
        let x: Vec<f64> = (-40..=40).map(|i| i as f64 * 6.8e-4).collect();
        let mut rng = stream_rng(5, 0, 0);
        let s = 6.1e-3;
        let norm = 1e5 * 6.8e-4 / (s * (2.0 * PI).sqrt());
        for _ in 0..5 {
            let y: Vec<f64> = gauss(&x, norm, 0.0, s)
                .iter()
                .map(|&m| Poisson::new(m.max(1e-12)).unwrap().sample(&mut rng))
                .collect();
            let f = fit_gaussian(&x, &y).unwrap();
            assert!((f.sigma - s).abs() / s < 0.05);
        }
    }

    #[test]
    fn flat_histogram_flagged() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(matches!(fit_gaussian(&x, &vec![7.0; 30]), Err(Error::NoConvergence { .. })));
        assert!(fit_gaussian(&x[..4], &[1.0; 4]).is_err());
        assert!(fit_gaussian(&x, &vec![0.0; 30]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fit_invariant_under_rescaling(c in 0.01f64..1000.0, seed in 0u64..1000) {
            let x: Vec<f64> = (-30..=30).map(|i| i as f64 * 0.1).collect();
            let mut rng = stream_rng(seed, 0, 0);
            let y: Vec<f64> = gauss(&x, 200.0, 0.2, 0.7).iter().map(|&m| Poisson::new(m.max(1e-9)).unwrap().sample(&mut rng)).collect();
            let f = fit_gaussian(&x, &y).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let g = fit_gaussian(&x, &ys).unwrap();
            prop_assert!((f.sigma - g.sigma).abs() < 1e-6 * f.sigma);
            prop_assert!((f.b - g.b).abs() < 1e-6);
            prop_assert!((g.a / f.a - c).abs() < 1e-6 * c);
        }
    }

    #[test]
    fn ideal_pairs_give_central_sum_peak() {
        let mut rng = stream_rng(1, 0, 0);
        let pairs: Vec<MomentumPair> = (0..5000)
            .map(|_| {
                let k = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
                MomentumPair {
                    k_signal: k,
                    k_idler: [-k[0], -k[1]],
                }
            })
            .collect();
        let h = joint_momentum_histogram(&pairs, None, &HistogramOptions::default()).unwrap();
        assert!(!h.low_count);
        let n = h.sum.nx;
        let centre = h.sum.counts[(n / 2) * n + n / 2] + h.sum.counts[(n / 2 - 1) * n + n / 2 - 1]
            + h.sum.counts[(n / 2 - 1) * n + n / 2]
            + h.sum.counts[(n / 2) * n + n / 2 - 1];
        assert_eq!(centre, 5000.0);
        // joint histogram mass sits on the anti-diagonal
        let j = &h.x_joint;
        let mut off = 0.0;
        for iy in 0..j.ny {
            for ix in 0..j.nx {
                if (ix + iy).abs_diff(j.nx - 1) > 1 {
                    off += j.counts[iy * j.nx + ix];
                }
            }
        }
        assert_eq!(off, 0.0);
        let few = joint_momentum_histogram(&pairs[..10], None, &HistogramOptions::default()).unwrap();
        assert!(few.low_count);
    }

    #[test]
    fn record_conversion_round_trip() {
        use crate::optics::{apply, OpticalSystem, RayState};
        let lambda = 0.81;
        let k = 2.0 * PI / lambda;
        let to_sample = OpticalSystem::relay_4f(100_000.0, 100_000.0).unwrap().matrix();
        let to_cam = OpticalSystem::relay_4f(10_000.0, 200_000.0).unwrap().matrix();
        let idler = OpticalSystem::fourier(62_743.0).unwrap().matrix();
        let geom = PairGeometry {
            signal: ArmGeometry {
                frame: CameraFrame { center_px: [127.5, 127.5], pitch_um: 55.0 },
                matrix: to_cam * to_sample,
            },
            idler: ArmGeometry {
                frame: CameraFrame { center_px: [127.5, 127.5], pitch_um: 55.0 },
                matrix: idler,
            },
            to_sample,
            wavelength_um: lambda,
            b_threshold_um: 1.0,
        };
        assert!((geom.idler_momentum_pitch() - 6.8e-3).abs() < 1e-5);
        let r = [120.0, -40.0];
        let ki = [0.05, -0.02];
        let si = slope_from_k(ki, k);
        let ks = [-ki[0], -ki[1]];
        let ss = slope_from_k(ks, k);
        let at_sample = apply(&to_sample, &RayState::new(r, ss)).unwrap();
        let at_cam = apply(&(to_cam * to_sample), &RayState::new(r, ss)).unwrap();
        let at_idler = apply(&idler, &RayState::new(r, si)).unwrap();
        let mut s_ev = ev(0, 10.0);
        let px = geom.signal.frame.to_px(at_cam.r);
        s_ev.x_px = px[0];
        s_ev.y_px = px[1];
        let mut i_ev = ev(1, 11.0);
        let px = geom.idler.frame.to_px(at_idler.r);
        i_ev.x_px = px[0];
        i_ev.y_px = px[1];
        let pair = EventPair { signal: s_ev, idler: i_ev, dt_ns: 1.0 };
        let rec = geom.record(&pair).unwrap();
        for i in 0..2 {
            assert!((rec.signal_um[i] - at_sample.r[i]).abs() < 1e-9);
        }
        let s = signal_slope(&rec, lambda);
        for i in 0..2 {
            assert!((s[i] - at_sample.theta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ghost_normalization() {
        let w = PixelWindow { x0: 10, y0: 10, width: 4, height: 4 };
        let mut e = ev(1, 0.0);
        e.x_px = 11.2;
        e.y_px = 12.7;
        let pair = EventPair { signal: ev(0, 0.0), idler: e, dt_ns: 0.0 };
        let g = ghost_image(&[pair, pair], &w);
        assert_eq!(g.get(1, 3), 2.0);
        let mut reference = Image::zeros(4, 4, 1.0);
        reference.data.iter_mut().for_each(|v| *v = 4.0);
        reference.data[0] = 0.1;
        let n = normalize_ghost(&g, &reference, 0.1).unwrap();
        assert_eq!(n.get(1, 3), 0.5);
        assert_eq!(n.get(0, 0), 0.0);
    }
}
