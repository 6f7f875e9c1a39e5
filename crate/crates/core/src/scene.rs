//! Targets and the interaction of signal photons with them.

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::field::{ComplexField, Propagator, SpatialFrequencyGrid};
use crate::image::{GridSpec, Image};
use crate::optics::slope_from_k;
use crate::rng::stream_rng;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Axis-aligned rectangle in sample-plane µm, half-open on the upper edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
    pub fn grow(&self, m: f64) -> Rect {
        Rect::new(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)
    }
    pub fn union(&self, o: &Rect) -> Rect {
        Rect::new(self.x0.min(o.x0), self.y0.min(o.y0), self.x1.max(o.x1), self.y1.max(o.y1))
    }
}

/// Bar polarity of a resolution chart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Transmissive bars on an opaque background.
    ClearBars,
    /// Opaque bars on a transmissive background (positive chart).
    OpaqueBars,
}

/// USAF-1951 line-pair frequency in lp/mm.
pub fn line_pair_frequency(group: i32, element: u8) -> f64 {
    2f64.powf(group as f64 + (element as f64 - 1.0) / 6.0)
}

/// Geometry of one chart element (three vertical and three horizontal bars).
#[derive(Clone, Debug, PartialEq)]
pub struct UsafElement {
    pub group: i32,
    pub element: u8,
    pub bar_width_um: f64,
    /// One line-pair period (bar plus gap).
    pub spacing_um: f64,
    pub vertical_bars: [Rect; 3],
    pub vertical_gaps: [Rect; 2],
    pub horizontal_bars: [Rect; 3],
    pub horizontal_gaps: [Rect; 2],
    pub bbox: Rect,
}

impl UsafElement {
    fn at(group: i32, element: u8, x0: f64, y0: f64) -> Self {
        let w = 1000.0 / (2.0 * line_pair_frequency(group, element));
        let l = 5.0 * w;
        let vb = |i: usize| Rect::new(x0 + 2.0 * w * i as f64, y0, x0 + 2.0 * w * i as f64 + w, y0 + l);
        let vg = |i: usize| Rect::new(x0 + 2.0 * w * i as f64 + w, y0, x0 + 2.0 * w * (i + 1) as f64, y0 + l);
        let hx = x0 + 7.0 * w;
        let hb = |i: usize| Rect::new(hx, y0 + 2.0 * w * i as f64, hx + l, y0 + 2.0 * w * i as f64 + w);
        let hg = |i: usize| Rect::new(hx, y0 + 2.0 * w * i as f64 + w, hx + l, y0 + 2.0 * w * (i + 1) as f64);
        UsafElement {
            group,
            element,
            bar_width_um: w,
            spacing_um: 2.0 * w,
            vertical_bars: [vb(0), vb(1), vb(2)],
            vertical_gaps: [vg(0), vg(1)],
            horizontal_bars: [hb(0), hb(1), hb(2)],
            horizontal_gaps: [hg(0), hg(1)],
            bbox: Rect::new(x0, y0, x0 + 12.0 * w, y0 + l),
        }
    }

    fn translate(&mut self, dx: f64, dy: f64) {
        for r in self
            .vertical_bars
            .iter_mut()
            .chain(self.horizontal_bars.iter_mut())
            .chain(self.vertical_gaps.iter_mut())
            .chain(self.horizontal_gaps.iter_mut())
        {
            *r = r.translate(dx, dy);
        }
        self.bbox = self.bbox.translate(dx, dy);
    }

    pub fn bars(&self) -> impl Iterator<Item = &Rect> {
        self.vertical_bars.iter().chain(self.horizontal_bars.iter())
    }

    pub fn is_bar(&self, x: f64, y: f64) -> bool {
        self.bbox.contains(x, y) && self.bars().any(|r| r.contains(x, y))
    }
}

/// A resolution chart: one column of elements per group, centred on the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct UsafChart {
    pub elements: Vec<UsafElement>,
    pub polarity: Polarity,
}

impl UsafChart {
    /// Lays out `(group, elements)` columns left to right.
    pub fn layout(groups: &[(i32, Vec<u8>)], polarity: Polarity) -> Result<Self> {
        let mut elements = Vec::new();
        let mut x = 0.0;
        for (group, els) in groups {
            if !(0..=9).contains(group) {
                return Err(Error::InvalidParameter(format!("group {group} outside 0..=9")));
            }
            if els.is_empty() {
                return Err(Error::InvalidParameter(format!("group {group} has no elements")));
            }
            let mut y = 0.0;
            let mut col_w: f64 = 0.0;
            let mut first_w = None;
            for &e in els {
                if !(1..=6).contains(&e) {
                    return Err(Error::InvalidParameter(format!("element {e} outside 1..=6")));
                }
                let el = UsafElement::at(*group, e, x, y);
                first_w.get_or_insert(el.bar_width_um);
                y = el.bbox.y1 + 2.0 * el.bar_width_um;
                col_w = col_w.max(el.bbox.x1 - el.bbox.x0);
                elements.push(el);
            }
            x += col_w + 2.0 * first_w.unwrap_or(0.0);
        }
        let mut bb = elements[0].bbox;
        for e in &elements {
            bb = bb.union(&e.bbox);
        }
        let (dx, dy) = (-(bb.x0 + bb.x1) / 2.0, -(bb.y0 + bb.y1) / 2.0);
        for e in &mut elements {
            e.translate(dx, dy);
        }
        Ok(UsafChart { elements, polarity })
    }

    pub fn bbox(&self) -> Rect {
        let mut bb = self.elements[0].bbox;
        for e in &self.elements {
            bb = bb.union(&e.bbox);
        }
        bb
    }

    /// Per-pixel bar membership (pixel centres), row-major.
    pub fn rasterize(&self, grid: &GridSpec) -> Vec<bool> {
        let mut out = vec![false; grid.len()];
        for iy in 0..grid.height {
            let y = grid.y_um(iy as f64);
            for ix in 0..grid.width {
                let x = grid.x_um(ix as f64);
                out[iy * grid.width + ix] = self.elements.iter().any(|e| e.is_bar(x, y));
            }
        }
        out
    }

    /// Binary amplitude transmission on `grid`.
    pub fn transmission(&self, grid: &GridSpec) -> Result<Image> {
        for e in &self.elements {
            if e.bar_width_um < 2.0 * grid.pitch_um {
                return Err(Error::Unresolvable(format!(
                    "group {} element {}: bar width {:.3} um < 2 x pitch {} um",
                    e.group, e.element, e.bar_width_um, grid.pitch_um
                )));
            }
        }
        let bars = self.rasterize(grid);
        let (on, off) = match self.polarity {
            Polarity::ClearBars => (1.0, 0.0),
            Polarity::OpaqueBars => (0.0, 1.0),
        };
        Image::from_data(
            grid.width,
            grid.height,
            grid.pitch_um,
            bars.iter().map(|&b| if b { on } else { off }).collect(),
        )
    }
}

/// A transmission mask placed at a distance from the objective focus.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTarget {
    pub transmission: ComplexField,
    /// Centre of the transmission grid in sample-plane µm.
    pub center_um: [f64; 2],
    /// Distance from focus, positive toward the objective.
    pub z_offset_um: f64,
}

impl SceneTarget {
    pub fn new(transmission: ComplexField, center_um: [f64; 2], z_offset_um: f64) -> Result<Self> {
        if transmission.values().iter().any(|v| v.norm() > 1.0 + 1e-9) {
            return Err(Error::InvalidParameter("target transmission exceeds 1".into()));
        }
        if !transmission.is_finite() || !z_offset_um.is_finite() {
            return Err(Error::NonFinite("target".into()));
        }
        Ok(SceneTarget {
            transmission,
            center_um,
            z_offset_um,
        })
    }

    pub fn from_image(amplitude: &Image, wavelength_um: f64, z_offset_um: f64) -> Result<Self> {
        Self::new(ComplexField::from_image(amplitude, wavelength_um)?, [0.0, 0.0], z_offset_um)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            width: self.transmission.width(),
            height: self.transmission.height(),
            pitch_um: self.transmission.pitch_um(),
            center_um: self.center_um,
        }
    }

    /// |t|² at a sample-plane point, clamping to the grid edge outside it.
    pub fn intensity_at(&self, x_um: f64, y_um: f64) -> f64 {
        let g = self.grid();
        let (px, py) = g.to_pixel(x_um, y_um);
        let ix = (px.round().max(0.0) as usize).min(g.width - 1);
        let iy = (py.round().max(0.0) as usize).min(g.height - 1);
        self.transmission.get(ix, iy).norm_sqr()
    }

    pub fn mean_intensity(&self) -> f64 {
        let v = self.transmission.values();
        v.iter().map(|t| t.norm_sqr()).sum::<f64>() / v.len() as f64
    }
}

/// Zero-phase USAF target on a `size`×`size` grid centred on the origin.
pub fn usaf_target(
    group: i32,
    elements: &[u8],
    pitch_um: f64,
    size_px: usize,
    polarity: Polarity,
    wavelength_um: f64,
) -> Result<(SceneTarget, UsafChart)> {
    let chart = UsafChart::layout(&[(group, elements.to_vec())], polarity)?;
    let grid = GridSpec::new(size_px, size_px, pitch_um);
    grid.validate()?;
    let t = chart.transmission(&grid)?;
    Ok((SceneTarget::from_image(&t, wavelength_um, 0.0)?, chart))
}

/// Opaque half-plane: points with `x·cos(a) + y·sin(a) < offset` are blocked.
pub fn half_plane(grid: &GridSpec, angle_rad: f64, offset_um: f64, wavelength_um: f64) -> Result<SceneTarget> {
    grid.validate()?;
    let (c, s) = (angle_rad.cos(), angle_rad.sin());
    let mut data = Vec::with_capacity(grid.len());
    for iy in 0..grid.height {
        for ix in 0..grid.width {
            let (x, y) = (grid.x_um(ix as f64), grid.y_um(iy as f64));
            data.push(if x * c + y * s < offset_um { 0.0 } else { 1.0 });
        }
    }
    let img = Image::from_data(grid.width, grid.height, grid.pitch_um, data)?;
    SceneTarget::new(ComplexField::from_image(&img, wavelength_um)?, grid.center_um, 0.0)
}

/// Opaque straight fiber segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fiber {
    pub a_um: [f64; 2],
    pub b_um: [f64; 2],
    pub diameter_um: f64,
    pub z_um: f64,
}

impl Fiber {
    pub fn distance_um(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = (self.a_um[0], self.a_um[1]);
        let (dx, dy) = (self.b_um[0] - ax, self.b_um[1] - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (x - ax - t * dx).hypot(y - ay - t * dy)
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.distance_um(x, y) <= self.diameter_um / 2.0
    }
}

/// Targets at distinct, strictly increasing depths.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumetricScene {
    pub targets: Vec<SceneTarget>,
}

impl VolumetricScene {
    pub fn new(mut targets: Vec<SceneTarget>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidParameter("scene has no targets".into()));
        }
        targets.sort_by(|a, b| a.z_offset_um.total_cmp(&b.z_offset_um));
        for w in targets.windows(2) {
            if w[0].z_offset_um == w[1].z_offset_um {
                return Err(Error::InvalidParameter(format!(
                    "two targets at z = {} um",
                    w[0].z_offset_um
                )));
            }
        }
        Ok(VolumetricScene { targets })
    }

    /// Hash of the scene geometry, stable across runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: &[u8]| {
            for &x in b {
                h ^= x as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for t in &self.targets {
            eat(&t.z_offset_um.to_le_bytes());
            for v in t.transmission.values() {
                eat(&v.re.to_le_bytes());
                eat(&v.im.to_le_bytes());
            }
        }
        h
    }
}

/// Rasterizes fibers, one slice per distinct depth.
pub fn fibers_scene(fibers: &[Fiber], grid: &GridSpec, wavelength_um: f64) -> Result<VolumetricScene> {
    grid.validate()?;
    if fibers.is_empty() {
        return Err(Error::InvalidParameter("no fibers".into()));
    }
    let mut by_z: BTreeMap<u64, Vec<&Fiber>> = BTreeMap::new();
    for f in fibers {
        if !(f.diameter_um > 0.0) {
            return Err(Error::InvalidParameter("fiber diameter must be > 0".into()));
        }
        // order-preserving key for f64
        let bits = f.z_um.to_bits();
        let key = if f.z_um.is_sign_negative() { !bits } else { bits | (1 << 63) };
        by_z.entry(key).or_default().push(f);
    }
    let mut targets = Vec::new();
    for group in by_z.values() {
        let mut data = vec![1.0; grid.len()];
        for iy in 0..grid.height {
            let y = grid.y_um(iy as f64);
            for ix in 0..grid.width {
                let x = grid.x_um(ix as f64);
                if group.iter().any(|f| f.covers(x, y)) {
                    data[iy * grid.width + ix] = 0.0;
                }
            }
        }
        let img = Image::from_data(grid.width, grid.height, grid.pitch_um, data)?;
        targets.push(SceneTarget::new(
            ComplexField::from_image(&img, wavelength_um)?,
            grid.center_um,
            group[0].z_um,
        )?);
    }
    VolumetricScene::new(targets)
}

/// Randomly oriented fibers crossing the grid, deterministic by seed.
pub fn random_fibers(
    n_fibers: usize,
    diameter_range_um: [f64; 2],
    z_range_um: [f64; 2],
    seed: u64,
    grid: &GridSpec,
) -> Result<Vec<Fiber>> {
    if n_fibers == 0 {
        return Err(Error::InvalidParameter("fiber count must be >= 1".into()));
    }
    if diameter_range_um[1] < diameter_range_um[0] || z_range_um[1] < z_range_um[0] {
        return Err(Error::InvalidParameter("ranges must be ordered [min, max]".into()));
    }
    let mut rng = stream_rng(seed, crate::rng::streams::PHANTOM, 0);
    let (hw, hh) = (grid.width as f64 * grid.pitch_um / 2.0, grid.height as f64 * grid.pitch_um / 2.0);
    let mut out = Vec::with_capacity(n_fibers);
    for _ in 0..n_fibers {
        let cx = grid.center_um[0] + (rng.random::<f64>() - 0.5) * hw;
        let cy = grid.center_um[1] + (rng.random::<f64>() - 0.5) * hh;
        let ang = rng.random::<f64>() * PI;
        let half_len = (0.5 + 0.5 * rng.random::<f64>()) * hw.max(hh);
        let d = diameter_range_um[0] + (diameter_range_um[1] - diameter_range_um[0]) * rng.random::<f64>();
        let z = z_range_um[0] + (z_range_um[1] - z_range_um[0]) * rng.random::<f64>();
        out.push(Fiber {
            a_um: [cx - half_len * ang.cos(), cy - half_len * ang.sin()],
            b_um: [cx + half_len * ang.cos(), cy + half_len * ang.sin()],
            diameter_um: d,
            z_um: z,
        });
    }
    Ok(out)
}

pub fn fiber_phantom(
    n_fibers: usize,
    diameter_range_um: [f64; 2],
    z_range_um: [f64; 2],
    seed: u64,
    grid: &GridSpec,
    wavelength_um: f64,
) -> Result<VolumetricScene> {
    let fibers = random_fibers(n_fibers, diameter_range_um, z_range_um, seed, grid)?;
    fibers_scene(&fibers, grid, wavelength_um)
}

/// How photons interact with the targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionModel {
    /// Diffraction density sampled from the angular-spectrum field.
    Wave,
    /// Geometric shadowing: survival |t|² where the ray crosses the target plane.
    Ray,
}

/// Tilt handling in the single-target wave model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltModel {
    /// Translate the normal-incidence density by θ·d.
    ShiftTheorem,
    /// Propagate the tilted field per momentum bin on the FFT grid.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Illumination {
    Uniform,
    Gaussian { waist_um: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Targets at their own z offsets around the objective focus.
    Defocus,
    /// A single target at the back focal plane of a lens placed after the sample plane.
    FourierPlane { focal_um: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionOptions {
    pub model: InteractionModel,
    pub tilt: TiltModel,
    pub illumination: Illumination,
    pub placement: Placement,
    /// Momentum-bin pitch for per-bin diffraction fields (µm⁻¹).
    pub bin_pitch_per_um: f64,
}

impl Default for InteractionOptions {
    fn default() -> Self {
        InteractionOptions {
            model: InteractionModel::Wave,
            tilt: TiltModel::ShiftTheorem,
            illumination: Illumination::Uniform,
            placement: Placement::Defocus,
            bin_pitch_per_um: 4e-3,
        }
    }
}

/// Inverse-CDF sampler over grid pixels.
#[derive(Clone, Debug)]
pub struct PixelSampler {
    cdf: Vec<f64>,
}

impl PixelSampler {
    pub fn new(weights: &[f64]) -> Option<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w.max(0.0);
                acc
            })
            .collect();
        (acc > 0.0).then_some(PixelSampler { cdf })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

enum Prepared {
    Empty,
    WaveShift {
        sampler: Option<PixelSampler>,
        throughput: f64,
        d: f64,
    },
    WaveBinned {
        /// Per slice: spectrum of (t − 1) propagated with the reduced transfer function.
        spectra: Vec<(f64, Vec<Complex64>)>,
        /// Single-target exact-tilt mode: the unpropagated transmission and distance.
        exact: Option<(ComplexField, f64)>,
    },
    Ray,
    Fourier {
        focal_um: f64,
    },
}

/// Scene prepared for repeated photon interaction.
pub struct SceneInteraction {
    scene: Option<VolumetricScene>,
    options: InteractionOptions,
    grid: Option<GridSpec>,
    k: f64,
    prepared: Prepared,
}

/// Outcome for one signal photon.
pub type Detected = Option<[f64; 2]>;

impl SceneInteraction {
    /// `wavelength_um` is the signal photon wavelength.
    pub fn new(scene: Option<VolumetricScene>, options: InteractionOptions, wavelength_um: f64) -> Result<Self> {
        let k = 2.0 * PI / wavelength_um;
        let Some(sc) = scene else {
            return Ok(SceneInteraction {
                scene: None,
                options,
                grid: None,
                k,
                prepared: Prepared::Empty,
            });
        };
        let g0 = sc.targets[0].grid();
        for t in &sc.targets {
            if t.transmission.wavelength_um() != wavelength_um {
                return Err(Error::InvalidParameter(format!(
                    "target wavelength {} um differs from photon wavelength {} um",
                    t.transmission.wavelength_um(),
                    wavelength_um
                )));
            }
            if t.grid() != g0 {
                return Err(Error::GridMismatch("all scene targets must share one grid".into()));
            }
        }
        if let Illumination::Gaussian { waist_um } = options.illumination {
            if !(waist_um > 0.0) {
                return Err(Error::InvalidParameter("illumination waist must be > 0".into()));
            }
        }
        let prepared = match (options.placement, options.model) {
            (Placement::FourierPlane { focal_um }, _) => {
                if sc.targets.len() != 1 {
                    return Err(Error::InvalidParameter("Fourier-plane placement takes one target".into()));
                }
                if !(focal_um.is_finite() && focal_um != 0.0) {
                    return Err(Error::InvalidParameter("Fourier lens focal length must be non-zero".into()));
                }
                Prepared::Fourier { focal_um }
            }
            (Placement::Defocus, InteractionModel::Ray) => Prepared::Ray,
            (Placement::Defocus, InteractionModel::Wave) => {
                if !(options.bin_pitch_per_um > 0.0) {
                    return Err(Error::InvalidParameter("momentum bin pitch must be > 0".into()));
                }
                if sc.targets.len() == 1 && options.tilt == TiltModel::ShiftTheorem {
                    let t = &sc.targets[0];
                    let d = -t.z_offset_um;
                    let field = crate::field::propagate(&t.transmission, d)?;
                    let density: Vec<f64> = field.values().iter().map(|v| v.norm_sqr()).collect();
                    Prepared::WaveShift {
                        sampler: PixelSampler::new(&density),
                        throughput: t.mean_intensity(),
                        d,
                    }
                } else if sc.targets.len() == 1 {
                    let t = &sc.targets[0];
                    Prepared::WaveBinned {
                        spectra: Vec::new(),
                        exact: Some((t.transmission.clone(), -t.z_offset_um)),
                    }
                } else {
                    let mut spectra = Vec::new();
                    for t in &sc.targets {
                        let d = -t.z_offset_um;
                        let (w, h) = (t.transmission.width(), t.transmission.height());
                        let mut s: Vec<Complex64> =
                            t.transmission.values().iter().map(|v| v - Complex64::new(1.0, 0.0)).collect();
                        Fft2::new(w, h).forward(&mut s);
                        let grid = SpatialFrequencyGrid::for_field(&t.transmission);
                        for (v, hh) in s.iter_mut().zip(grid.transfer(d, true)) {
                            *v *= hh;
                        }
                        spectra.push((d, s));
                    }
                    Prepared::WaveBinned { spectra, exact: None }
                }
            }
        };
        Ok(SceneInteraction {
            scene: Some(sc),
            options,
            grid: Some(g0),
            k,
            prepared,
        })
    }

    pub fn grid(&self) -> Option<GridSpec> {
        self.grid
    }

    fn envelope(&self, x: f64, y: f64) -> f64 {
        match self.options.illumination {
            Illumination::Uniform => 1.0,
            Illumination::Gaussian { waist_um } => {
                let c = self.grid.map(|g| g.center_um).unwrap_or([0.0, 0.0]);
                (-2.0 * ((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (waist_um * waist_um)).exp()
            }
        }
    }

    /// Sample-plane detection position for each signal ray, or `None` when blocked.
    ///
    /// `positions` are focal-plane positions (µm), `k_perp` the signal transverse
    /// wavenumbers in the sample-plane frame.
    pub fn interact(&self, positions: &[[f64; 2]], k_perp: &[[f64; 2]], seed: u64) -> Result<Vec<Detected>> {
        if positions.len() != k_perp.len() {
            return Err(Error::InvalidParameter("positions and momenta differ in length".into()));
        }
        if positions.is_empty() {
            return Err(Error::Empty("photon batch".into()));
        }
        let mut rng = stream_rng(seed, crate::rng::streams::SCENE, 0);
        let out = match &self.prepared {
            Prepared::Empty => positions
                .iter()
                .map(|p| self.accept_envelope(*p, &mut rng))
                .collect(),
            Prepared::Ray => {
                let targets = &self.scene.as_ref().unwrap().targets;
                positions
                    .iter()
                    .zip(k_perp)
                    .map(|(p, kp)| {
                        let s = slope_from_k(*kp, self.k);
                        let mut survive = 1.0;
                        for t in targets {
                            let z = t.z_offset_um;
                            survive *= t.intensity_at(p[0] + s[0] * z, p[1] + s[1] * z);
                        }
                        if rng.random::<f64>() < survive {
                            self.accept_envelope(*p, &mut rng)
                        } else {
                            None
                        }
                    })
                    .collect()
            }
            Prepared::Fourier { focal_um } => {
                let t = &self.scene.as_ref().unwrap().targets[0];
                positions
                    .iter()
                    .zip(k_perp)
                    .map(|(p, kp)| {
                        let s = slope_from_k(*kp, self.k);
                        let survive = t.intensity_at(focal_um * s[0], focal_um * s[1]);
                        if rng.random::<f64>() < survive {
                            self.accept_envelope(*p, &mut rng)
                        } else {
                            None
                        }
                    })
                    .collect()
            }
            Prepared::WaveShift { sampler, throughput, d } => {
                let g = self.grid.unwrap();
                positions
                    .iter()
                    .zip(k_perp)
                    .map(|(_, kp)| {
                        let sampler = sampler.as_ref()?;
                        if !(rng.random::<f64>() < *throughput) {
                            return None;
                        }
                        let s = slope_from_k(*kp, self.k);
                        let pos = draw_on_grid(&g, sampler, &mut rng);
                        self.accept_envelope([pos[0] + s[0] * d, pos[1] + s[1] * d], &mut rng)
                    })
                    .collect()
            }
            Prepared::WaveBinned { spectra, exact } => self.interact_binned(spectra, exact.as_ref(), k_perp, seed)?,
        };
        Ok(out)
    }

    fn accept_envelope<R: Rng>(&self, p: [f64; 2], rng: &mut R) -> Detected {
        match self.options.illumination {
            Illumination::Uniform => Some(p),
            Illumination::Gaussian { .. } => (rng.random::<f64>() < self.envelope(p[0], p[1])).then_some(p),
        }
    }

    fn interact_binned(
        &self,
        spectra: &[(f64, Vec<Complex64>)],
        exact: Option<&(ComplexField, f64)>,
        k_perp: &[[f64; 2]],
        seed: u64,
    ) -> Result<Vec<Detected>> {
        let g = self.grid.unwrap();
        let (w, h) = (g.width, g.height);
        // exact mode bins on the FFT grid so the tilted field stays periodic
        let pitch_k = match exact {
            Some(_) => 2.0 * PI / (w.max(h) as f64 * g.pitch_um),
            None => self.options.bin_pitch_per_um,
        };
        let mut bins: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, kp) in k_perp.iter().enumerate() {
            let key = ((kp[0] / pitch_k).round() as i64, (kp[1] / pitch_k).round() as i64);
            bins.entry(key).or_default().push(i);
        }
        let freq = SpatialFrequencyGrid::new(w, h, g.pitch_um, spectra.first().map_or(exact.map_or(1.0, |e| e.0.wavelength_um()), |_| 2.0 * PI / self.k));
        let bins: Vec<((i64, i64), Vec<usize>)> = bins.into_iter().collect();
        let results: Vec<Vec<(usize, Detected)>> = bins
            .par_iter()
            .map(|(key, idx)| {
                let mut rng = stream_rng(seed, crate::rng::streams::SCENE, 1 + (key.0 as u64).wrapping_mul(1_000_003) ^ (key.1 as u64));
                let kb = [key.0 as f64 * pitch_k, key.1 as f64 * pitch_k];
                let sb = slope_from_k(kb, self.k);
                let fft = Fft2::new(w, h);
                let density: Vec<f64> = match exact {
                    Some((t, d)) => {
                        let tilted = ComplexField::from_fn(w, h, g.pitch_um, t.wavelength_um(), |x, y| {
                            t.get(x, y) * Complex64::from_polar(1.0, kb[0] * x as f64 * g.pitch_um + kb[1] * y as f64 * g.pitch_um)
                        })
                        .expect("same grid");
                        let prop = Propagator::for_field(&tilted, *d).expect("finite distance");
                        let mut v = tilted.into_values();
                        prop.apply_in_place(&mut v);
                        v.iter().map(|c| c.norm_sqr()).collect()
                    }
                    None => {
                        let mut acc = vec![Complex64::new(0.0, 0.0); w * h];
                        for (d, s) in spectra {
                            let (dx, dy) = (sb[0] * d, sb[1] * d);
                            for iy in 0..h {
                                let py = Complex64::from_polar(1.0, -freq.ky[iy] * dy);
                                for ix in 0..w {
                                    let ph = Complex64::from_polar(1.0, -freq.kx[ix] * dx) * py;
                                    acc[iy * w + ix] += s[iy * w + ix] * ph;
                                }
                            }
                        }
                        fft.inverse(&mut acc);
                        acc.iter().map(|c| (c + Complex64::new(1.0, 0.0)).norm_sqr()).collect()
                    }
                };
                let throughput = (density.iter().sum::<f64>() / density.len() as f64).min(1.0);
                let sampler = PixelSampler::new(&density);
                idx.iter()
                    .map(|&i| {
                        let Some(sampler) = sampler.as_ref() else {
                            return (i, None);
                        };
                        if !(rng.random::<f64>() < throughput) {
                            return (i, None);
                        }
                        let mut pos = draw_on_grid(&g, sampler, &mut rng);
                        if let Some((_, d)) = exact {
                            // residual tilt within the bin
                            let s = slope_from_k(k_perp[i], self.k);
                            pos[0] += (s[0] - sb[0]) * d;
                            pos[1] += (s[1] - sb[1]) * d;
                        }
                        (i, self.accept_envelope(pos, &mut rng))
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![None; k_perp.len()];
        for r in results {
            for (i, d) in r {
                out[i] = d;
            }
        }
        Ok(out)
    }
}

fn draw_on_grid<R: Rng>(g: &GridSpec, sampler: &PixelSampler, rng: &mut R) -> [f64; 2] {
    let i = sampler.sample(rng);
    let (ix, iy) = (i % g.width, i / g.width);
    [
        g.x_um(ix as f64 + rng.random::<f64>() - 0.5),
        g.y_um(iy as f64 + rng.random::<f64>() - 0.5),
    ]
}
