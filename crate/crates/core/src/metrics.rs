//! Resolution and depth-of-field metrics.

use crate::coincidence::CoincidenceRecord;
use crate::error::{Error, Result};
use crate::image::{median, GridSpec, Image};
use crate::scene::{Fiber, Polarity, Rect, UsafChart, UsafElement};
use crate::volumetric::{refocus_slice, SweepOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default contrast threshold for calling an element resolved.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofParams {
    pub refractive_index: f64,
    pub wavelength_um: f64,
    pub na: f64,
    pub magnification: f64,
    pub resolved_um: f64,
}

/// Conventional microscope depth of field: n·λ/NA² + n·e/(M·NA).
pub fn conventional_dof(p: &DofParams) -> Result<f64> {
    if p.na == 0.0 {
        return Err(Error::InvalidParameter("NA must be non-zero".into()));
    }
    if !(p.na > 0.0 && p.na <= 1.0) {
        return Err(Error::InvalidParameter(format!("NA {} outside (0, 1]", p.na)));
    }
    if !(p.magnification > 0.0) || !(p.refractive_index >= 1.0) || !(p.wavelength_um > 0.0) || !(p.resolved_um >= 0.0) {
        return Err(Error::InvalidParameter("DOF parameters out of range".into()));
    }
    let n = p.refractive_index;
    Ok(n * p.wavelength_um / (p.na * p.na) + n * p.resolved_um / (p.magnification * p.na))
}

fn pixels_in<'a>(grid: &'a GridSpec, inside: impl Fn(f64, f64) -> bool + 'a) -> Vec<usize> {
    let mut out = Vec::new();
    for iy in 0..grid.height {
        let y = grid.y_um(iy as f64);
        for ix in 0..grid.width {
            if inside(grid.x_um(ix as f64), y) {
                out.push(iy * grid.width + ix);
            }
        }
    }
    out
}

fn rect_pixels(grid: &GridSpec, rects: &[Rect]) -> Vec<usize> {
    pixels_in(grid, |x, y| rects.iter().any(|r| r.contains(x, y)))
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Background-subtracted contrast (mean_F D − mean_R D)/(mean_F D + mean_R D)
/// with D = max(sign·(I − b), 0), clamped to [0, 1].
pub fn contrast_from_d(feature: &[f64], reference: &[f64]) -> f64 {
    let (f, r) = (mean_of(feature), mean_of(reference));
    if !(f + r > 0.0) {
        return 0.0;
    }
    ((f - r) / (f + r)).clamp(0.0, 1.0)
}

fn d_values(image: &Image, idx: &[usize], background: f64, sign: f64) -> Vec<f64> {
    idx.iter().map(|&i| (sign * (image.data[i] - background)).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElementScore {
    pub group: i32,
    pub element: u8,
    pub spacing_um: f64,
    pub contrast_vertical: f64,
    pub contrast_horizontal: f64,
    /// Minimum over the two bar orientations.
    pub contrast: f64,
    pub resolved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvabilityReport {
    pub z_um: Option<f64>,
    pub threshold: f64,
    pub elements: Vec<ElementScore>,
    pub skipped: Vec<String>,
    /// Pooled bar-versus-gap contrast per group.
    pub group_contrast: Vec<(i32, f64)>,
    /// Finest spacing reached before the first unresolved element (coarse to fine).
    pub smallest_resolved_um: Option<f64>,
}

struct ElementPixels {
    v_bars: Vec<usize>,
    v_gaps: Vec<usize>,
    h_bars: Vec<usize>,
    h_gaps: Vec<usize>,
    background: f64,
}

fn element_pixels(image: &Image, grid: &GridSpec, e: &UsafElement) -> Option<ElementPixels> {
    let w = e.bar_width_um;
    let outer = e.bbox.grow(1.5 * w);
    let inner = e.bbox.grow(0.5 * w);
    let (gx0, gx1) = (grid.x_um(-0.5), grid.x_um(grid.width as f64 - 0.5));
    let (gy0, gy1) = (grid.y_um(-0.5), grid.y_um(grid.height as f64 - 0.5));
    if outer.x0 < gx0 || outer.y0 < gy0 || outer.x1 > gx1 || outer.y1 > gy1 {
        return None;
    }
    let ring = pixels_in(grid, |x, y| outer.contains(x, y) && !inner.contains(x, y));
    let p = ElementPixels {
        v_bars: rect_pixels(grid, &e.vertical_bars),
        v_gaps: rect_pixels(grid, &e.vertical_gaps),
        h_bars: rect_pixels(grid, &e.horizontal_bars),
        h_gaps: rect_pixels(grid, &e.horizontal_gaps),
        background: median(&ring.iter().map(|&i| image.data[i]).collect::<Vec<_>>()),
    };
    let empty = [&p.v_bars, &p.v_gaps, &p.h_bars, &p.h_gaps].iter().any(|v| v.is_empty()) || ring.is_empty();
    (!empty).then_some(p)
}

/// Scores every chart element on an image registered to `grid`.
pub fn resolvability(image: &Image, grid: &GridSpec, chart: &UsafChart, threshold: f64) -> Result<ResolvabilityReport> {
    if image.width != grid.width || image.height != grid.height {
        return Err(Error::GridMismatch("image and grid sizes differ".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter("threshold must lie in (0, 1]".into()));
    }
    let sign = match chart.polarity {
        Polarity::ClearBars => 1.0,
        Polarity::OpaqueBars => -1.0,
    };
    let mut elements = Vec::new();
    let mut skipped = Vec::new();
    let mut pooled: Vec<(i32, Vec<f64>, Vec<f64>)> = Vec::new();
    for e in &chart.elements {
        let Some(p) = element_pixels(image, grid, e) else {
            skipped.push(format!("group {} element {} outside the field of view", e.group, e.element));
            continue;
        };
        let d = |idx: &[usize]| d_values(image, idx, p.background, sign);
        let (vb, vg, hb, hg) = (d(&p.v_bars), d(&p.v_gaps), d(&p.h_bars), d(&p.h_gaps));
        let cv = contrast_from_d(&vb, &vg);
        let ch = contrast_from_d(&hb, &hg);
        let c = cv.min(ch);
        elements.push(ElementScore {
            group: e.group,
            element: e.element,
            spacing_um: e.spacing_um,
            contrast_vertical: cv,
            contrast_horizontal: ch,
            contrast: c,
            resolved: c >= threshold,
        });
        let slot = match pooled.iter().position(|(g, _, _)| *g == e.group) {
            Some(i) => i,
            None => {
                pooled.push((e.group, Vec::new(), Vec::new()));
                pooled.len() - 1
            }
        };
        pooled[slot].1.extend(vb.iter().chain(&hb));
        pooled[slot].2.extend(vg.iter().chain(&hg));
    }
    let group_contrast = pooled.iter().map(|(g, f, r)| (*g, contrast_from_d(f, r))).collect();
    let mut order: Vec<&ElementScore> = elements.iter().collect();
    order.sort_by(|a, b| b.spacing_um.total_cmp(&a.spacing_um));
    let mut smallest = None;
    for e in order {
        if !e.resolved {
            break;
        }
        smallest = Some(e.spacing_um);
    }
    Ok(ResolvabilityReport {
        z_um: None,
        threshold,
        elements,
        skipped,
        group_contrast,
        smallest_resolved_um: smallest,
    })
}

/// CSV rows `z_um,group,element,spacing_um,contrast,resolved`.
pub fn report_csv(reports: &[ResolvabilityReport]) -> String {
    let mut s = String::from("z_um,group,element,spacing_um,contrast,resolved\n");
    for r in reports {
        let z = r.z_um.map_or(String::from("nan"), |z| format!("{z}"));
        for e in &r.elements {
            s.push_str(&format!(
                "{z},{},{},{:.4},{:.6},{}\n",
                e.group, e.element, e.spacing_um, e.contrast, e.resolved
            ));
        }
    }
    s
}

/// Contrast of a dark fiber: core (within the radius) against the ring at
/// one to three diameters from the axis; background = median of the band at
/// three to six diameters.
pub fn fiber_contrast(image: &Image, grid: &GridSpec, fiber: &Fiber, exclude: &[Fiber]) -> Result<f64> {
    let w = fiber.diameter_um;
    let clear = |x: f64, y: f64| !exclude.iter().any(|o| o.distance_um(x, y) <= 3.0 * o.diameter_um);
    let core = pixels_in(grid, |x, y| fiber.covers(x, y) && clear(x, y));
    let ring = pixels_in(grid, |x, y| {
        let d = fiber.distance_um(x, y);
        d >= w && d <= 3.0 * w && clear(x, y)
    });
    let band = pixels_in(grid, |x, y| {
        let d = fiber.distance_um(x, y);
        d > 3.0 * w && d <= 6.0 * w && clear(x, y)
    });
    if core.is_empty() || ring.is_empty() || band.is_empty() {
        return Err(Error::Empty("fiber not on the grid".into()));
    }
    let b = median(&band.iter().map(|&i| image.data[i]).collect::<Vec<_>>());
    Ok(contrast_from_d(&d_values(image, &core, b, -1.0), &d_values(image, &ring, b, -1.0)))
}

/// Smallest resolved spacing versus depth; `f64::INFINITY` where nothing resolves.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DofCurve {
    pub z_um: Vec<f64>,
    pub smallest_um: Vec<f64>,
}

fn median3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            if i == 0 || i + 1 == v.len() {
                v[i]
            } else {
                let mut w = [v[i - 1], v[i], v[i + 1]];
                w.sort_by(f64::total_cmp);
                w[1]
            }
        })
        .collect()
}

impl DofCurve {
    pub fn from_reports(reports: &[ResolvabilityReport]) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = reports
            .iter()
            .map(|r| {
                let z = r.z_um.ok_or_else(|| Error::InvalidParameter("report without depth".into()))?;
                Ok((z, r.smallest_resolved_um.unwrap_or(f64::INFINITY)))
            })
            .collect::<Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(DofCurve {
            z_um: pts.iter().map(|p| p.0).collect(),
            smallest_um: pts.iter().map(|p| p.1).collect(),
        })
    }

    /// One side of the curve ordered by increasing |z|, z = 0 excluded.
    pub fn side(&self, positive: bool) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self
            .z_um
            .iter()
            .zip(&self.smallest_um)
            .filter(|(z, _)| if positive { **z > 0.0 } else { **z < 0.0 })
            .map(|(z, s)| (*z, *s))
            .collect();
        v.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
        v
    }

    /// Each side, median-filtered (window 3), is non-decreasing in |z|.
    pub fn is_monotone_in_abs_z(&self) -> bool {
        [true, false].iter().all(|&pos| {
            let s: Vec<f64> = self.side(pos).iter().map(|p| p.1).collect();
            median3(&s).windows(2).all(|w| w[1] >= w[0])
        })
    }

    /// (|z|, value at −|z|, value at +|z|) for depths present on both sides.
    pub fn symmetric_pairs(&self) -> Vec<(f64, f64, f64)> {
        let neg = self.side(false);
        self.side(true)
            .into_iter()
            .filter_map(|(z, s)| neg.iter().find(|(zn, _)| (zn + z).abs() < 1e-9).map(|(_, sn)| (z, *sn, s)))
            .collect()
    }

    pub fn at(&self, z: f64) -> Option<f64> {
        self.z_um.iter().position(|v| (v - z).abs() < 1e-9).map(|i| self.smallest_um[i])
    }
}

/// Refocus (and retrieve) at every depth and score the chart.
pub fn dof_curve(
    records: &[CoincidenceRecord],
    depths: &[f64],
    grid: &GridSpec,
    wavelength_um: f64,
    chart: &UsafChart,
    threshold: f64,
    opts: &SweepOptions,
) -> Result<(DofCurve, Vec<ResolvabilityReport>)> {
    if depths.is_empty() {
        return Err(Error::Empty("no depths".into()));
    }
    let reports: Vec<ResolvabilityReport> = depths
        .par_iter()
        .map(|&z| {
            let slice = refocus_slice(records, z, grid, wavelength_um, opts)?;
            let mut r = resolvability(&slice.amplitude, grid, chart, threshold)?;
            r.z_um = Some(z);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok((DofCurve::from_reports(&reports)?, reports))
}
