//! Focal-stack sweep, all-in-focus composite and depth map.

use crate::coincidence::CoincidenceRecord;
use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::image::{median, GridSpec, Image};
use crate::io;
use crate::refocus::{gs_retrieve, ray_trace_refocus, RefocusOptions, RetrievalOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct StackSlice {
    pub z_um: f64,
    pub amplitude: Image,
    pub field: Option<ComplexField>,
    pub error_trace: Vec<f64>,
}

/// Refocused slices at strictly increasing depths on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStack {
    pub grid: GridSpec,
    pub slices: Vec<StackSlice>,
}

impl FocalStack {
    pub fn new(grid: GridSpec, slices: Vec<StackSlice>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Empty("focal stack".into()));
        }
        for w in slices.windows(2) {
            if !(w[1].z_um > w[0].z_um) {
                return Err(Error::InvalidParameter("stack depths must be strictly increasing".into()));
            }
        }
        for s in &slices {
            if s.amplitude.width != grid.width || s.amplitude.height != grid.height {
                return Err(Error::GridMismatch(format!("slice at z = {} um", s.z_um)));
            }
        }
        Ok(FocalStack { grid, slices })
    }

    /// Stack from plain images, for externally produced slices.
    pub fn from_images(grid: GridSpec, slices: Vec<(f64, Image)>) -> Result<Self> {
        Self::new(
            grid,
            slices
                .into_iter()
                .map(|(z_um, amplitude)| StackSlice {
                    z_um,
                    amplitude,
                    field: None,
                    error_trace: Vec::new(),
                })
                .collect(),
        )
    }

    pub fn depths(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.z_um).collect()
    }
}

/// Depths z_min, z_min + step, … up to z_max (inclusive within 1e-9 step).
pub fn sweep_depths(z_min_um: f64, z_max_um: f64, z_step_um: f64) -> Result<Vec<f64>> {
    if ![z_min_um, z_max_um, z_step_um].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sweep range".into()));
    }
    if !(z_step_um > 0.0) {
        return Err(Error::InvalidParameter("z step must be > 0".into()));
    }
    if z_min_um > z_max_um {
        return Err(Error::InvalidParameter("z_min must not exceed z_max".into()));
    }
    let n = ((z_max_um - z_min_um) / z_step_um + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| z_min_um + i as f64 * z_step_um).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub refocus: RefocusOptions,
    pub retrieval: RetrievalOptions,
    /// Skip retrieval and keep the ray-traced amplitude.
    pub ray_trace_only: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            refocus: RefocusOptions::default(),
            retrieval: RetrievalOptions::default(),
            ray_trace_only: false,
        }
    }
}

/// One refocus + retrieval per depth, slices computed concurrently.
pub fn sweep(
    records: &[CoincidenceRecord],
    depths: &[f64],
    grid: &GridSpec,
    wavelength_um: f64,
    opts: &SweepOptions,
) -> Result<FocalStack> {
    if depths.is_empty() {
        return Err(Error::Empty("no sweep depths".into()));
    }
    let slices: Result<Vec<StackSlice>> = depths
        .par_iter()
        .map(|&z| refocus_slice(records, z, grid, wavelength_um, opts))
        .collect();
    FocalStack::new(*grid, slices?)
}

pub fn refocus_slice(
    records: &[CoincidenceRecord],
    z_um: f64,
    grid: &GridSpec,
    wavelength_um: f64,
    opts: &SweepOptions,
) -> Result<StackSlice> {
    let shifted = ray_trace_refocus(records, z_um, grid, wavelength_um, &opts.refocus)?;
    if opts.ray_trace_only {
        return Ok(StackSlice {
            z_um,
            amplitude: shifted.amplitude,
            field: None,
            error_trace: Vec::new(),
        });
    }
    let r = gs_retrieve(&shifted, None, wavelength_um, &opts.retrieval)?;
    Ok(StackSlice {
        z_um,
        amplitude: r.field.amplitude(),
        field: Some(r.field),
        error_trace: r.error_trace,
    })
}

/// Pixel-wise sum of slice amplitudes: (full-precision sum, [0,1] preview).
pub fn all_in_focus(stack: &FocalStack) -> Result<(Image, Image)> {
    let first = &stack.slices.first().ok_or_else(|| Error::Empty("focal stack".into()))?.amplitude;
    let mut sum = Image::zeros(first.width, first.height, first.pitch_um);
    for s in &stack.slices {
        for (a, b) in sum.data.iter_mut().zip(&s.amplitude.data) {
            *a += b;
        }
    }
    let preview = sum.normalized();
    Ok((sum, preview))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpnessMetric {
    LocalVariance,
    ModifiedLaplacian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthOptions {
    pub metric: SharpnessMetric,
    pub window_px: usize,
    /// Mask pixels whose peak score ≤ median + mad_k·MAD of all peak scores.
    pub mad_k: f64,
}

impl Default for DepthOptions {
    fn default() -> Self {
        DepthOptions {
            metric: SharpnessMetric::LocalVariance,
            window_px: 9,
            mad_k: 2.0,
        }
    }
}

fn box_mean(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    // summed-area table with windows clipped at the border
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((x1 - x0) * (y1 - y0)) as f64;
        }
    }
    out
}

/// Per-pixel sharpness score of one slice.
pub fn sharpness(image: &Image, opts: &DepthOptions) -> Result<Image> {
    if opts.window_px == 0 || opts.window_px % 2 == 0 {
        return Err(Error::InvalidParameter("sharpness window must be odd and >= 1".into()));
    }
    let (w, h) = (image.width, image.height);
    let r = opts.window_px / 2;
    let data = match opts.metric {
        SharpnessMetric::LocalVariance => {
            let m = box_mean(&image.data, w, h, r);
            let sq: Vec<f64> = image.data.iter().map(|v| v * v).collect();
            let m2 = box_mean(&sq, w, h, r);
            m.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0)).collect()
        }
        SharpnessMetric::ModifiedLaplacian => {
            let at = |x: isize, y: isize| image.data[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
            let ml: Vec<f64> = (0..h as isize)
                .flat_map(|y| (0..w as isize).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let c = 2.0 * at(x, y);
                    (c - at(x - 1, y) - at(x + 1, y)).abs() + (c - at(x, y - 1) - at(x, y + 1)).abs()
                })
                .collect();
            box_mean(&ml, w, h, r)
        }
    };
    Image::from_data(w, h, image.pitch_um, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    /// Depth per pixel in µm; NaN where masked.
    pub depth: Image,
    pub confidence: Image,
    /// true = background
    pub mask: Vec<bool>,
    pub depths: Vec<f64>,
}

impl DepthMap {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }
}

/// Shape-from-focus depth estimate over a focal stack.
pub fn depth_map(stack: &FocalStack, opts: &DepthOptions) -> Result<DepthMap> {
    if stack.slices.len() < 2 {
        return Err(Error::InvalidParameter("depth map needs at least two slices".into()));
    }
    let scores: Vec<Image> = stack
        .slices
        .par_iter()
        .map(|s| sharpness(&s.amplitude, opts))
        .collect::<Result<_>>()?;
    let depths = stack.depths();
    // slice visiting order: smallest |z| first so ties resolve toward focus
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].abs().total_cmp(&depths[b].abs()).then(depths[a].total_cmp(&depths[b])));
    let first = &stack.slices[0].amplitude;
    let n = first.data.len();
    let mut depth = vec![f64::NAN; n];
    let mut conf = vec![0.0; n];
    let mut peaks = vec![0.0; n];
    let mut column = vec![0.0; depths.len()];
    for p in 0..n {
        for (i, s) in scores.iter().enumerate() {
            column[i] = s.data[p];
        }
        let mut best = order[0];
        for &i in &order[1..] {
            if column[i] > column[best] {
                best = i;
            }
        }
        peaks[p] = column[best];
        depth[p] = depths[best];
        conf[p] = column[best] - median(&column);
    }
    let med = median(&peaks);
    let dev: Vec<f64> = peaks.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&dev);
    let thresh = med + opts.mad_k * mad;
    let mask: Vec<bool> = peaks.iter().map(|&v| v <= thresh).collect();
    for (d, &m) in depth.iter_mut().zip(&mask) {
        if m {
            *d = f64::NAN;
        }
    }
    Ok(DepthMap {
        depth: Image::from_data(first.width, first.height, first.pitch_um, depth)?,
        confidence: Image::from_data(first.width, first.height, first.pitch_um, conf)?,
        mask,
        depths,
    })
}

/// Blue (most negative z) to red (most positive z); masked pixels black.
pub fn depth_preview_rgb(map: &DepthMap) -> Vec<[u8; 3]> {
    let zmin = map.depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let zmax = map.depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (zmax - zmin).max(f64::MIN_POSITIVE);
    map.depth
        .data
        .iter()
        .map(|&z| {
            if z.is_nan() {
                return [0, 0, 0];
            }
            let t = ((z - zmin) / span).clamp(0.0, 1.0);
            let r = (255.0 * t).round() as u8;
            let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
            let b = (255.0 * (1.0 - t)).round() as u8;
            [r, g, b]
        })
        .collect()
}

/// Writes slice_NNN.fld1/.pgm plus index.json mapping z to file names.
pub fn export_stack(dir: &Path, stack: &FocalStack, wavelength_um: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = serde_json::Map::new();
    for (i, s) in stack.slices.iter().enumerate() {
        let name = format!("slice_{i:03}.fld1");
        let field = match &s.field {
            Some(f) => f.clone(),
            None => ComplexField::from_image(&s.amplitude, wavelength_um)?,
        };
        io::write_fld1(&dir.join(&name), &field)?;
        io::write_pgm(&dir.join(format!("slice_{i:03}.pgm")), &s.amplitude)?;
        index.insert(format!("{}", s.z_um), serde_json::Value::String(name));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(index)).expect("serializable");
    io::write_text(&dir.join("index.json"), &(text + "\n"))
}

/// Writes depth.dpt1 and depth.ppm.
pub fn export_depth(dir: &Path, map: &DepthMap, wavelength_um: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_atomic(&dir.join("depth.dpt1"), &io::encode_dpt1(&map.depth, wavelength_um))?;
    io::write_atomic(
        &dir.join("depth.ppm"),
        &io::encode_ppm(map.depth.width, map.depth.height, &depth_preview_rgb(map)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image {
        Image::from_data(w, w, 1.0, (0..w * w).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    fn stripes(w: usize) -> Image {
        img(w, |x, _| if (x / 3) % 2 == 0 { 1.0 } else { 0.2 })
    }

    #[test]
    fn depth_ranges() {
        assert_eq!(sweep_depths(-1500.0, 1500.0, 100.0).unwrap().len(), 31);
        assert_eq!(sweep_depths(5.0, 5.0, 1.0).unwrap(), vec![5.0]);
        assert!(sweep_depths(5.0, 4.0, 1.0).is_err());
        assert!(sweep_depths(0.0, 4.0, 0.0).is_err());
    }

    #[test]
    fn all_in_focus_sums() {
        let g = GridSpec::new(16, 16, 1.0);
        let a = stripes(16);
        let stack = FocalStack::from_images(g, vec![(-1.0, a.clone()), (0.0, a.clone()), (1.0, a.clone())]).unwrap();
        let (sum, preview) = all_in_focus(&stack).unwrap();
        for (s, v) in sum.data.iter().zip(&a.data) {
            assert!((s - 3.0 * v).abs() < 1e-12);
        }
        assert!((preview.max() - 1.0).abs() < 1e-12);
        let one = FocalStack::from_images(g, vec![(0.0, a.clone())]).unwrap();
        assert_eq!(all_in_focus(&one).unwrap().0, a);
        assert!(FocalStack::from_images(g, vec![(1.0, a.clone()), (0.0, a)]).is_err());
    }

    #[test]
    fn single_sharp_slice_wins() {
        let g = GridSpec::new(32, 32, 1.0);
        let sharp = stripes(32);
        let blurred = sharp.gaussian_blur(3.0);
        let stack = FocalStack::from_images(
            g,
            vec![(-200.0, blurred.clone()), (100.0, sharp), (300.0, blurred)],
        )
        .unwrap();
        let d = depth_map(&stack, &DepthOptions::default()).unwrap();
        for (z, m) in d.depth.data.iter().zip(&d.mask) {
            if !m {
                assert_eq!(*z, 100.0);
            }
        }
    }

    #[test]
    fn uniform_scene_fully_masked_and_ties_prefer_focus() {
        let g = GridSpec::new(16, 16, 1.0);
        let flat = img(16, |_, _| 0.5);
        let stack = FocalStack::from_images(g, vec![(-100.0, flat.clone()), (50.0, flat.clone()), (200.0, flat)]).unwrap();
        let d = depth_map(&stack, &DepthOptions::default()).unwrap();
        assert!(d.mask.iter().all(|&m| m));
        assert_eq!(d.foreground_fraction(), 0.0);
        assert!(depth_map(&FocalStack::from_images(g, vec![(0.0, stripes(16))]).unwrap(), &DepthOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn depth_map_invariant_under_scaling(c in 0.01f64..100.0, seed in 0u64..100) {
            use rand::Rng;
            let mut rng = crate::rng::stream_rng(seed, 0, 0);
            let g = GridSpec::new(24, 24, 1.0);
            let slices: Vec<(f64, Image)> = (0..4)
                .map(|i| (i as f64 * 10.0 - 15.0, img(24, |_, _| rng.random::<f64>())))
                .collect();
            let scaled: Vec<(f64, Image)> = slices.iter().map(|(z, im)| (*z, im.map(|v| v * c))).collect();
            let a = depth_map(&FocalStack::from_images(g, slices).unwrap(), &DepthOptions::default()).unwrap();
            let b = depth_map(&FocalStack::from_images(g, scaled).unwrap(), &DepthOptions::default()).unwrap();
            prop_assert_eq!(a.mask, b.mask);
            for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
                prop_assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }
    }

    #[test]
    fn modified_laplacian_prefers_sharp() {
        let opts = DepthOptions { metric: SharpnessMetric::ModifiedLaplacian, ..Default::default() };
        let sharp = stripes(32);
        let a = sharpness(&sharp, &opts).unwrap().sum();
        let b = sharpness(&sharp.gaussian_blur(2.0), &opts).unwrap().sum();
        assert!(a > b);
        assert!(sharpness(&sharp, &DepthOptions { window_px: 4, ..opts }).is_err());
    }

    #[test]
    fn export_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(8, 8, 1.0);
        let stack = FocalStack::from_images(g, vec![(-10.0, stripes(8)), (10.0, stripes(8))]).unwrap();
        export_stack(dir.path(), &stack, 0.81).unwrap();
        let idx: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
        assert_eq!(idx["-10"], "slice_000.fld1");
        assert!(dir.path().join("slice_001.pgm").exists());
        let d = depth_map(&stack, &DepthOptions::default()).unwrap();
        export_depth(dir.path(), &d, 0.81).unwrap();
        let (back, _) = io::decode_dpt1(&std::fs::read(dir.path().join("depth.dpt1")).unwrap()).unwrap();
        assert_eq!(back.width, 8);
    }
}
