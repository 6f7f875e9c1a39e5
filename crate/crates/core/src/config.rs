//! Experiment configuration (JSON, unit-suffixed keys).
//!
//! Keys starting with `_` are comments and are ignored at any depth; any
//! other unknown key is an error.

use crate::coincidence::{CameraFrame, HistogramOptions, IdlerRegion, PairGeometry, ArmGeometry};
use crate::detector::{CameraParams, ClusterParams};
use crate::error::{Error, Result};
use crate::image::GridSpec;
use crate::metrics::DofParams;
use crate::optics::{compose, Element, OpticalSystem, RayTransferMatrix, DEFAULT_B_THRESHOLD_UM};
use crate::refocus::RefocusOptions;
use crate::scene::{
    fibers_scene, half_plane, random_fibers, Fiber, InteractionOptions, Placement, Polarity, SceneTarget, UsafChart,
    VolumetricScene,
};
use crate::spdc::SourceParams;
use crate::volumetric::DepthOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Signal arm images the crystal onto the sample and camera; idler camera
    /// sits in a Fourier plane.
    Imaging,
    /// Both cameras sit in Fourier planes of the crystal.
    MomentumCalibration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmsConfig {
    /// Crystal plane → sample (objective focal) plane.
    pub signal_to_sample: Vec<Element>,
    /// Sample plane → signal camera.
    pub signal_to_camera: Vec<Element>,
    /// Crystal plane → idler camera (also used for the signal arm in the
    /// momentum-calibration layout).
    pub idler_to_camera: Vec<Element>,
    pub b_threshold_um: f64,
}

impl Default for ArmsConfig {
    fn default() -> Self {
        ArmsConfig {
            signal_to_sample: OpticalSystem::relay_4f(100_000.0, 100_000.0).unwrap().elements().to_vec(),
            signal_to_camera: OpticalSystem::relay_4f(10_000.0, 200_000.0).unwrap().elements().to_vec(),
            idler_to_camera: OpticalSystem::fourier(62_743.0).unwrap().elements().to_vec(),
            b_threshold_um: DEFAULT_B_THRESHOLD_UM,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    TwoCamera,
    SingleCamera,
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn center_px(&self) -> [f64; 2] {
        [(self.x0 + self.x1) as f64 / 2.0 - 0.5, (self.y0 + self.y1) as f64 / 2.0 - 0.5]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub mode: CameraMode,
    /// The signal camera, or the only camera in single-camera mode.
    pub signal_camera: CameraParams,
    /// Two-camera mode only; defaults to a copy of the signal camera.
    pub idler_camera: Option<CameraParams>,
    /// Single-camera mode only: pixels that receive the idler beam.
    pub idler_region: Option<PixelRect>,
    /// Pixel hit by the signal optical axis (default: sensor centre).
    pub signal_axis_px: Option<[f64; 2]>,
    /// Pixel hit by the idler optical axis (default: idler sensor or region centre).
    pub idler_axis_px: Option<[f64; 2]>,
    pub cluster: ClusterParams,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mode: CameraMode::TwoCamera,
            signal_camera: CameraParams::default(),
            idler_camera: None,
            idler_region: None,
            signal_axis_px: None,
            idler_axis_px: None,
            cluster: ClusterParams::default(),
        }
    }
}

impl DetectorConfig {
    pub fn idler_params(&self) -> &CameraParams {
        match self.mode {
            CameraMode::TwoCamera => self.idler_camera.as_ref().unwrap_or(&self.signal_camera),
            CameraMode::SingleCamera => &self.signal_camera,
        }
    }

    pub fn idler_cam_id(&self) -> u8 {
        match self.mode {
            CameraMode::TwoCamera => 1,
            CameraMode::SingleCamera => 0,
        }
    }

    pub fn idler_region(&self) -> IdlerRegion {
        match (self.mode, self.idler_region) {
            (CameraMode::SingleCamera, Some(r)) => IdlerRegion::Pixels {
                cam: 0,
                x0: r.x0,
                y0: r.y0,
                x1: r.x1,
                y1: r.y1,
            },
            _ => IdlerRegion::Camera { cam: 1 },
        }
    }

    pub fn signal_frame(&self) -> CameraFrame {
        let c = &self.signal_camera;
        CameraFrame {
            center_px: self
                .signal_axis_px
                .unwrap_or([(c.width_px as f64 - 1.0) / 2.0, (c.height_px as f64 - 1.0) / 2.0]),
            pitch_um: c.pitch_um,
        }
    }

    pub fn idler_frame(&self) -> CameraFrame {
        let c = self.idler_params();
        let default = match (self.mode, self.idler_region) {
            (CameraMode::SingleCamera, Some(r)) => r.center_px(),
            _ => [(c.width_px as f64 - 1.0) / 2.0, (c.height_px as f64 - 1.0) / 2.0],
        };
        CameraFrame {
            center_px: self.idler_axis_px.unwrap_or(default),
            pitch_um: c.pitch_um,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsafGroup {
    pub group: i32,
    pub elements: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFibers {
    pub n_fibers: usize,
    pub diameter_range_um: [f64; 2],
    pub z_range_um: [f64; 2],
    pub seed: u64,
}

/// Scene descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneConfig {
    Usaf {
        groups: Vec<UsafGroup>,
        polarity: Polarity,
        z_um: f64,
        grid: GridSpec,
    },
    Fibers {
        #[serde(default)]
        fibers: Vec<Fiber>,
        #[serde(default)]
        random: Option<RandomFibers>,
        grid: GridSpec,
    },
    HalfPlane {
        angle_rad: f64,
        offset_um: f64,
        z_um: f64,
        grid: GridSpec,
    },
    /// Complex transmission from an FLD1 file, centred on the axis.
    File { path: PathBuf, z_um: f64 },
}

/// Built scene plus the geometry metrics need.
#[derive(Clone, Debug)]
pub struct BuiltScene {
    pub scene: VolumetricScene,
    pub chart: Option<UsafChart>,
    pub fibers: Vec<Fiber>,
}

impl SceneConfig {
    pub fn build(&self, wavelength_um: f64, base_dir: Option<&Path>) -> Result<BuiltScene> {
        match self {
            SceneConfig::Usaf {
                groups,
                polarity,
                z_um,
                grid,
            } => {
                grid.validate()?;
                let g: Vec<(i32, Vec<u8>)> = groups.iter().map(|g| (g.group, g.elements.clone())).collect();
                let chart = UsafChart::layout(&g, *polarity)?;
                let t = chart.transmission(grid)?;
                let target = SceneTarget::new(
                    crate::field::ComplexField::from_image(&t, wavelength_um)?,
                    grid.center_um,
                    *z_um,
                )?;
                Ok(BuiltScene {
                    scene: VolumetricScene::new(vec![target])?,
                    chart: Some(chart),
                    fibers: Vec::new(),
                })
            }
            SceneConfig::Fibers { fibers, random, grid } => {
                let mut all = fibers.clone();
                if let Some(r) = random {
                    all.extend(random_fibers(r.n_fibers, r.diameter_range_um, r.z_range_um, r.seed, grid)?);
                }
                Ok(BuiltScene {
                    scene: fibers_scene(&all, grid, wavelength_um)?,
                    chart: None,
                    fibers: all,
                })
            }
            SceneConfig::HalfPlane {
                angle_rad,
                offset_um,
                z_um,
                grid,
            } => {
                let mut t = half_plane(grid, *angle_rad, *offset_um, wavelength_um)?;
                t.z_offset_um = *z_um;
                Ok(BuiltScene {
                    scene: VolumetricScene::new(vec![t])?,
                    chart: None,
                    fibers: Vec::new(),
                })
            }
            SceneConfig::File { path, z_um } => {
                let p = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                let field = crate::io::read_fld1(&p)?;
                if (field.wavelength_um() - wavelength_um).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "target file wavelength {} um differs from the photon wavelength {} um",
                        field.wavelength_um(),
                        wavelength_um
                    )));
                }
                Ok(BuiltScene {
                    scene: VolumetricScene::new(vec![SceneTarget::new(field, [0.0, 0.0], *z_um)?])?,
                    chart: None,
                    fibers: Vec::new(),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    /// Sample-plane reconstruction grid.
    pub grid: GridSpec,
    pub gate_ns: f64,
    pub iterations: usize,
    pub residual_threshold: Option<f64>,
    pub z_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    pub z_step_um: f64,
    pub refocus: RefocusOptions,
    pub depth: DepthOptions,
    pub contrast_threshold: f64,
    pub histogram: HistogramOptions,
    /// Idler delay for the accidental-background pairing.
    pub accidental_shift_ns: f64,
    pub subtract_accidentals: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            grid: GridSpec::new(128, 128, 1.0),
            gate_ns: 10.0,
            iterations: 10,
            residual_threshold: None,
            z_um: 0.0,
            z_min_um: -1500.0,
            z_max_um: 1500.0,
            z_step_um: 100.0,
            refocus: RefocusOptions::default(),
            depth: DepthOptions::default(),
            contrast_threshold: crate::metrics::DEFAULT_THRESHOLD,
            histogram: HistogramOptions::default(),
            accidental_shift_ns: 1000.0,
            subtract_accidentals: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub duration_s: f64,
    /// Expected pairs per processing window.
    pub window_pairs: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            duration_s: 1.0,
            window_pairs: 1 << 20,
        }
    }
}

fn default_microscope() -> DofParams {
    DofParams {
        refractive_index: 1.0,
        wavelength_um: 0.81,
        na: 0.45,
        magnification: 20.0,
        resolved_um: 5.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub layout: Layout,
    pub source: SourceParams,
    pub arms: ArmsConfig,
    pub detector: DetectorConfig,
    pub scene: Option<SceneConfig>,
    pub interaction: InteractionOptions,
    pub reconstruction: ReconstructionConfig,
    pub simulation: SimulationConfig,
    pub microscope: DofParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            layout: Layout::Imaging,
            source: SourceParams::default(),
            arms: ArmsConfig::default(),
            detector: DetectorConfig::default(),
            scene: None,
            interaction: InteractionOptions::default(),
            reconstruction: ReconstructionConfig::default(),
            simulation: SimulationConfig::default(),
            microscope: default_microscope(),
        }
    }
}

/// Removes `_`-prefixed keys from every object.
pub fn strip_comments(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !k.starts_with('_'));
            m.values_mut().for_each(strip_comments);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_comments),
        _ => {}
    }
}

fn section<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(path, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        strip_comments(&mut v);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        section("source", self.source.validate())?;
        section("arms.signal_to_sample", compose(&self.arms.signal_to_sample).map(|_| ()))?;
        section("arms.signal_to_camera", compose(&self.arms.signal_to_camera).map(|_| ()))?;
        section("arms.idler_to_camera", compose(&self.arms.idler_to_camera).map(|_| ()))?;
        if !(self.arms.b_threshold_um > 0.0) {
            return Err(Error::config("arms.b_threshold_um", "must be > 0"));
        }
        let m = self.idler_matrix()?;
        if m.b.abs() < self.arms.b_threshold_um {
            return Err(Error::config("arms.idler_to_camera", "idler camera must not sit in an image plane of the crystal"));
        }
        if self.layout == Layout::Imaging {
            let s = self.signal_camera_matrix()?;
            if s.b.abs() >= self.arms.b_threshold_um {
                return Err(Error::config("arms.signal_to_camera", "signal camera must image the crystal in the imaging layout"));
            }
        }
        let d = &self.detector;
        section("detector.signal_camera", d.signal_camera.validate())?;
        match d.mode {
            CameraMode::TwoCamera => {
                if d.idler_region.is_some() {
                    return Err(Error::config("detector.idler_region", "only valid in single_camera mode"));
                }
                if let Some(c) = &d.idler_camera {
                    section("detector.idler_camera", c.validate())?;
                }
            }
            CameraMode::SingleCamera => {
                if d.idler_camera.is_some() {
                    return Err(Error::config("detector.idler_camera", "not used in single_camera mode; remove it"));
                }
                let Some(r) = d.idler_region else {
                    return Err(Error::config("detector.idler_region", "required in single_camera mode"));
                };
                let c = &d.signal_camera;
                if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 as usize > c.width_px || r.y1 as usize > c.height_px {
                    return Err(Error::config("detector.idler_region", "must be a non-empty rectangle on the sensor"));
                }
            }
        }
        if !(d.cluster.window_ns > 0.0) {
            return Err(Error::config("detector.cluster.window_ns", "must be > 0"));
        }
        if self.layout == Layout::MomentumCalibration && self.scene.is_some() {
            return Err(Error::config("scene", "the momentum-calibration layout takes no scene"));
        }
        if let Placement::FourierPlane { focal_um } = self.interaction.placement {
            if !(focal_um.is_finite() && focal_um != 0.0) {
                return Err(Error::config("interaction.placement.focal_um", "must be non-zero"));
            }
        }
        if !(self.interaction.bin_pitch_per_um > 0.0) {
            return Err(Error::config("interaction.bin_pitch_per_um", "must be > 0"));
        }
        let r = &self.reconstruction;
        section("reconstruction.grid", r.grid.validate())?;
        if !(r.gate_ns > 0.0) {
            return Err(Error::config("reconstruction.gate_ns", "must be > 0"));
        }
        if r.iterations == 0 {
            return Err(Error::config("reconstruction.iterations", "must be >= 1"));
        }
        if !(r.z_step_um > 0.0) || r.z_min_um > r.z_max_um {
            return Err(Error::config("reconstruction.z_step_um", "need z_step_um > 0 and z_min_um <= z_max_um"));
        }
        if !(r.contrast_threshold > 0.0 && r.contrast_threshold <= 1.0) {
            return Err(Error::config("reconstruction.contrast_threshold", "must lie in (0, 1]"));
        }
        if !(r.accidental_shift_ns.abs() > r.gate_ns) {
            return Err(Error::config("reconstruction.accidental_shift_ns", "must exceed the gate"));
        }
        if !(self.simulation.duration_s >= 0.0) || self.simulation.window_pairs == 0 {
            return Err(Error::config("simulation", "need duration_s >= 0 and window_pairs >= 1"));
        }
        if let Some(s) = &self.scene {
            match s {
                SceneConfig::Usaf { grid, .. } | SceneConfig::Fibers { grid, .. } | SceneConfig::HalfPlane { grid, .. } => {
                    section("scene.grid", grid.validate())?
                }
                SceneConfig::File { .. } => {}
            }
        }
        Ok(())
    }

    pub fn wavelength_um(&self) -> f64 {
        self.source.pump.photon_wavelength_um()
    }

    pub fn to_sample_matrix(&self) -> Result<RayTransferMatrix> {
        compose(&self.arms.signal_to_sample)
    }

    pub fn idler_matrix(&self) -> Result<RayTransferMatrix> {
        compose(&self.arms.idler_to_camera)
    }

    /// Crystal → signal camera.
    pub fn signal_camera_matrix(&self) -> Result<RayTransferMatrix> {
        match self.layout {
            Layout::Imaging => Ok(compose(&self.arms.signal_to_camera)? * compose(&self.arms.signal_to_sample)?),
            Layout::MomentumCalibration => self.idler_matrix(),
        }
    }

    pub fn pair_geometry(&self) -> Result<PairGeometry> {
        Ok(PairGeometry {
            signal: ArmGeometry {
                frame: self.detector.signal_frame(),
                matrix: self.signal_camera_matrix()?,
            },
            idler: ArmGeometry {
                frame: self.detector.idler_frame(),
                matrix: self.idler_matrix()?,
            },
            to_sample: self.to_sample_matrix()?,
            wavelength_um: self.wavelength_um(),
            b_threshold_um: self.arms.b_threshold_um,
        })
    }

    pub fn build_scene(&self, base_dir: Option<&Path>) -> Result<Option<BuiltScene>> {
        self.scene
            .as_ref()
            .map(|s| section("scene", s.build(self.wavelength_um(), base_dir)))
            .transpose()
    }
}
