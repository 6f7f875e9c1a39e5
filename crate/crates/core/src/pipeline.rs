//! End-to-end orchestration: windowed forward simulation and the conversion
//! of event streams into coincidence records.

use crate::coincidence::{pair_events, CoincidenceRecord, MomentumPair};
use crate::config::{BuiltScene, CameraMode, ExperimentConfig, Layout};
use crate::detector::{observe, sort_events, CameraParams, CameraPhoton, DetectReport, DetectionEvent};
use crate::error::{Error, Result};
use crate::optics::{apply_unchecked, k_from_slope, slope_from_k, RayState, RayTransferMatrix};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::scene::SceneInteraction;
use crate::spdc::{sample_window, PhotonPairEvent};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Ground truth for one pair whose photons both survived quantum efficiency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRow {
    pub position_um: [f64; 2],
    pub k_signal: [f64; 2],
    pub k_idler: [f64; 2],
    pub t_ns: f64,
}

pub fn truth_csv(rows: &[TruthRow]) -> String {
    let mut s = String::from("x_um,y_um,ksx,ksy,kix,kiy,t_ns\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.position_um[0], r.position_um[1], r.k_signal[0], r.k_signal[1], r.k_idler[0], r.k_idler[1], r.t_ns
        );
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub duration_s: f64,
    pub windows: u64,
    pub pairs: u64,
    /// Pairs where both photons survived quantum efficiency.
    pub coincidence_capable: u64,
    /// Coincidence-capable pairs whose signal passed the scene and whose
    /// photons both landed on a sensor.
    pub coincidence_on_sensor: u64,
    pub scene_blocked: u64,
    /// Signal camera (in single-camera mode, the only camera).
    pub signal: DetectReport,
    pub idler: DetectReport,
    pub events: u64,
    /// Coincidences found by pairing (record-streaming runs only).
    pub coincidences: u64,
    pub accidental_coincidences: u64,
}

/// Events of one time window, time-sorted.
pub struct WindowOutput {
    pub events: Vec<DetectionEvent>,
    pub truth: Vec<TruthRow>,
}

struct Forward<'a> {
    cfg: &'a ExperimentConfig,
    interaction: Option<SceneInteraction>,
    to_sample: RayTransferMatrix,
    to_camera: RayTransferMatrix,
    idler: RayTransferMatrix,
    k: f64,
    signal_cam: CameraParams,
    idler_cam: CameraParams,
}

impl<'a> Forward<'a> {
    fn new(cfg: &'a ExperimentConfig, scene: Option<&BuiltScene>) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.wavelength_um();
        let interaction = match cfg.layout {
            Layout::Imaging => Some(SceneInteraction::new(
                scene.map(|s| s.scene.clone()),
                cfg.interaction.clone(),
                lambda,
            )?),
            Layout::MomentumCalibration => None,
        };
        let unit_qe = |c: &CameraParams| CameraParams {
            quantum_efficiency: 1.0,
            ..c.clone()
        };
        Ok(Forward {
            cfg,
            interaction,
            to_sample: cfg.to_sample_matrix()?,
            to_camera: crate::optics::compose(&cfg.arms.signal_to_camera)?,
            idler: cfg.idler_matrix()?,
            k: 2.0 * PI / lambda,
            signal_cam: unit_qe(&cfg.detector.signal_camera),
            idler_cam: unit_qe(cfg.detector.idler_params()),
        })
    }

    fn window(&self, w: u64, n: usize, t0_ns: f64, dur_ns: f64, want_truth: bool, summary: &mut SimSummary) -> Result<WindowOutput> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let pairs: Vec<PhotonPairEvent> = if n > 0 {
            sample_window(&cfg.source, n, seed, w, t0_ns, dur_ns)?
        } else {
            Vec::new()
        };
        summary.pairs += pairs.len() as u64;

        let qs = cfg.detector.signal_camera.quantum_efficiency;
        let qi = cfg.detector.idler_params().quantum_efficiency;
        let mut rng = stream_rng(seed, streams::QE, w);
        let mut sig_idx = Vec::new();
        let mut idl_idx = Vec::new();
        let mut both = vec![false; pairs.len()];
        for (i, _) in pairs.iter().enumerate() {
            let s = rng.random::<f64>() < qs;
            let d = rng.random::<f64>() < qi;
            if s {
                sig_idx.push(i);
            }
            if d {
                idl_idx.push(i);
            }
            both[i] = s && d;
        }
        summary.coincidence_capable += both.iter().filter(|&&b| b).count() as u64;
        let truth = if want_truth {
            pairs
                .iter()
                .zip(&both)
                .filter(|(_, &b)| b)
                .map(|(p, _)| TruthRow {
                    position_um: p.position_um,
                    k_signal: p.k_signal,
                    k_idler: p.k_idler,
                    t_ns: p.t_ns,
                })
                .collect()
        } else {
            Vec::new()
        };

        // Signal arm.
        let sframe = cfg.detector.signal_frame();
        let iframe = cfg.detector.idler_frame();
        let mut sig_px: Vec<Option<[f64; 2]>> = vec![None; pairs.len()];
        match (&self.interaction, cfg.layout) {
            (Some(inter), Layout::Imaging) => {
                let mut pos = Vec::with_capacity(sig_idx.len());
                let mut kp = Vec::with_capacity(sig_idx.len());
                let mut slopes = Vec::with_capacity(sig_idx.len());
                for &i in &sig_idx {
                    let p = &pairs[i];
                    let ray = RayState::new(p.position_um, slope_from_k(p.k_signal, self.k));
                    let at = apply_unchecked(&self.to_sample, &ray);
                    pos.push(at.r);
                    slopes.push(at.theta);
                    kp.push(k_from_slope(at.theta, self.k));
                }
                if !pos.is_empty() {
                    let out = inter.interact(&pos, &kp, derive_seed(seed, streams::SCENE, w))?;
                    for ((&i, o), th) in sig_idx.iter().zip(out).zip(&slopes) {
                        match o {
                            Some(r) => {
                                let cam = apply_unchecked(&self.to_camera, &RayState::new(r, *th));
                                sig_px[i] = Some(sframe.to_px(cam.r));
                            }
                            None => summary.scene_blocked += 1,
                        }
                    }
                }
            }
            _ => {
                for &i in &sig_idx {
                    let p = &pairs[i];
                    let ray = RayState::new(p.position_um, slope_from_k(p.k_signal, self.k));
                    sig_px[i] = Some(sframe.to_px(apply_unchecked(&self.idler, &ray).r));
                }
            }
        }

        // Idler arm.
        let mut idl_px: Vec<Option<[f64; 2]>> = vec![None; pairs.len()];
        for &i in &idl_idx {
            let p = &pairs[i];
            let ray = RayState::new(p.idler_position_um(), slope_from_k(p.k_idler, self.k));
            idl_px[i] = Some(iframe.to_px(apply_unchecked(&self.idler, &ray).r));
        }
        for i in 0..pairs.len() {
            if let (Some(s), Some(d)) = (sig_px[i], idl_px[i]) {
                if self.signal_cam.on_sensor(s[0], s[1]) && self.idler_cam.on_sensor(d[0], d[1]) {
                    summary.coincidence_on_sensor += 1;
                }
            }
        }

        let photons = |v: &[Option<[f64; 2]>]| -> Vec<CameraPhoton> {
            v.iter()
                .zip(&pairs)
                .filter_map(|(p, e)| {
                    p.map(|q| CameraPhoton {
                        x_px: q[0],
                        y_px: q[1],
                        t_ns: e.t_ns,
                    })
                })
                .collect()
        };
        let span = [t0_ns, t0_ns + dur_ns];
        let cluster = &cfg.detector.cluster;
        let mut events = match cfg.detector.mode {
            CameraMode::TwoCamera => {
                let (mut a, ra) = observe(
                    &photons(&sig_px),
                    &self.signal_cam,
                    cluster,
                    0,
                    derive_seed(seed, streams::DETECT_SIGNAL, w),
                    span,
                )?;
                let (b, rb) = observe(
                    &photons(&idl_px),
                    &self.idler_cam,
                    cluster,
                    1,
                    derive_seed(seed, streams::DETECT_IDLER, w),
                    span,
                )?;
                summary.signal.merge(&ra);
                summary.idler.merge(&rb);
                a.extend(b);
                a
            }
            CameraMode::SingleCamera => {
                let mut all = photons(&sig_px);
                all.extend(photons(&idl_px));
                all.sort_by(|a, b| a.t_ns.total_cmp(&b.t_ns));
                let (ev, r) = observe(
                    &all,
                    &self.signal_cam,
                    cluster,
                    0,
                    derive_seed(seed, streams::DETECT_SIGNAL, w),
                    span,
                )?;
                summary.signal.merge(&r);
                ev
            }
        };
        sort_events(&mut events);
        summary.events += events.len() as u64;
        Ok(WindowOutput { events, truth })
    }
}

/// Runs the forward model window by window, handing each window's events to
/// `sink` in time order. Pair counts per window are Poisson with mean
/// `rate · window duration`.
pub fn run_windows(
    cfg: &ExperimentConfig,
    scene: Option<&BuiltScene>,
    duration_s: f64,
    want_truth: bool,
    mut sink: impl FnMut(WindowOutput, &mut SimSummary) -> Result<()>,
) -> Result<SimSummary> {
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(Error::config("simulation.duration_s", "must be finite and >= 0"));
    }
    let fwd = Forward::new(cfg, scene)?;
    let mut summary = SimSummary {
        seed: cfg.seed,
        duration_s,
        ..Default::default()
    };
    let rate = cfg.source.pump.pair_rate_per_s;
    let expected = rate * duration_s;
    if expected <= 0.0 {
        return Ok(summary);
    }
    let n_windows = (expected / cfg.simulation.window_pairs as f64).ceil().max(1.0) as u64;
    let dur_ns = duration_s * 1e9 / n_windows as f64;
    let mean = expected / n_windows as f64;
    let poisson = Poisson::new(mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for w in 0..n_windows {
        let n = poisson.sample(&mut stream_rng(cfg.seed, streams::WINDOW_COUNT, w)) as usize;
        let out = fwd.window(w, n, w as f64 * dur_ns, dur_ns, want_truth, &mut summary)?;
        sink(out, &mut summary)?;
        summary.windows += 1;
    }
    Ok(summary)
}

pub struct SimulationOutput {
    pub events: Vec<DetectionEvent>,
    pub truth: Vec<TruthRow>,
    pub summary: SimSummary,
}

/// Full event stream for `duration_s`, time-sorted.
pub fn simulate(cfg: &ExperimentConfig, scene: Option<&BuiltScene>, duration_s: f64, want_truth: bool) -> Result<SimulationOutput> {
    let mut events = Vec::new();
    let mut truth = Vec::new();
    let summary = run_windows(cfg, scene, duration_s, want_truth, |w, _| {
        events.extend(w.events);
        truth.extend(w.truth);
        Ok(())
    })?;
    // Jitter can push events a few ns past a window boundary.
    sort_events(&mut events);
    Ok(SimulationOutput { events, truth, summary })
}

/// Imaging-layout events → sample-plane coincidence records.
pub fn records_from_events(events: &[DetectionEvent], cfg: &ExperimentConfig, shift_ns: f64) -> Result<Vec<CoincidenceRecord>> {
    let geom = cfg.pair_geometry()?;
    pair_events(events, cfg.reconstruction.gate_ns, &cfg.detector.idler_region(), shift_ns)?
        .iter()
        .map(|p| geom.record(p))
        .collect()
}

/// Calibration-layout events → crystal-frame momentum pairs.
pub fn momentum_pairs_from_events(events: &[DetectionEvent], cfg: &ExperimentConfig, shift_ns: f64) -> Result<Vec<MomentumPair>> {
    let geom = cfg.pair_geometry()?;
    pair_events(events, cfg.reconstruction.gate_ns, &cfg.detector.idler_region(), shift_ns)?
        .iter()
        .map(|p| geom.momentum_pair(p))
        .collect()
}

/// Coincidences of a run, with optional time-shifted accidental pairs.
pub struct Paired<T> {
    pub pairs: Vec<T>,
    pub accidentals: Vec<T>,
    pub summary: SimSummary,
}

fn simulate_paired<T>(
    cfg: &ExperimentConfig,
    scene: Option<&BuiltScene>,
    duration_s: f64,
    with_accidentals: bool,
    convert: impl Fn(&[DetectionEvent], &ExperimentConfig, f64) -> Result<Vec<T>>,
) -> Result<Paired<T>> {
    let mut pairs = Vec::new();
    let mut accidentals = Vec::new();
    let shift = cfg.reconstruction.accidental_shift_ns;
    let summary = run_windows(cfg, scene, duration_s, false, |w, s| {
        let p = convert(&w.events, cfg, 0.0)?;
        s.coincidences += p.len() as u64;
        pairs.extend(p);
        if with_accidentals {
            let a = convert(&w.events, cfg, shift)?;
            s.accidental_coincidences += a.len() as u64;
            accidentals.extend(a);
        }
        Ok(())
    })?;
    Ok(Paired {
        pairs,
        accidentals,
        summary,
    })
}

/// Streams an imaging run straight to records; events are never held for
/// more than one window. Pairs straddling a window boundary are lost.
pub fn simulate_records(
    cfg: &ExperimentConfig,
    scene: Option<&BuiltScene>,
    duration_s: f64,
    with_accidentals: bool,
) -> Result<Paired<CoincidenceRecord>> {
    if cfg.layout != Layout::Imaging {
        return Err(Error::config("layout", "records need the imaging layout"));
    }
    simulate_paired(cfg, scene, duration_s, with_accidentals, records_from_events)
}

/// Streams a calibration run straight to momentum pairs.
pub fn simulate_momentum_pairs(cfg: &ExperimentConfig, duration_s: f64, with_accidentals: bool) -> Result<Paired<MomentumPair>> {
    if cfg.layout != Layout::MomentumCalibration {
        return Err(Error::config("layout", "momentum pairs need the momentum_calibration layout"));
    }
    simulate_paired(cfg, None, duration_s, with_accidentals, momentum_pairs_from_events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Readout;

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.source.pump.pair_rate_per_s = 2e5;
        c.simulation.window_pairs = 30_000;
        c
    }

    #[test]
    fn zero_duration_is_empty() {
        let out = simulate(&quick(), None, 0.0, true).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.summary.pairs, 0);
    }

    #[test]
    fn deterministic_and_windowed() {
        let c = quick();
        let a = simulate(&c, None, 0.2, true).unwrap();
        let b = simulate(&c, None, 0.2, true).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.summary, b.summary);
        assert!(a.summary.windows >= 2);
        assert!(a.events.windows(2).all(|w| w[0].t_ns <= w[1].t_ns));
        assert_eq!(a.truth.len() as u64, a.summary.coincidence_capable);
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(simulate(&d, None, 0.2, false).unwrap().events, a.events);
    }

    #[test]
    fn capable_fraction_is_quadratic_in_qe() {
        let c = quick();
        let s = simulate(&c, None, 0.5, false).unwrap().summary;
        let p = 0.07f64 * 0.07;
        let mean = s.pairs as f64 * p;
        let sd = (s.pairs as f64 * p * (1.0 - p)).sqrt();
        assert!((s.coincidence_capable as f64 - mean).abs() < 5.0 * sd, "{s:?}");
    }

    #[test]
    fn records_recover_birth_position() {
        let mut c = quick();
        let cam = &mut c.detector.signal_camera;
        cam.quantum_efficiency = 1.0;
        cam.readout = Readout::Direct;
        cam.timing_jitter_ns = 0.0;
        c.source.pump.pair_rate_per_s = 2e4;
        let r = simulate_records(&c, None, 0.1, true).unwrap();
        assert!(r.pairs.len() > 1000, "{}", r.pairs.len());
        assert!(r.accidentals.len() * 100 < r.pairs.len());
        // Sample-plane position of a 1:1 inverted relay stays within the crystal aperture.
        let ap = c.source.pump.crystal_aperture_um;
        assert!(r.pairs.iter().all(|p| p.signal_um[0].abs() <= ap[0] && p.signal_um[1].abs() <= ap[1]));
    }

    #[test]
    fn single_camera_mode_pairs() {
        let text = r#"{"detector": {"mode": "single_camera", "idler_region": {"x0": 156, "y0": 0, "x1": 256, "y1": 100}, "signal_axis_px": [70, 180], "signal_camera": {"quantum_efficiency": 1.0}}, "arms": {"signal_to_camera": [{"type": "free_space", "d_um": 10000}, {"type": "thin_lens", "f_um": 10000}, {"type": "free_space", "d_um": 15000}, {"type": "thin_lens", "f_um": 5000}, {"type": "free_space", "d_um": 5000}]}}"#;
        let mut c = ExperimentConfig::from_json_str(text).unwrap();
        c.source.pump.pair_rate_per_s = 2e4;
        let r = simulate_records(&c, None, 0.05, false).unwrap();
        assert!(r.pairs.len() > 100, "{:?}", r.summary);
    }
}
