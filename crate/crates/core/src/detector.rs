//! Event-camera model: quantum efficiency, intensifier clusters, timing
//! jitter with intensity-dependent walk, and cluster centroiding.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// How detected photons become events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Intensifier flash spreads over a pixel cluster that is later centroided.
    Clustered,
    /// Idealized readout: continuous position plus optional Gaussian blur.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraParams {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_um: f64,
    pub clock_ns: f64,
    /// Per-event timing error std after quantization and walk correction.
    pub timing_jitter_ns: f64,
    pub quantum_efficiency: f64,
    pub cluster_size_min: u16,
    pub cluster_size_max: u16,
    pub cluster_sigma_px: f64,
    /// Delay of a pixel at zero amplitude relative to a saturated one.
    pub time_walk_ns: f64,
    pub walk_saturation: f64,
    pub dark_rate_per_s: f64,
    /// Extra Gaussian noise added to event centroids.
    pub centroid_blur_px: f64,
    pub readout: Readout,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            width_px: 256,
            height_px: 256,
            pitch_um: 55.0,
            clock_ns: 1.6,
            timing_jitter_ns: 2.4,
            quantum_efficiency: 0.07,
            cluster_size_min: 2,
            cluster_size_max: 6,
            cluster_sigma_px: 0.7,
            time_walk_ns: 5.0,
            walk_saturation: 1.5,
            dark_rate_per_s: 0.0,
            centroid_blur_px: 0.0,
            readout: Readout::Clustered,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.width_px < 1 || self.height_px < 1 || self.width_px > u16::MAX as usize || self.height_px > u16::MAX as usize {
            return bad("camera size must be within 1..=65535 pixels");
        }
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return bad("quantum efficiency must be in (0, 1]");
        }
        if !(self.pitch_um > 0.0) {
            return bad("camera pitch must be > 0");
        }
        if !(self.clock_ns > 0.0) {
            return bad("clock resolution must be > 0");
        }
        if !(self.timing_jitter_ns >= 0.0) {
            return bad("timing jitter must be >= 0");
        }
        if self.cluster_size_min < 1 || self.cluster_size_max < self.cluster_size_min || self.cluster_size_max > 25 {
            return bad("cluster size range must satisfy 1 <= min <= max <= 25");
        }
        if !(self.cluster_sigma_px > 0.0) {
            return bad("cluster footprint sigma must be > 0");
        }
        if !(self.time_walk_ns >= 0.0 && self.walk_saturation > 0.0) {
            return bad("time walk must be >= 0 with a positive saturation amplitude");
        }
        if !(self.dark_rate_per_s >= 0.0 && self.centroid_blur_px >= 0.0) {
            return bad("dark rate and centroid blur must be >= 0");
        }
        Ok(())
    }

    pub fn time_walk(&self) -> TimeWalk {
        TimeWalk {
            skew_ns: self.time_walk_ns,
            saturation: self.walk_saturation,
        }
    }

    /// Std of the per-event jitter drawn before clock quantization, chosen so
    /// jitter plus quantization error totals `timing_jitter_ns`.
    fn raw_jitter_ns(&self) -> f64 {
        let q = self.clock_ns * self.clock_ns / 12.0;
        (self.timing_jitter_ns.powi(2) - q).max(0.0).sqrt()
    }

    fn quantize(&self, t: f64) -> f64 {
        ((t / self.clock_ns).round() * self.clock_ns).max(0.0)
    }

    pub fn on_sensor(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && x < self.width_px as f64 - 0.5 && y >= -0.5 && y < self.height_px as f64 - 0.5
    }
}

/// Linear intensity-dependent timing skew: brighter pixels fire earlier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWalk {
    pub skew_ns: f64,
    pub saturation: f64,
}

impl TimeWalk {
    pub const NONE: TimeWalk = TimeWalk {
        skew_ns: 0.0,
        saturation: 1.0,
    };

    pub fn delay_ns(&self, amplitude: f64) -> f64 {
        self.skew_ns * (1.0 - amplitude / self.saturation).max(0.0)
    }
}

/// A photon arriving at a camera plane, in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPhoton {
    pub x_px: f64,
    pub y_px: f64,
    pub t_ns: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPixelHit {
    pub x: u16,
    pub y: u16,
    pub t_ns: f64,
    pub amplitude: f32,
}

/// A centroided detection. `cam` 0 is the signal (or only) camera, 1 the idler camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionEvent {
    pub cam: u8,
    pub x_px: f64,
    pub y_px: f64,
    pub t_ns: f64,
    pub cluster_size: u16,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectReport {
    pub incident: u64,
    pub detected: u64,
    pub off_sensor: u64,
    pub dark: u64,
}

impl DetectReport {
    pub fn merge(&mut self, o: &DetectReport) {
        self.incident += o.incident;
        self.detected += o.detected;
        self.off_sensor += o.off_sensor;
        self.dark += o.dark;
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sort_hits(hits: &mut [RawPixelHit]) {
    hits.sort_by(|a, b| a.t_ns.total_cmp(&b.t_ns).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
}

/// Pixel hits for each photon surviving QE, plus dark hits over `span_ns`.
/// Output is time-sorted.
pub fn detect(
    photons: &[CameraPhoton],
    params: &CameraParams,
    seed: u64,
    span_ns: [f64; 2],
) -> Result<(Vec<RawPixelHit>, DetectReport)> {
    params.validate()?;
    let mut rng = stream_rng(seed, 0, 0);
    let mut report = DetectReport::default();
    let mut hits = Vec::with_capacity(photons.len() / 4);
    let walk = params.time_walk();
    let jitter = params.raw_jitter_ns();
    let sig2 = 2.0 * params.cluster_sigma_px.powi(2);
    let mut cand: Vec<(f64, u16, u16)> = Vec::with_capacity(25);
    for p in photons {
        report.incident += 1;
        if !(rng.random::<f64>() < params.quantum_efficiency) {
            continue;
        }
        if !params.on_sensor(p.x_px, p.y_px) {
            report.off_sensor += 1;
            continue;
        }
        report.detected += 1;
        let size = rng.random_range(params.cluster_size_min..=params.cluster_size_max) as usize;
        let gain = 0.5 + rng.random::<f64>();
        let t_event = p.t_ns + jitter * normal(&mut rng);
        let (cx, cy) = (p.x_px.round() as i64, p.y_px.round() as i64);
        cand.clear();
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= params.width_px as i64 || y >= params.height_px as i64 {
                    continue;
                }
                let d2 = (x as f64 - p.x_px).powi(2) + (y as f64 - p.y_px).powi(2);
                cand.push((d2, x as u16, y as u16));
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        for &(d2, x, y) in cand.iter().take(size) {
            let amplitude = (gain * (-d2 / sig2).exp()) as f32;
            let t = params.quantize(t_event + walk.delay_ns(amplitude as f64));
            hits.push(RawPixelHit {
                x,
                y,
                t_ns: t,
                amplitude,
            });
        }
    }
    let n_dark = dark_count(params, span_ns, &mut rng);
    for _ in 0..n_dark {
        let t = span_ns[0] + (span_ns[1] - span_ns[0]) * rng.random::<f64>();
        let amplitude = (0.5 + rng.random::<f64>()) as f32;
        hits.push(RawPixelHit {
            x: rng.random_range(0..params.width_px) as u16,
            y: rng.random_range(0..params.height_px) as u16,
            t_ns: params.quantize(t + walk.delay_ns(amplitude as f64)),
            amplitude,
        });
    }
    report.dark = n_dark;
    sort_hits(&mut hits);
    Ok((hits, report))
}

fn dark_count<R: Rng>(params: &CameraParams, span_ns: [f64; 2], rng: &mut R) -> u64 {
    let mean = params.dark_rate_per_s * (span_ns[1] - span_ns[0]).max(0.0) * 1e-9;
    if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
    } else {
        0
    }
}

/// Direct readout: surviving photons become events at their (optionally
/// blurred) positions with jittered, clock-quantized times.
pub fn detect_direct(
    photons: &[CameraPhoton],
    params: &CameraParams,
    cam: u8,
    seed: u64,
    span_ns: [f64; 2],
) -> Result<(Vec<DetectionEvent>, DetectReport)> {
    params.validate()?;
    let mut rng = stream_rng(seed, 0, 1);
    let mut report = DetectReport::default();
    let jitter = params.raw_jitter_ns();
    let mut events = Vec::with_capacity(photons.len());
    let (wmax, hmax) = (params.width_px as f64 - 0.5, params.height_px as f64 - 0.5);
    for p in photons {
        report.incident += 1;
        if !(rng.random::<f64>() < params.quantum_efficiency) {
            continue;
        }
        if !params.on_sensor(p.x_px, p.y_px) {
            report.off_sensor += 1;
            continue;
        }
        report.detected += 1;
        let (mut x, mut y) = (p.x_px, p.y_px);
        if params.centroid_blur_px > 0.0 {
            x = (x + params.centroid_blur_px * normal(&mut rng)).clamp(-0.5, wmax);
            y = (y + params.centroid_blur_px * normal(&mut rng)).clamp(-0.5, hmax);
        }
        let t = if jitter > 0.0 { p.t_ns + jitter * normal(&mut rng) } else { p.t_ns };
        events.push(DetectionEvent {
            cam,
            x_px: x,
            y_px: y,
            t_ns: params.quantize(t),
            cluster_size: 1,
        });
    }
    let n_dark = dark_count(params, span_ns, &mut rng);
    for _ in 0..n_dark {
        events.push(DetectionEvent {
            cam,
            x_px: rng.random::<f64>() * params.width_px as f64 - 0.5,
            y_px: rng.random::<f64>() * params.height_px as f64 - 0.5,
            t_ns: params.quantize(span_ns[0] + (span_ns[1] - span_ns[0]) * rng.random::<f64>()),
            cluster_size: 1,
        });
    }
    report.dark = n_dark;
    sort_events(&mut events);
    Ok((events, report))
}

/// Sorts by time, then camera, then position, for a deterministic order.
pub fn sort_events(events: &mut [DetectionEvent]) {
    events.sort_by(|a, b| {
        a.t_ns
            .total_cmp(&b.t_ns)
            .then(a.cam.cmp(&b.cam))
            .then(a.y_px.total_cmp(&b.y_px))
            .then(a.x_px.total_cmp(&b.x_px))
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Maximum Chebyshev pixel distance between connected hits (1 = 8-connectivity).
    pub gap_px: u16,
    pub window_ns: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            gap_px: 1,
            window_ns: 100.0,
        }
    }
}

struct ActiveCluster {
    hits: Vec<RawPixelHit>,
    last_t: f64,
}

/// Streaming connected-components clusterer over time-ordered hits.
///
/// Hits are connected when their Chebyshev distance is at most `gap_px` and
/// their time difference at most `window_ns`.
pub struct Clusterer {
    params: ClusterParams,
    walk: TimeWalk,
    cam: u8,
    active: Vec<ActiveCluster>,
    out: Vec<DetectionEvent>,
    last_t: f64,
}

impl Clusterer {
    pub fn new(params: ClusterParams, walk: TimeWalk, cam: u8) -> Self {
        Clusterer {
            params,
            walk,
            cam,
            active: Vec::new(),
            out: Vec::new(),
            last_t: f64::NEG_INFINITY,
        }
    }

    pub fn push(&mut self, hit: RawPixelHit) -> Result<()> {
        if hit.t_ns < self.last_t {
            return Err(Error::Unsorted(0));
        }
        self.last_t = hit.t_ns;
        let horizon = hit.t_ns - self.params.window_ns;
        let mut i = 0;
        while i < self.active.len() {
            if self.active[i].last_t < horizon {
                let c = self.active.swap_remove(i);
                self.emit(c);
            } else {
                i += 1;
            }
        }
        let gap = self.params.gap_px as i32;
        let mut joined: Vec<usize> = Vec::new();
        for (ci, c) in self.active.iter().enumerate() {
            let touches = c.hits.iter().any(|h| {
                (h.x as i32 - hit.x as i32).abs() <= gap
                    && (h.y as i32 - hit.y as i32).abs() <= gap
                    && (hit.t_ns - h.t_ns).abs() <= self.params.window_ns
            });
            if touches {
                joined.push(ci);
            }
        }
        match joined.len() {
            0 => self.active.push(ActiveCluster {
                hits: vec![hit],
                last_t: hit.t_ns,
            }),
            _ => {
                let target = joined[0];
                for &ci in joined[1..].iter().rev() {
                    let other = self.active.swap_remove(ci);
                    self.active[target].hits.extend(other.hits);
                }
                let c = &mut self.active[target];
                c.hits.push(hit);
                c.last_t = c.last_t.max(hit.t_ns);
            }
        }
        Ok(())
    }

    fn emit(&mut self, c: ActiveCluster) {
        let (mut sx, mut sy, mut sa) = (0.0, 0.0, 0.0);
        let mut best = c.hits[0];
        for h in &c.hits {
            let a = h.amplitude as f64;
            sx += a * h.x as f64;
            sy += a * h.y as f64;
            sa += a;
            if h.amplitude > best.amplitude || (h.amplitude == best.amplitude && h.t_ns < best.t_ns) {
                best = *h;
            }
        }
        let (x, y) = if sa > 0.0 {
            (sx / sa, sy / sa)
        } else {
            let n = c.hits.len() as f64;
            (
                c.hits.iter().map(|h| h.x as f64).sum::<f64>() / n,
                c.hits.iter().map(|h| h.y as f64).sum::<f64>() / n,
            )
        };
        self.out.push(DetectionEvent {
            cam: self.cam,
            x_px: x,
            y_px: y,
            t_ns: best.t_ns - self.walk.delay_ns(best.amplitude as f64),
            cluster_size: c.hits.len().min(u16::MAX as usize) as u16,
        });
    }

    /// Events from clusters that can no longer grow.
    pub fn drain_ready(&mut self) -> Vec<DetectionEvent> {
        std::mem::take(&mut self.out)
    }

    pub fn finish(mut self) -> Vec<DetectionEvent> {
        let mut rest = std::mem::take(&mut self.active);
        rest.sort_by(|a, b| a.hits[0].t_ns.total_cmp(&b.hits[0].t_ns));
        for c in rest {
            self.emit(c);
        }
        self.out
    }
}

/// Groups hits into clusters and reduces each to one event. Input is sorted
/// first if needed; the output is time-sorted.
pub fn cluster_and_centroid(
    hits: &[RawPixelHit],
    params: &ClusterParams,
    walk: &TimeWalk,
    cam: u8,
) -> Result<Vec<DetectionEvent>> {
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let sorted;
    let hits = if hits.windows(2).all(|w| w[0].t_ns <= w[1].t_ns) {
        hits
    } else {
        let mut v = hits.to_vec();
        sort_hits(&mut v);
        sorted = v;
        &sorted[..]
    };
    let mut c = Clusterer::new(*params, *walk, cam);
    for h in hits {
        c.push(*h)?;
    }
    let mut events = c.finish();
    sort_events(&mut events);
    Ok(events)
}

/// Full camera: detection plus readout, with clustered centroid blur applied.
pub fn observe(
    photons: &[CameraPhoton],
    params: &CameraParams,
    cluster: &ClusterParams,
    cam: u8,
    seed: u64,
    span_ns: [f64; 2],
) -> Result<(Vec<DetectionEvent>, DetectReport)> {
    match params.readout {
        Readout::Direct => detect_direct(photons, params, cam, seed, span_ns),
        Readout::Clustered => {
            let (hits, report) = detect(photons, params, seed, span_ns)?;
            let mut events = cluster_and_centroid(&hits, cluster, &params.time_walk(), cam)?;
            apply_centroid_blur(&mut events, params, seed);
            sort_events(&mut events);
            Ok((events, report))
        }
    }
}

pub(crate) fn apply_centroid_blur(events: &mut [DetectionEvent], params: &CameraParams, seed: u64) {
    if params.centroid_blur_px <= 0.0 {
        return;
    }
    let mut rng = stream_rng(seed, 0, 2);
    let (wmax, hmax) = (params.width_px as f64 - 0.5, params.height_px as f64 - 0.5);
    for e in events.iter_mut() {
        e.x_px = (e.x_px + params.centroid_blur_px * normal(&mut rng)).clamp(-0.5, wmax);
        e.y_px = (e.y_px + params.centroid_blur_px * normal(&mut rng)).clamp(-0.5, hmax);
    }
}
