//! Entangled photon-pair source model.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, streams};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pump laser and crystal parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpParams {
    pub coherence_length_um: f64,
    pub waist_um: f64,
    pub wavelength_um: f64,
    pub pair_rate_per_s: f64,
    /// Transverse extent (x, y) of the generation region.
    pub crystal_aperture_um: [f64; 2],
}

impl Default for PumpParams {
    fn default() -> Self {
        PumpParams {
            coherence_length_um: 200.0,
            waist_um: 500.0,
            wavelength_um: 0.405,
            pair_rate_per_s: 15.0e6,
            crystal_aperture_um: [2000.0, 1000.0],
        }
    }
}

impl PumpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.coherence_length_um > 0.0) {
            return Err(Error::InvalidParameter("pump coherence length must be > 0".into()));
        }
        if !(self.waist_um > 0.0) {
            return Err(Error::InvalidParameter("pump waist must be > 0".into()));
        }
        if !(self.wavelength_um > 0.0) {
            return Err(Error::InvalidParameter("pump wavelength must be > 0".into()));
        }
        if !(self.pair_rate_per_s > 0.0) {
            return Err(Error::InvalidParameter("pair rate must be > 0".into()));
        }
        if !(self.crystal_aperture_um[0] > 0.0 && self.crystal_aperture_um[1] > 0.0) {
            return Err(Error::InvalidParameter("crystal aperture must be > 0".into()));
        }
        Ok(())
    }

    /// Degenerate down-conversion: both photons at twice the pump wavelength.
    pub fn photon_wavelength_um(&self) -> f64 {
        2.0 * self.wavelength_um
    }
}

/// Width of the pair momentum-sum distribution, sqrt(1/l_c² + 1/(4 ω_p²)).
pub fn momentum_sigma(pump: &PumpParams) -> Result<f64> {
    let (lc, wp) = (pump.coherence_length_um, pump.waist_um);
    if !(lc > 0.0) || !(wp > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coherence length and waist must be > 0 (got {lc}, {wp})"
        )));
    }
    Ok((1.0 / (lc * lc) + 1.0 / (4.0 * wp * wp)).sqrt())
}

/// Full statistical source model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub pump: PumpParams,
    /// Per-component std of the signal transverse momentum.
    pub signal_sigma_per_um: f64,
    /// Optional per-component Gaussian offset of the idler birth position.
    #[serde(default)]
    pub position_blur_um: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            pump: PumpParams::default(),
            signal_sigma_per_um: 0.17,
            position_blur_um: 0.0,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        self.pump.validate()?;
        if !(self.signal_sigma_per_um > 0.0) {
            return Err(Error::InvalidParameter("signal momentum sigma must be > 0".into()));
        }
        if !(self.position_blur_um >= 0.0) {
            return Err(Error::InvalidParameter("position blur must be >= 0".into()));
        }
        Ok(())
    }
}

/// One ground-truth photon pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotonPairEvent {
    /// Birth position at the crystal plane (signal photon).
    pub position_um: [f64; 2],
    /// Idler birth position minus signal birth position (zero unless blurred).
    pub idler_offset_um: [f64; 2],
    pub k_signal: [f64; 2],
    pub k_idler: [f64; 2],
    pub t_ns: f64,
    pub wavelength_um: f64,
}

impl PhotonPairEvent {
    pub fn idler_position_um(&self) -> [f64; 2] {
        [
            self.position_um[0] + self.idler_offset_um[0],
            self.position_um[1] + self.idler_offset_um[1],
        ]
    }
}

const BATCH: usize = 1 << 16;

/// Samples `n` pairs with Poisson arrival times over `duration_s`.
pub fn sample_pairs(
    source: &SourceParams,
    n: usize,
    seed: u64,
    duration_s: f64,
) -> Result<Vec<PhotonPairEvent>> {
    if n == 0 {
        return Err(Error::InvalidParameter("pair count must be >= 1".into()));
    }
    sample_window(source, n, seed, 0, 0.0, duration_s * 1e9)
}

/// Samples one time window `[t0, t0 + duration)` of a longer run.
///
/// Windows are independent streams keyed by `window`.
pub(crate) fn sample_window(
    source: &SourceParams,
    n: usize,
    seed: u64,
    window: u64,
    t0_ns: f64,
    duration_ns: f64,
) -> Result<Vec<PhotonPairEvent>> {
    source.validate()?;
    if !(duration_ns >= 0.0) {
        return Err(Error::InvalidParameter("duration must be >= 0".into()));
    }
    let times = arrival_times(n, derive_seed(seed, streams::PAIR_TIMES, window), t0_ns, duration_ns);
    let sigma_sum = momentum_sigma(&source.pump)?;
    let lambda = source.pump.photon_wavelength_um();
    let k = 2.0 * PI / lambda;
    let window_seed = derive_seed(seed, streams::PAIRS, window);
    let batches: Vec<Vec<PhotonPairEvent>> = times
        .par_chunks(BATCH)
        .enumerate()
        .map(|(b, ts)| {
            let mut rng = stream_rng(window_seed, streams::PAIRS, b as u64);
            ts.iter()
                .map(|&t| draw_pair(source, sigma_sum, k, lambda, t, &mut rng))
                .collect()
        })
        .collect();
    Ok(batches.concat())
}

/// Sorted uniform arrival times via normalized exponential spacings.
fn arrival_times(n: usize, seed: u64, t0_ns: f64, duration_ns: f64) -> Vec<f64> {
    let mut rng = stream_rng(seed, streams::PAIR_TIMES, 0);
    let mut acc = 0.0;
    let mut cum = Vec::with_capacity(n);
    for _ in 0..n {
        let e: f64 = Exp1.sample(&mut rng);
        acc += e;
        cum.push(acc);
    }
    let e: f64 = Exp1.sample(&mut rng);
    let total = acc + e;
    cum.iter().map(|c| t0_ns + duration_ns * c / total).collect()
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_pair<R: Rng>(
    source: &SourceParams,
    sigma_sum: f64,
    k: f64,
    lambda: f64,
    t_ns: f64,
    rng: &mut R,
) -> PhotonPairEvent {
    let pump = &source.pump;
    // pair-generation density follows pump intensity exp(-2r²/ω²)
    let sigma_r = pump.waist_um / 2.0;
    let [ax, ay] = pump.crystal_aperture_um;
    let position_um = loop {
        let x = sigma_r * normal(rng);
        let y = sigma_r * normal(rng);
        if x.abs() <= ax / 2.0 && y.abs() <= ay / 2.0 {
            break [x, y];
        }
    };
    let (k_signal, k_idler) = loop {
        let ks = [
            source.signal_sigma_per_um * normal(rng),
            source.signal_sigma_per_um * normal(rng),
        ];
        let ki = [-ks[0] + sigma_sum * normal(rng), -ks[1] + sigma_sum * normal(rng)];
        if ks[0].hypot(ks[1]) < k && ki[0].hypot(ki[1]) < k {
            break (ks, ki);
        }
    };
    let idler_offset_um = if source.position_blur_um > 0.0 {
        [
            source.position_blur_um * normal(rng),
            source.position_blur_um * normal(rng),
        ]
    } else {
        [0.0, 0.0]
    };
    PhotonPairEvent {
        position_um,
        idler_offset_um,
        k_signal,
        k_idler,
        t_ns,
        wavelength_um: lambda,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pump(lc: f64, wp: f64) -> PumpParams {
        PumpParams {
            coherence_length_um: lc,
            waist_um: wp,
            ..PumpParams::default()
        }
    }

    #[test]
    fn momentum_sigma_reference_value() {
        let s = momentum_sigma(&pump(200.0, 500.0)).unwrap();
        let expect = (1.0f64 / 40000.0 + 1.0 / 1.0e6).sqrt();
        assert!((s - expect).abs() / expect < 1e-12);
        assert!((s - 5.10e-3).abs() < 0.005e-3);
    }

    #[test]
    fn momentum_sigma_limits() {
        let s = momentum_sigma(&pump(1e12, 500.0)).unwrap();
        assert!((s - 1.0e-3).abs() < 1e-12);
        let long = momentum_sigma(&pump(2000.0, 500.0)).unwrap();
        assert!((long - 1.25f64.sqrt() * 1e-3).abs() < 1e-12);
        let ratio = momentum_sigma(&pump(200.0, 500.0)).unwrap() / long;
        assert!((ratio - 4.56).abs() < 0.01);
        assert!(momentum_sigma(&pump(0.0, 500.0)).is_err());
        assert!(momentum_sigma(&pump(200.0, -1.0)).is_err());
    }

    #[test]
    fn rejects_zero_pairs_and_bad_pump() {
        let s = SourceParams::default();
        assert!(sample_pairs(&s, 0, 1, 1.0).is_err());
        let bad = SourceParams {
            pump: pump(200.0, 0.0),
            ..SourceParams::default()
        };
        assert!(sample_pairs(&bad, 10, 1, 1.0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let s = SourceParams::default();
        let a = sample_pairs(&s, 70_000, 42, 0.01).unwrap();
        let b = sample_pairs(&s, 70_000, 42, 0.01).unwrap();
        assert_eq!(a, b);
        let c = sample_pairs(&s, 70_000, 43, 0.01).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn sum_momentum_statistics() {
        let s = SourceParams::default();
        let n = 1_000_000;
        let pairs = sample_pairs(&s, n, 9, 1.0).unwrap();
        let sigma = momentum_sigma(&s.pump).unwrap();
        for axis in 0..2 {
            let sums: Vec<f64> = pairs.iter().map(|p| p.k_signal[axis] + p.k_idler[axis]).collect();
            let mean = sums.iter().sum::<f64>() / n as f64;
            let var = sums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let std = var.sqrt();
            assert!(mean.abs() < 5.0 * sigma / (n as f64).sqrt(), "mean {mean}");
            assert!((std - sigma).abs() / sigma < 0.01, "std {std}");
        }
    }

    #[test]
    fn anti_correlation_and_shared_position() {
        let s = SourceParams::default();
        assert!(s.signal_sigma_per_um >= 10.0 * momentum_sigma(&s.pump).unwrap());
        let pairs = sample_pairs(&s, 100_000, 5, 1.0).unwrap();
        let xs: Vec<f64> = pairs.iter().map(|p| p.k_signal[0]).collect();
        let xi: Vec<f64> = pairs.iter().map(|p| p.k_idler[0]).collect();
        assert!(crate::image::ncc(&xs, &xi) <= -0.9);
        let k = 2.0 * PI / 0.81;
        for p in &pairs {
            assert_eq!(p.idler_position_um(), p.position_um);
            assert!(p.position_um[0].abs() <= 1000.0 && p.position_um[1].abs() <= 500.0);
            assert!(p.k_signal[0].hypot(p.k_signal[1]) < k);
            assert_eq!(p.wavelength_um, 0.81);
        }
    }

    #[test]
    fn arrivals_are_poisson() {
        // Kolmogorov–Smirnov on inter-arrival times against Exp(rate).
        let n = 100_000;
        let duration_s = 0.01;
        let pairs = sample_pairs(&SourceParams::default(), n, 77, duration_s).unwrap();
        let rate = n as f64 / (duration_s * 1e9);
        let mut gaps: Vec<f64> = pairs.windows(2).map(|w| w[1].t_ns - w[0].t_ns).collect();
        assert!(gaps.iter().all(|g| *g >= 0.0));
        gaps.sort_by(|a, b| a.total_cmp(b));
        let m = gaps.len() as f64;
        let mut d: f64 = 0.0;
        for (i, g) in gaps.iter().enumerate() {
            let cdf = 1.0 - (-rate * g).exp();
            d = d.max((cdf - i as f64 / m).abs()).max(((i + 1) as f64 / m - cdf).abs());
        }
        assert!(d < 1.628 / m.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn position_blur_offsets_idler() {
        let s = SourceParams {
            position_blur_um: 2.0,
            ..SourceParams::default()
        };
        let pairs = sample_pairs(&s, 20_000, 3, 1.0).unwrap();
        let var = pairs.iter().map(|p| p.idler_offset_um[0].powi(2)).sum::<f64>() / 20_000.0;
        assert!((var.sqrt() - 2.0).abs() < 0.05);
    }
}
