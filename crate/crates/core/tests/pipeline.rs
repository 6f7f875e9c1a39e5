use qclfm::config::ExperimentConfig;
use qclfm::io::{decode_evt1, encode_evt1};
use qclfm::pipeline::{simulate, simulate_records};

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.source.pump.pair_rate_per_s = 2e5;
    c
}

#[test]
fn coincidence_capable_rate() {
    let c = ExperimentConfig::default();
    let out = simulate(&c, None, 1.0, false).unwrap();
    let s = &out.summary;
    let expected: f64 = 15e6 * 0.07 * 0.07;
    let sigma = expected.sqrt();
    assert!(
        (s.coincidence_capable as f64 - expected).abs() < 5.0 * sigma,
        "{} vs {expected}",
        s.coincidence_capable
    );
    assert!((s.pairs as f64 - 15e6).abs() < 5.0 * 15e6f64.sqrt());
    assert!(out.events.windows(2).all(|w| w[0].t_ns <= w[1].t_ns));
}

#[test]
fn zero_duration_is_empty() {
    let out = simulate(&small(1), None, 0.0, true).unwrap();
    assert!(out.events.is_empty());
    assert!(out.truth.is_empty());
    assert_eq!(out.summary.pairs, 0);
    assert!(decode_evt1(&encode_evt1(&out.events)).unwrap().is_empty());
}

#[test]
fn deterministic_per_seed() {
    let a = simulate(&small(7), None, 0.05, true).unwrap();
    let b = simulate(&small(7), None, 0.05, true).unwrap();
    let c = simulate(&small(8), None, 0.05, true).unwrap();
    assert!(!a.events.is_empty());
    assert_eq!(encode_evt1(&a.events), encode_evt1(&b.events));
    assert_eq!(a.truth.len(), b.truth.len());
    assert_ne!(encode_evt1(&a.events), encode_evt1(&c.events));
}

#[test]
fn records_come_from_capable_pairs() {
    let mut c = small(3);
    c.source.pump.pair_rate_per_s = 1e6;
    let r = simulate_records(&c, None, 0.1, true).unwrap();
    assert!(!r.pairs.is_empty());
    // Accidentals from the shifted pairing stay a small fraction of true pairs.
    assert!(r.accidentals.len() * 10 < r.pairs.len());
    assert!(r.pairs.len() as u64 <= r.summary.coincidence_capable);
}
