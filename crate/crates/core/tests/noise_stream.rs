//! Statistical checks on the counter-based normal stream, and exactness of
//! the 17-digit number format.

use ergolil::integrate::NoiseSource;
use ergolil::mc::output::{format_f64, json_string, Num};
use proptest::prelude::*;

struct Moments {
    mean: f64,
    var: f64,
    lag1: f64,
}

fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let cov = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
    Moments { mean, var, lag1: cov / var }
}

fn assert_standard_normal(x: &[f64], what: &str) {
    let n = x.len() as f64;
    let m = moments(x);
    assert!(m.mean.abs() < 4.0 / n.sqrt(), "{what}: mean {}", m.mean);
    assert!((m.var - 1.0).abs() < 0.01, "{what}: variance {}", m.var);
    assert!(m.lag1.abs() < 4.0 / n.sqrt(), "{what}: lag-1 autocorrelation {}", m.lag1);
    // Fourth moment of N(0,1) is 3, with standard error √96/√n.
    let k4 = x.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    assert!((k4 - 3.0).abs() < 4.0 * 96f64.sqrt() / n.sqrt(), "{what}: fourth moment {k4}");
}

#[test]
fn one_draw_per_counter() {
    let noise = NoiseSource::counter(20261016, 3);
    let mut buf = [0.0];
    let x: Vec<f64> = (0..1_000_000u64)
        .map(|n| {
            noise.fill(n, &mut buf);
            buf[0]
        })
        .collect();
    assert_standard_normal(&x, "per-counter");
}

#[test]
fn many_draws_per_counter() {
    let noise = NoiseSource::counter(7, 0);
    let mut buf = vec![0.0; 64];
    let mut x = Vec::with_capacity(1_000_000);
    for n in 0..15_625u64 {
        noise.fill(n, &mut buf);
        x.extend_from_slice(&buf);
    }
    assert_standard_normal(&x, "within-counter");
}

#[test]
fn paths_and_aux_draws_are_uncorrelated() {
    let a = NoiseSource::counter(11, 0);
    let b = NoiseSource::counter(11, 1);
    let (mut u, mut v, mut w) = ([0.0], [0.0], [0.0]);
    let n = 200_000u64;
    let (mut ab, mut aw) = (0.0, 0.0);
    for k in 0..n {
        a.fill(k, &mut u);
        b.fill(k, &mut v);
        a.fill_aux(k, &mut w);
        ab += u[0] * v[0];
        aw += u[0] * w[0];
    }
    let bound = 4.0 / (n as f64).sqrt();
    assert!((ab / n as f64).abs() < bound, "paths 0 and 1 correlate: {}", ab / n as f64);
    assert!((aw / n as f64).abs() < bound, "main and aux draws correlate: {}", aw / n as f64);
}

#[test]
fn draws_are_addressable() {
    let noise = NoiseSource::counter(5, 9);
    let mut all = vec![0.0; 8];
    noise.fill(42, &mut all);
    let mut prefix = vec![0.0; 3];
    noise.fill(42, &mut prefix);
    assert_eq!(&all[..3], &prefix[..]);
    let mut again = vec![0.0; 8];
    noise.fill(42, &mut again);
    assert_eq!(all, again);
}

#[test]
fn json_keeps_seventeen_digits() {
    for x in [0.1, 1.0 / 3.0, std::f64::consts::PI, 1e-300, -2.5e17, f64::MIN_POSITIVE, f64::MAX] {
        let text = json_string(&Num(x));
        assert_eq!(text.trim().parse::<f64>().unwrap(), x, "{text}");
        let mantissa = text.trim().trim_start_matches('-').split('e').next().unwrap().replace('.', "");
        assert_eq!(mantissa.len(), 17, "{text}");
    }
    assert_eq!(json_string(&Num(f64::NAN)).trim(), "null");
}

proptest! {
    #[test]
    fn format_round_trips(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        match format_f64(x) {
            Some(s) => prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits()),
            None => prop_assert!(!x.is_finite()),
        }
    }
}
