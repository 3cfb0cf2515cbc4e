//! The martingale differences have zero conditional mean: regressing `Z_k`
//! on `Y_{k−1}` across independent paths gives slope and intercept near 0.

use ergolil::grid::{build_grid, StepSpec};
use ergolil::integrate::{NoiseSource, SchemeSpec};
use ergolil::martingale::{LedgerMode, MartingaleLedger};
use ergolil::mc::run_paths;
use ergolil::model::{Model, SodeModel, TestFunction};

/// Ordinary least squares `z = b0 + b1 y`; returns the estimates and their standard errors.
fn ols(y: &[f64], z: &[f64]) -> ((f64, f64), (f64, f64)) {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mz = z.iter().sum::<f64>() / n;
    let sxx: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = y.iter().zip(z).map(|(a, b)| (a - my) * (b - mz)).sum();
    let b1 = sxy / sxx;
    let b0 = mz - b1 * my;
    let rss: f64 = y.iter().zip(z).map(|(a, b)| (b - b0 - b1 * a).powi(2)).sum();
    let s2 = rss / (n - 2.0);
    let se1 = (s2 / sxx).sqrt();
    let se0 = (s2 * (1.0 / n + my * my / sxx)).sqrt();
    ((b0, b1), (se0, se1))
}

fn assert_uncorrelated(y: &[f64], z: &[f64], what: &str) {
    let ((b0, b1), (se0, se1)) = ols(y, z);
    assert!(b0.abs() <= 4.0 * se0, "{what}: intercept {b0} (se {se0})");
    assert!(b1.abs() <= 4.0 * se1, "{what}: slope {b1} (se {se1})");
}

#[test]
fn closed_form_differences_are_unpredictable() {
    let model = Model::Sode(SodeModel::ornstein_uhlenbeck(1.5, 0.8).unwrap());
    let grid = build_grid(StepSpec::power(0.8), 400).unwrap();
    let f = TestFunction::identity();
    let ks = [1u64, 5, 50, 300];
    let rows = run_paths(0..10_000, 1, false, |path| {
        // Spread the starting points so that k = 1 has a regressor too.
        let x0 = (path % 21) as f64 / 5.0 - 2.0;
        let l = MartingaleLedger::record(
            &model,
            &SchemeSpec::bem(),
            &grid,
            &f,
            0.0,
            &[x0],
            &NoiseSource::counter(99, path),
            LedgerMode::ClosedFormLinear,
        )
        .map_err(|e| e.to_string())?;
        Ok::<_, String>(ks.map(|k| (l.state(k - 1)[0], l.martingale_increment(k).unwrap())))
    })
    .unwrap();
    for (i, k) in ks.iter().enumerate() {
        let (y, z): (Vec<f64>, Vec<f64>) = rows.iter().map(|(_, r)| r.as_ref().unwrap()[i]).unzip();
        assert_uncorrelated(&y, &z, &format!("k = {k}"));
    }
}

#[test]
fn nested_differences_are_unpredictable() {
    // Nonlinear drift and a bounded f: only the nested estimator applies.
    let model = Model::Sode(SodeModel::cubic(1.0, 1.0).unwrap());
    let grid = build_grid(StepSpec::harmonic(), 30).unwrap();
    let f = TestFunction::tanh(vec![1.0]);
    let k = 4u64;
    let rows = run_paths(0..600, 1, false, |path| {
        let l = MartingaleLedger::record(
            &model,
            &SchemeSpec::bem(),
            &grid,
            &f,
            0.0,
            &[0.5],
            &NoiseSource::counter(3, path),
            LedgerMode::NestedMc { inner_paths: 64, eval_up_to: k, seed: 17 },
        )
        .map_err(|e| e.to_string())?;
        Ok::<_, String>((l.state(k - 1)[0], l.martingale_increment(k).unwrap()))
    })
    .unwrap();
    let (y, z): (Vec<f64>, Vec<f64>) = rows.into_iter().map(|(_, r)| r.unwrap()).unzip();
    assert_uncorrelated(&y, &z, "nested");
}
