//! Spectral Galerkin stochastic heat equation with exponential Euler: mode
//! variances against q_j / (2 lambda_j), and a Nemytskii nonlinearity.

use ergolil::grid::{build_grid, StepSpec};
use ergolil::integrate::SchemeSpec;
use ergolil::mc::{run_ensemble, EnsembleSpec};
use ergolil::model::{q_trace_norm, Model, NoiseLaw, Nonlinearity, PointwiseMap, SpectralSpdeModel, TestFunction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let heat = SpectralSpdeModel::new(16, 1.0, NoiseLaw::Power { exponent: 2.0 }, Nonlinearity::Zero)?;
    println!("trace condition: {:?}", q_trace_norm(&heat));
    let grid = build_grid(StepSpec::harmonic(), 20_000)?;
    let mut spec = EnsembleSpec::new(Model::Spde(heat.clone()), SchemeSpec::exp_euler(), grid, vec![0.0; 16], TestFunction::coordinate(0), 3, 400);
    spec.lil_first = 1e9; // only the final values are needed
    let summary = run_ensemble(&spec, 4, false)?;
    for j in [1usize, 2, 4] {
        let var = summary.records.iter().map(|r| r.final_state[j - 1].powi(2)).sum::<f64>() / summary.records.len() as f64;
        println!("mode {j}: E y_j^2 = {var:.5}, q_j/(2 lambda_j) = {:.5}", heat.stationary_variance(j));
    }

    let sine = SpectralSpdeModel::new(16, 1.0, NoiseLaw::Power { exponent: 2.0 }, Nonlinearity::Nemytskii(PointwiseMap::by_name("sin").expect("built in")))?;
    let grid = build_grid(StepSpec::harmonic(), 20_000)?;
    let spec = EnsembleSpec::new(Model::Spde(sine), SchemeSpec::exp_euler(), grid, vec![0.1; 16], TestFunction::tanh(vec![1.0; 16]), 3, 8);
    let summary = run_ensemble(&spec, 4, false)?;
    println!("\nwith F = sin(u): {} paths finished, final tanh functional of path 0: {:.4}", summary.records.len(), summary.records[0].final_s);
    Ok(())
}
