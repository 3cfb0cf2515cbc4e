//! The Poisson-type tail sums W_k(y) by nested Monte Carlo, checked against
//! the closed form on the linear model, then used where no closed form
//! exists (cubic drift, bounded f).

use ergolil::grid::{build_grid, StepSpec};
use ergolil::integrate::{NoiseSource, SchemeSpec};
use ergolil::martingale::{ptf_nested_mc, LedgerMode, MartingaleLedger};
use ergolil::model::{Model, SodeModel, TestFunction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ou = Model::Sode(SodeModel::ornstein_uhlenbeck(1.0, 1.0)?);
    let grid = build_grid(StepSpec::harmonic(), 2_000)?;
    let f = TestFunction::identity();

    // P_{2,50} f(x) for the BEM chain is x / prod(1 + tau_j).
    let x = 1.3;
    let est = ptf_nested_mc(&ou, &SchemeSpec::bem(), &grid, &f, 2, 50, &[x], 4_000, 5, 0)?;
    let exact = x * (3..=50).map(|j| 1.0 / (1.0 + grid.step(j))).product::<f64>();
    println!("P_(2,50) f(1.3): nested {:.4} +- {:.4}, exact {exact:.4}", est.mean, est.stderr);

    let noise = NoiseSource::counter(9, 0);
    let closed = MartingaleLedger::record(&ou, &SchemeSpec::bem(), &grid, &f, 0.0, &[0.5], &noise, LedgerMode::ClosedFormLinear)?;
    let nested = MartingaleLedger::record(
        &ou,
        &SchemeSpec::bem(),
        &grid,
        &f,
        0.0,
        &[0.5],
        &noise,
        LedgerMode::NestedMc { inner_paths: 200, eval_up_to: 5, seed: 11 },
    )?;
    for k in 0..=5 {
        let c = closed.tail_value(k)?;
        let n = nested.tail_value(k)?;
        println!("W_{k}: closed {:.4}, nested {:.4} +- {:.4}", c.mean, n.mean, n.stderr);
    }

    let cubic = Model::Sode(SodeModel::cubic(1.0, 1.0)?);
    let g = TestFunction::tanh(vec![1.0]);
    let small = build_grid(StepSpec::harmonic(), 200)?;
    let ledger = MartingaleLedger::record(
        &cubic,
        &SchemeSpec::bem(),
        &small,
        &g,
        0.0,
        &[1.0],
        &NoiseSource::counter(9, 1),
        LedgerMode::NestedMc { inner_paths: 100, eval_up_to: 20, seed: 11 },
    )?;
    println!("\ncubic drift, f = tanh:");
    for k in [1u64, 5, 10, 20] {
        let d = ledger.decomposition(k)?;
        println!("k = {k:>2}: Z_k = {:>8.4}, M~ = {:>8.4}, residual {:.1e}", ledger.martingale_increment(k)?, d.m_tilde, d.residual);
    }
    Ok(())
}
