//! Splits the additive functional of one OU path into remainder, subsequence
//! martingale and tail terms, then looks at the quadratic variation average
//! and the Strassen-type functional of the martingale part.

use ergolil::grid::{build_grid, StepSpec};
use ergolil::integrate::{NoiseSource, SchemeSpec};
use ergolil::martingale::{strassen_functional, LedgerMode, MartingaleLedger};
use ergolil::model::{Model, SodeModel, TestFunction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::Sode(SodeModel::ornstein_uhlenbeck(1.0, 1.0)?);
    let grid = build_grid(StepSpec::harmonic(), 200_000)?;
    let f = TestFunction::identity();
    let noise = NoiseSource::counter(2026, 0);
    let ledger = MartingaleLedger::record(&model, &SchemeSpec::bem(), &grid, &f, 0.0, &[0.0], &noise, LedgerMode::ClosedFormLinear)?;

    println!("{:>8} {:>8} {:>10} {:>10} {:>10} {:>10}", "k", "t_k", "S_k", "R", "M~", "R~");
    for k in [1u64, 10, 100, 1_000, 10_000, 100_000, 200_000] {
        let d = ledger.decomposition(k)?;
        println!("{k:>8} {:>8.3} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", d.t_k, d.s, d.r, d.m_tilde, d.r_tilde);
    }

    let n = ledger.index().k_max();
    println!("\nqv average over {n} blocks: {:.4} (v^2 = 1)", ledger.qv_average(n)?);
    let (m, t) = ledger.subsequence_martingale(n)?;
    for s in [0.25, 0.5, 0.75, 1.0] {
        println!("Lambda_N({s}) = {:.4}", strassen_functional(&m, &t, 1.0, n as usize, s)?);
    }
    Ok(())
}
