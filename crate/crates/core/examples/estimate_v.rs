//! Three routes to the fluctuation constant v of an OU time average: the
//! closed form, batch means along one long path, and the ensemble variance
//! of S_T / sqrt(T).

use ergolil::grid::{build_grid, StepSpec};
use ergolil::integrate::{simulate_path, NoiseSource, Observer, SchemeSpec, StepView};
use ergolil::lilstat::{v_ensemble, v_exact_linear, BlockSums};
use ergolil::mc::{run_ensemble, EnsembleSpec};
use ergolil::model::{Model, SodeModel, TestFunction};

struct Blocks(BlockSums);

impl Observer for Blocks {
    fn on_step(&mut self, view: &StepView<'_>) {
        self.0.push(view.tau, view.state[0]).expect("finite");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (a, sigma) = (2.0, 1.0);
    let model = Model::Sode(SodeModel::ornstein_uhlenbeck(a, sigma)?);
    let exact = v_exact_linear(a, sigma)?;
    println!("exact        v^2 = {:.4}", exact.v2);

    // One long path: t ~ 4 n^(1/4) = 160 on the power grid.
    let grid = build_grid(StepSpec::power(0.75), 2_560_000)?;
    let mut blocks = Blocks(BlockSums::new(grid.horizon().sqrt(), 0.0)?);
    simulate_path(&model, &SchemeSpec::bem(), &grid, &[0.0], &NoiseSource::counter(1, 0), &mut [&mut blocks])?;
    let bm = blocks.0.estimate()?;
    println!("batch means  v^2 = {:.4} +- {:.4} ({} blocks)", bm.v2, bm.stderr, bm.count);

    let grid = build_grid(StepSpec::power(0.75), 160_000)?;
    let spec = EnsembleSpec::new(model, SchemeSpec::bem(), grid, vec![0.0], TestFunction::identity(), 1, 400);
    let summary = run_ensemble(&spec, 4, false)?;
    let ens = v_ensemble(&summary.finals())?;
    println!("ensemble     v^2 = {:.4} +- {:.4} ({} paths)", ens.v2, ens.stderr, ens.count);
    Ok(())
}
