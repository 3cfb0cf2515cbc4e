//! Step-size families, their times, and the quasi-uniform subsequence that
//! turns a decreasing-step grid back into roughly unit spacing.

use ergolil::grid::{build_grid, quasi_uniform_index, StepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, spec) in [
        ("harmonic", StepSpec::harmonic()),
        ("power 0.75", StepSpec::power(0.75)),
        ("constant 0.01", StepSpec::constant(0.01)),
    ] {
        let grid = build_grid(spec, 100_000)?;
        println!(
            "{name:>14}: tau_1 = {:.3}, tau_n = {:.3e}, t_n = {:.3}, sum diverges: {}",
            grid.step(1),
            grid.step(grid.n_max()),
            grid.horizon(),
            spec.sum_diverges()
        );
    }

    let grid = build_grid(StepSpec::harmonic(), 100_000)?;
    let k_max = grid.horizon().floor() as u64;
    let index = quasi_uniform_index(&grid, k_max)?;
    println!("\nharmonic subsequence n(k) with t_n(k) <= k < t_n(k)+1:");
    for k in 0..=k_max {
        println!("  k = {k:>2}  n(k) = {:>6}  t~_k = {:.4}", index.n_of(k), index.tilde_time(k));
    }
    // Asking past the horizon is an error, not a clamp.
    if let Err(e) = quasi_uniform_index(&grid, k_max + 1) {
        println!("\nk_max = {}: {e}", k_max + 1);
    }
    Ok(())
}
