//! Checks the exponent inequalities and the four step-size conditions for a
//! few grids, printing the verdict table for each.

use ergolil::assume::{
    check_exponent_constraints, check_step_conditions, largest_feasible_gamma, ConstraintContext, DecayLaw, ExponentParams,
    StepConditionInputs,
};
use ergolil::grid::StepSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inputs = StepConditionInputs {
        gamma: 1.0,
        alpha: 1.0,
        l_tilde: 0.5,
        rho: DecayLaw::Exponential { rate: 1.0 },
        rho_tau: DecayLaw::Exponential { rate: 0.5 },
        horizon: 1_000_000,
    };
    for (name, spec) in [
        ("harmonic", StepSpec::harmonic()),
        ("power 0.5", StepSpec::power(0.5)),
        ("constant 0.01", StepSpec::constant(0.01)),
    ] {
        println!("== {name}");
        print!("{}", check_step_conditions(&spec, &inputs)?.table());
    }

    let mut params = ExponentParams::sode(8.0, 100.0, 3.0);
    params.p = 2.0;
    for context in ConstraintContext::ALL {
        let report = check_exponent_constraints(&params, context)?;
        println!("\n== {} (all pass: {})", context.name(), report.all_pass());
        print!("{}", report.table());
        // A coarse search, not a sharp bound.
        println!("largest feasible gamma on the 0.05 grid: {:?}", largest_feasible_gamma(&params, context));
    }
    Ok(())
}
