//! Driving the command-line pipelines from code: parse an INI document,
//! inspect the resolved defaults, and run `verify` and `decompose`.

use ergolil::cli::{dispatch, parse_config, Command, RunOptions};

const CONFIG: &str = "
seed = 20261016

[model]
kind = sode      # cubic drift -x - x^3
sigma = 1

[grid]
kind = power
theta = 0.8
n_steps = 2000

[f]
kind = tanh

[martingale]
inner_paths = 50
eval_up_to = 200
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = parse_config(CONFIG)?;
    println!("resolved configuration:\n{}", cfg.to_ini());

    let out = std::env::temp_dir().join("ergolil-config-pipeline");
    let opts = RunOptions { out: out.clone(), workers: 2, fail_fast: false };
    let verify = dispatch(&cfg, Command::Verify, &opts)?;
    print!("{}", verify.report);
    let decompose = dispatch(&cfg, Command::Decompose, &opts)?;
    print!("{}", decompose.report);
    println!("artifacts in {}", out.display());

    // Typos are reported with a suggestion rather than ignored.
    if let Err(e) = parse_config(&format!("{CONFIG}\n[grid]\nthetta = 0.5\n")) {
        print!("{e}");
    }
    Ok(())
}
