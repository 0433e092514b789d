//! Runs the acceptance suite. Pass criterion ids as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 10`.

use std::process::ExitCode;

use fedsim_core::acceptance::{run_all, run_selected};

fn main() -> ExitCode {
    // libtest-style flags from `cargo test` are ignored.
    let ids: Vec<u8> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let outcomes = if ids.is_empty() {
        run_all()
    } else {
        match run_selected(&ids) {
            Ok(outcomes) => outcomes,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::FAILURE;
            }
        }
    };
    for outcome in &outcomes {
        println!("{outcome}");
    }
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
