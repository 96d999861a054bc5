// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checks the analytic gradient of the perturbation objective against
//! central finite differences on random small instances.
//!
//! `cargo run --release --example gradient_check`

use mesa_lab::pipeline::stages::gradcheck_battery;

fn main() -> mesa_lab::Result<()> {
    let summary = gradcheck_battery(24, 42)?;
    for r in summary.reports.iter().take(6) {
        println!(
            "{:?}: {} parameters, |grad|max {:.2e}, relative error {:.2e}",
            r.objective, r.parameters, r.max_abs_gradient, r.max_relative_error
        );
    }
    println!(
        "{} checked, {} skipped, worst relative error {:.2e} (tolerance {:.0e}): {}",
        summary.checked,
        summary.skipped,
        summary.max_relative_error,
        summary.tolerance,
        if summary.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
