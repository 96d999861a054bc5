// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs every stage end to end into a run directory and prints the
//! behavioural criteria. Takes a few minutes on one core.
//!
//! `cargo run --release --example pipeline -- [OUT_DIR]`

use mesa_lab::pipeline::{stages, LabConfig, RunDir};

fn main() -> mesa_lab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let dir = RunDir::new(&out, LabConfig::default())?;
    stages::gen_corpus(&dir)?;
    let (_, train) = stages::train_base(&dir)?;
    println!(
        "base model: held-out accuracy {:.3}, vanilla CHAIR_S {:.3}",
        train.heldout_accuracy, train.vanilla_chair_s
    );
    stages::cache_supervision(&dir)?;
    stages::train_perturbation(&dir)?;
    stages::extract_directions(&dir)?;
    stages::baseline_directions(&dir)?;
    let (_, analysis) = stages::analyze(&dir, false)?;
    println!("tuned alpha {}", analysis.tuned_alpha);
    for c in &analysis.criteria {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("artifacts and reports in {out}");
    Ok(())
}
