// SPDX-License-Identifier: MIT OR Apache-2.0

//! Builds degradation supervision for a small model, trains the bounded
//! perturbation network on it and reports the loss before and after.
//!
//! `cargo run --release --example perturbation`

use mesa_lab::artifact::rng_for;
use mesa_lab::degrade::DegradationSpec;
use mesa_lab::model::ModelParams;
use mesa_lab::perturb::{train_perturbation, LossConfig};
use mesa_lab::pipeline::LabConfig;
use mesa_lab::supervision::build_supervision;
use mesa_lab::world::{Corpus, World};

fn main() -> mesa_lab::Result<()> {
    let cfg = LabConfig::default().resolved();
    let world = World::new(cfg.world.clone())?;
    let model = ModelParams::init(&cfg.model, &mut rng_for(1, "example/model"))?;
    let corpus = Corpus::generate(&world, 48, 3, "supervision");
    let cache = build_supervision(&model, &world, &corpus, &DegradationSpec::default_family(3), 3)?;
    let first = &cache.records[0];
    println!(
        "{} records x {} conditions, condition weights of record 0: {:.3?}",
        cache.records.len(),
        cache.num_conditions(),
        first.weights
    );
    let loss = LossConfig {
        epochs: 5,
        ..cfg.perturb.clone()
    };
    let (phi, report) = train_perturbation(&cache, &model, &world, &corpus, &loss, 4)?;
    println!(
        "initial loss {:.5} (hall {:.5}, preserve {:.5})",
        report.initial.total, report.initial.hall, report.initial.preserve
    );
    for (e, parts) in report.epochs.iter().enumerate() {
        println!("epoch {e}: {:.5}", parts.total);
    }
    println!("final loss {:.5}, epsilon {}", report.final_loss.total, phi.epsilon);
    Ok(())
}
