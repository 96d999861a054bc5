// SPDX-License-Identifier: MIT OR Apache-2.0

//! Applies each member of the degradation family to one rendered scene and
//! reports how far the patches move.
//!
//! `cargo run --example degradations`

use mesa_lab::degrade::{apply, DegradationSpec};
use mesa_lab::world::{World, WorldConfig};

fn main() -> mesa_lab::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let scene = world.generate_scene(11);
    let clean = world.render(&scene, 11);
    for spec in DegradationSpec::default_family(5) {
        let degraded = apply(&world, &clean, &spec)?;
        let moved: f64 = clean
            .patches
            .data()
            .iter()
            .zip(degraded.patches.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let changed = clean
            .patches
            .rows_iter()
            .zip(degraded.patches.rows_iter())
            .filter(|(a, b)| a != b)
            .count();
        println!(
            "{:>14}: {changed:>2}/{} patches changed, L2 distance {moved:.3}",
            spec.name(),
            clean.num_patches()
        );
    }
    Ok(())
}
