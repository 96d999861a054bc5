// SPDX-License-Identifier: MIT OR Apache-2.0

//! Samples scenes from the synthetic world and prints their captions,
//! marking planted co-occurrence hallucinations.
//!
//! `cargo run --example world_and_captions`

use mesa_lab::world::{World, WorldConfig};

fn main() -> mesa_lab::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let vocab = world.vocab();
    println!("vocabulary: {} tokens, {} objects", vocab.len(), vocab.num_objects());
    println!("prompt: {}", vocab.decode(&world.prompt()));
    for seed in 0..8 {
        let scene = world.generate_scene(seed);
        let caption = world.generate_caption(&scene, world.prior(), seed);
        let present: Vec<&str> = scene
            .objects
            .iter()
            .map(|&c| vocab.token(vocab.object_token(c)))
            .collect();
        let planted: Vec<&str> = caption
            .iter()
            .filter_map(|&t| vocab.object_class(t))
            .filter(|c| !scene.contains(*c))
            .map(|c| vocab.token(vocab.object_token(c)))
            .collect();
        let grid = world.render(&scene, seed);
        println!(
            "scene {seed}: objects {present:?} in cells {:?}, {}x{} patches\n  caption: {}\n  hallucinated: {planted:?}",
            scene.cells,
            grid.grid_h,
            grid.grid_w,
            vocab.decode(&[world.prompt(), caption.clone()].concat())
        );
    }
    Ok(())
}
