// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scores a few captions against their scenes with CHAIR_S, CHAIR_I and recall.
//!
//! `cargo run --example chair_metrics`

use mesa_lab::analyze::chair_from_captions;
use mesa_lab::world::{Scene, TokenId, World, WorldConfig};

fn main() -> mesa_lab::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let vocab = world.vocab();
    let class = |name: &str| {
        vocab
            .id(name)
            .and_then(|t| vocab.object_class(t))
            .expect("known object")
    };
    let cases = [
        ("a table and a cup .", vec!["table", "cup"]),
        ("a table and a chair .", vec!["table"]),
        ("a dog and a person .", vec!["dog", "bed"]),
    ];
    let mut captions: Vec<Vec<TokenId>> = Vec::new();
    let mut scenes = Vec::new();
    for (i, (text, objects)) in cases.iter().enumerate() {
        captions.push(
            text.split_whitespace()
                .map(|t| vocab.id(t).expect("known token"))
                .collect(),
        );
        scenes.push(Scene {
            seed: i as u64,
            objects: objects.iter().map(|o| class(o)).collect(),
            cells: (0..objects.len()).collect(),
        });
    }
    let refs: Vec<&[TokenId]> = captions.iter().map(Vec::as_slice).collect();
    let r = chair_from_captions(&refs, &scenes, vocab)?;
    println!(
        "CHAIR_S {:.3}  CHAIR_I {:.3}  recall {:.3}  length {:.2}",
        r.chair_s, r.chair_i, r.recall, r.avg_length
    );
    println!("hallucinated objects: {:?}", r.per_object);
    Ok(())
}
