// SPDX-License-Identifier: MIT OR Apache-2.0

//! Extracts rank-1 directions from synthetic hidden-state shifts and injects
//! them into generation at several strengths.
//!
//! `cargo run --release --example steering`

use mesa_lab::artifact::{rng_for, Hash32};
use mesa_lab::model::{generate_batch, DecodeStrategy, GenerationRequest, ModelParams};
use mesa_lab::pipeline::LabConfig;
use mesa_lab::steer::{extract_directions, intervene, DirectionMethod, InjectionScope, ShiftSet};
use mesa_lab::tensor::Matrix;
use mesa_lab::world::World;
use rand_distr::{Distribution, StandardNormal};

fn main() -> mesa_lab::Result<()> {
    let cfg = LabConfig::default().resolved();
    let world = World::new(cfg.world.clone())?;
    let model = ModelParams::init(&cfg.model, &mut rng_for(1, "example/model"))?;
    let d = cfg.model.d_model;

    // Shifts that vary mostly along one random axis per layer.
    let mut rng = rng_for(2, "example/shifts");
    let layers = (0..cfg.model.layers)
        .map(|_| {
            let axis: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut m = Matrix::zeros(0, d);
            for _ in 0..64 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let row: Vec<f64> = axis
                    .iter()
                    .map(|a| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        0.5 * a + z * a + 0.1 * e
                    })
                    .collect();
                m.push_row(&row);
            }
            m
        })
        .collect();
    let dirs = extract_directions(
        &ShiftSet { layers },
        1,
        DirectionMethod::Mesa,
        model.content_hash(),
        Hash32::of(b"none"),
    )?;

    let requests: Vec<GenerationRequest> = (0..3)
        .map(|s| {
            let scene = world.generate_scene(s);
            Ok(GenerationRequest {
                visual: model.embed_visual(&world.render(&scene, s))?,
                prompt: world.prompt(),
                sample_seed: s,
            })
        })
        .collect::<mesa_lab::Result<_>>()?;
    let vanilla = generate_batch(&model, &requests, &DecodeStrategy::Greedy, 10, None, false)?;
    for alpha in [0.0, 1.0, 4.0] {
        let traces = intervene(
            &model,
            &dirs,
            &requests,
            alpha,
            &DecodeStrategy::Greedy,
            10,
            InjectionScope::Generated,
        )?;
        for (t, v) in traces.iter().zip(&vanilla) {
            let drift = t.logits[0]
                .iter()
                .zip(&v.logits[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!(
                "alpha {alpha:.1}: {} (first-step max logit change {drift:.4})",
                world.vocab().decode(&t.generated)
            );
        }
    }
    Ok(())
}
