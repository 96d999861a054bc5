// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decodes one scene with every strategy, then shows that batched decoding
//! and teacher forcing reproduce the decoded logits bit for bit.
//!
//! `cargo run --release --example decoding`

use mesa_lab::artifact::rng_for;
use mesa_lab::model::{
    generate, generate_batch, teacher_forced_logits, DecodeStrategy, GenerationRequest, ModelParams,
};
use mesa_lab::pipeline::LabConfig;
use mesa_lab::world::World;

fn main() -> mesa_lab::Result<()> {
    let cfg = LabConfig::default().resolved();
    let world = World::new(cfg.world.clone())?;
    let model = ModelParams::init(&cfg.model, &mut rng_for(1, "example/model"))?;
    let requests: Vec<GenerationRequest> = (0..4)
        .map(|s| {
            let scene = world.generate_scene(s);
            Ok(GenerationRequest {
                visual: model.embed_visual(&world.render(&scene, s))?,
                prompt: world.prompt(),
                sample_seed: s,
            })
        })
        .collect::<mesa_lab::Result<_>>()?;
    for strategy in DecodeStrategy::all(7) {
        let t = generate(&model, &requests[0], &strategy, 12, None, false)?;
        println!("{:>11}: {}", strategy.name(), world.vocab().decode(&t.generated));
    }
    let strategy = DecodeStrategy::Greedy;
    let batch = generate_batch(&model, &requests, &strategy, 12, None, false)?;
    for (req, t) in requests.iter().zip(&batch) {
        let alone = generate(&model, req, &strategy, 12, None, false)?;
        let forced = teacher_forced_logits(&model, &req.visual, &t.full_sequence(), req.prompt.len(), None)?;
        let same = (0..t.logits.len()).all(|i| forced.row(i) == t.logits[i].as_slice());
        println!(
            "sample {}: batch == alone {}, teacher forcing == decoding {same}",
            req.sample_seed,
            alone == *t
        );
    }
    Ok(())
}
