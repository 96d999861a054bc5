// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::Rng;

use super::*;
use crate::artifact::rng_for;
use crate::tensor::softmax;
use crate::world::{Corpus, World, WorldConfig, EOS};

fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        mlp_hidden: 12,
        patch_dim: 3,
        visual_tokens: 4,
        vocab_size: 11,
        max_seq_len: 14,
    }
}

/// Init scaled up so activations are far from trivial.
fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, &mut rng_for(seed, "test/init")).unwrap();
    let mut rng = rng_for(seed, "test/perturb");
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = *v * 20.0 + rng.gen_range(-0.05..0.05);
        }
    }
    p
}

fn random_visual(cfg: &ModelConfig, seed: u64) -> Matrix {
    Matrix::randn(cfg.visual_tokens, cfg.d_model, 1.0, &mut rng_for(seed, "test/visual"))
}

fn request(cfg: &ModelConfig, seed: u64) -> GenerationRequest {
    GenerationRequest {
        visual: random_visual(cfg, seed),
        prompt: vec![1, 3, 4],
        sample_seed: seed,
    }
}

fn random_injection(cfg: &ModelConfig, alpha: f64, start: usize) -> InjectionSpec {
    let mut rng = rng_for(5, "test/dirs");
    InjectionSpec {
        directions: (0..cfg.layers)
            .map(|_| Some((0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect(),
        alpha,
        start_position: start,
    }
}

#[test]
fn alpha_zero_is_bit_identical() {
    let cfg = small_config();
    let p = random_params(&cfg, 1);
    let v = random_visual(&cfg, 2);
    let text = [1, 3, 4, 7, 8];
    let plain = forward(&p, &v, &text, None).unwrap();
    for inj in [
        random_injection(&cfg, 0.0, 0),
        InjectionSpec {
            directions: vec![Some(vec![0.0; 8]), None],
            alpha: 3.0,
            start_position: 0,
        },
    ] {
        let out = forward(&p, &v, &text, Some(&inj)).unwrap();
        assert_eq!(out.logits, plain.logits);
        assert_eq!(out.hidden, plain.hidden);
    }
}

#[test]
fn injection_is_additive_at_target_positions() {
    let cfg = small_config();
    let p = random_params(&cfg, 3);
    let v = random_visual(&cfg, 4);
    let text = [1, 3, 4, 9];
    let start = cfg.visual_tokens + 2;
    let mut inj = random_injection(&cfg, 0.7, start);
    inj.directions[1] = None;
    let plain = forward(&p, &v, &text, None).unwrap();
    let steered = forward(&p, &v, &text, Some(&inj)).unwrap();
    let d = inj.directions[0].as_ref().unwrap();
    for pos in 0..cfg.visual_tokens + text.len() {
        let a = plain.hidden.at(1, pos);
        let b = steered.hidden.at(1, pos);
        for k in 0..cfg.d_model {
            let want = if pos >= start { 0.7 * d[k] } else { 0.0 };
            assert!((b[k] - a[k] - want).abs() < 1e-12);
        }
        assert_eq!(plain.hidden.at(0, pos), steered.hidden.at(0, pos));
    }
}

#[test]
fn hidden_state_shapes() {
    let cfg = small_config();
    let p = random_params(&cfg, 3);
    let out = forward(&p, &random_visual(&cfg, 1), &[1, 3], None).unwrap();
    assert_eq!(out.hidden.num_layers(), cfg.layers + 1);
    for m in &out.hidden.layers {
        assert_eq!(m.shape(), (cfg.visual_tokens + 2, cfg.d_model));
    }
    let emb = p.embed_text(&[1, 3], 0).unwrap();
    assert_eq!(
        out.hidden.layers[0].slice_rows(cfg.visual_tokens, cfg.visual_tokens + 2),
        emb
    );
}

/// Straight-line forward written without the engine's helpers.
fn oracle_logits(p: &ModelParams, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let dh = d / cfg.heads;
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
        (0..d).map(|j| (x[j] - m) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
    };
    let lin = |x: &[f64], w: &Matrix, b: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let mut h: Vec<Vec<f64>> = input.to_vec();
    for lp in &p.layers {
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|x| lin(&ln(x, &lp.ln1_g, &lp.ln1_b), &lp.w_qkv, &lp.b_qkv))
            .collect();
        let mut next = Vec::new();
        for t in 0..h.len() {
            let mut att = vec![0.0; d];
            for head in 0..cfg.heads {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dh)
                            .map(|k| qkv[t][r.start + k] * qkv[s][d + r.start + k])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for s in 0..=t {
                    for k in 0..dh {
                        att[r.start + k] += w[s] * qkv[s][2 * d + r.start + k];
                    }
                }
            }
            let o = lin(&att, &lp.w_o, &lp.b_o);
            let mid: Vec<f64> = (0..d).map(|j| h[t][j] + o[j]).collect();
            let f1: Vec<f64> = lin(&ln(&mid, &lp.ln2_g, &lp.ln2_b), &lp.w_fc1, &lp.b_fc1)
                .into_iter()
                .map(gelu)
                .collect();
            let f2 = lin(&f1, &lp.w_fc2, &lp.b_fc2);
            next.push((0..d).map(|j| mid[j] + f2[j]).collect());
        }
        h = next;
    }
    h.iter()
        .map(|x| lin(&ln(x, &p.lnf_g, &p.lnf_b), &p.unembed, &p.unembed_b))
        .collect()
}

#[test]
fn hand_set_model_matches_manual_forward() {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 4,
        heads: 2,
        mlp_hidden: 4,
        patch_dim: 2,
        visual_tokens: 2,
        vocab_size: 5,
        max_seq_len: 6,
    };
    let mut p = ModelParams::zeros(&cfg);
    let mut k = 0.0f64;
    // Deterministic hand-set values: a slowly varying sine sequence.
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            k += 1.0;
            *v = (0.37 * k).sin() * 0.8;
        }
    }
    let visual = Matrix::from_rows(&[vec![0.5, -0.25, 1.0, 0.0], vec![-1.0, 0.75, 0.1, 0.3]]);
    let text = [1, 4, 2];
    let out = forward(&p, &visual, &text, None).unwrap();
    let mut input: Vec<Vec<f64>> = visual.rows_iter().map(|r| r.to_vec()).collect();
    for (i, &t) in text.iter().enumerate() {
        input.push(
            (0..4)
                .map(|j| p.tok_emb.get(t as usize, j) + p.text_pos.get(i, j))
                .collect(),
        );
    }
    let oracle = oracle_logits(&p, &input);
    for (r, row) in oracle.iter().enumerate() {
        for (a, b) in out.logits.row(r).iter().zip(row) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn embed_visual_matches_matmul_oracle_and_is_linear() {
    let cfg = small_config();
    let p = random_params(&cfg, 8);
    let mut rng = rng_for(8, "grid");
    let mk = |m: Matrix| crate::world::PatchGrid {
        grid_h: 2,
        grid_w: 2,
        patches: m,
        provenance: crate::world::Provenance {
            scene_seed: None,
            tag: "t".into(),
        },
    };
    let a = Matrix::randn(4, 3, 1.0, &mut rng);
    let b = Matrix::randn(4, 3, 1.0, &mut rng);
    let ea = p.embed_visual(&mk(a.clone())).unwrap();
    for i in 0..4 {
        for j in 0..cfg.d_model {
            let want: f64 = (0..3).map(|k| a.get(i, k) * p.patch_proj.get(k, j)).sum::<f64>() + p.visual_pos.get(i, j);
            assert!((ea.get(i, j) - want).abs() < 1e-6);
        }
    }
    let mut sum = a.clone();
    sum.add_assign(&b);
    let eb = p.embed_visual(&mk(b)).unwrap();
    let e0 = p.embed_visual(&mk(Matrix::zeros(4, 3))).unwrap();
    let eab = p.embed_visual(&mk(sum)).unwrap();
    for k in 0..eab.data().len() {
        assert!((ea.data()[k] + eb.data()[k] - e0.data()[k] - eab.data()[k]).abs() < 1e-12);
    }
    assert!(p.embed_visual(&mk(Matrix::zeros(3, 3))).is_err());
}

#[test]
fn overlong_sequence_is_input_error() {
    let cfg = small_config();
    let p = random_params(&cfg, 1);
    let text = vec![4; cfg.max_seq_len - cfg.visual_tokens + 1];
    assert_eq!(
        forward(&p, &random_visual(&cfg, 1), &text, None)
            .unwrap_err()
            .exit_code(),
        2
    );
}

#[test]
fn teacher_forcing_reproduces_trace_logits() {
    let cfg = small_config();
    let p = random_params(&cfg, 11);
    for strategy in DecodeStrategy::all(3) {
        for seed in 0..4 {
            let req = request(&cfg, seed);
            let inj = random_injection(&cfg, 0.3, cfg.visual_tokens + req.prompt.len() - 1);
            for injection in [None, Some(&inj)] {
                let tr = generate(&p, &req, &strategy, 7, injection, false).unwrap();
                assert_eq!(tr.logits.len(), tr.generated.len());
                let tf =
                    teacher_forced_logits(&p, &req.visual, &tr.full_sequence(), req.prompt.len(), injection).unwrap();
                assert_eq!(tf.rows(), tr.generated.len());
                for (t, l) in tr.logits.iter().enumerate() {
                    assert_eq!(tf.row(t), &l[..]);
                }
            }
        }
    }
}

#[test]
fn batched_generation_equals_single() {
    let cfg = small_config();
    let p = random_params(&cfg, 12);
    let reqs: Vec<_> = (0..5).map(|s| request(&cfg, s)).collect();
    let strategy = DecodeStrategy::from_name("top_p_temp", 9).unwrap();
    let batch = generate_batch(&p, &reqs, &strategy, 8, None, true).unwrap();
    for (r, b) in reqs.iter().zip(&batch) {
        assert_eq!(&generate(&p, r, &strategy, 8, None, true).unwrap(), b);
    }
}

#[test]
fn single_token_sequence_gives_first_step_logits() {
    let cfg = small_config();
    let p = random_params(&cfg, 13);
    let v = random_visual(&cfg, 13);
    let tf = teacher_forced_logits(&p, &v, &[1], 1, None).unwrap();
    assert_eq!(tf.rows(), 1);
    assert_eq!(tf.row(0), &first_step_logits(&p, &v, &[1]).unwrap()[..]);
}

#[test]
fn eos_dominant_model_stops_immediately() {
    let cfg = small_config();
    let mut p = random_params(&cfg, 14);
    p.unembed_b[EOS as usize] = 1e4;
    let tr = generate(&p, &request(&cfg, 1), &DecodeStrategy::Greedy, 8, None, false).unwrap();
    assert_eq!(tr.generated, vec![EOS]);
    assert_eq!(tr.stop, StopReason::Eos);
    assert!(tr.content().is_empty());
}

#[test]
fn tiny_temperature_matches_greedy() {
    let cfg = small_config();
    let p = random_params(&cfg, 15);
    for seed in 0..6 {
        let req = request(&cfg, seed);
        let g = generate(&p, &req, &DecodeStrategy::Greedy, 8, None, false).unwrap();
        let t = generate(
            &p,
            &req,
            &DecodeStrategy::Temperature { t: 1e-4, seed: 77 },
            8,
            None,
            false,
        )
        .unwrap();
        assert_eq!(g.generated, t.generated);
    }
}

#[test]
fn full_top_k_matches_categorical_oracle() {
    let mut rng = rng_for(3, "logits");
    let logits: Vec<f64> = (0..11).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let strategy = DecodeStrategy::TopK { k: 11, seed: 0 };
    let p = softmax(&logits);
    let mut a = rng_for(21, "draws");
    let mut b = rng_for(21, "draws");
    for _ in 0..2000 {
        let got = strategy.select(&logits, &mut a);
        let u: f64 = b.gen();
        let mut cum = 0.0;
        let want = p
            .iter()
            .position(|&pi| {
                cum += pi;
                cum > u
            })
            .unwrap_or(p.len() - 1);
        assert_eq!(got, want);
    }
}

#[test]
fn greedy_ties_pick_lowest_id() {
    let s = DecodeStrategy::Greedy;
    assert_eq!(s.select(&[0.0, 2.0, 2.0, 1.0], &mut rng_for(0, "x")), 1);
    assert!(DecodeStrategy::from_name("beam", 0).is_err());
}

#[test]
fn backward_matches_finite_differences() {
    let cfg = small_config();
    let p = random_params(&cfg, 16);
    let v = random_visual(&cfg, 16);
    let text = [1, 3, 5, 7];
    let input = {
        let mut x = v.clone();
        for r in p.embed_text(&text, 0).unwrap().rows_iter() {
            x.push_row(r);
        }
        x
    };
    let weights = Matrix::randn(input.rows(), cfg.vocab_size, 1.0, &mut rng_for(1, "w"));
    let loss = |params: &ModelParams, x: &Matrix| -> f64 {
        let mut st = SeqState::new(&params.config);
        let out = extend(params, &mut [&mut st], std::slice::from_ref(x), None, None);
        out[0].data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut st = SeqState::new(&cfg);
    let mut tape = ForwardTape::new();
    extend(&p, &mut [&mut st], std::slice::from_ref(&input), None, Some(&mut tape));
    let mut grads = ModelParams::zeros(&cfg);
    let dinput = backward(&p, &tape, &weights, &mut grads);

    let h = 1e-5;
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_views: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
    for (ti, name) in names.iter().enumerate() {
        if ["patch_proj", "visual_pos", "tok_emb", "text_pos"].contains(&name.as_str()) {
            continue;
        }
        let len = grad_views[ti].len();
        for idx in (0..len).step_by((len / 5).max(1)) {
            let mut plus = p.clone();
            plus.tensors_mut()[ti][idx] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti][idx] -= h;
            let num = (loss(&plus, &input) - loss(&minus, &input)) / (2.0 * h);
            let ana = grad_views[ti][idx];
            assert!(
                (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                "{name}[{idx}]: {ana} vs {num}"
            );
        }
    }
    for idx in (0..input.data().len()).step_by(7) {
        let mut plus = input.clone();
        plus.data_mut()[idx] += h;
        let mut minus = input.clone();
        minus.data_mut()[idx] -= h;
        let num = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * h);
        assert!((num - dinput.data()[idx]).abs() <= 1e-5 * (1.0 + num.abs()));
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small_config();
    let mut p = random_params(&cfg, 17);
    p.round_to_f32();
    let bytes = p.to_bytes();
    let back = ModelParams::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, p);
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n / 2] ^= 1;
    assert!(ModelParams::from_bytes(&bad, Path::new("mem")).is_err());
}

fn tiny_world() -> World {
    World::new(WorldConfig {
        objects: ["table", "chair", "dog", "person"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        object_weights: vec![],
        grid_h: 2,
        grid_w: 2,
        patch_dim: 4,
        min_objects: 1,
        max_objects: 2,
        planted: vec![],
        ..WorldConfig::default()
    })
    .unwrap()
}

fn tiny_model_config(world: &World) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        mlp_hidden: 32,
        patch_dim: 4,
        visual_tokens: 4,
        vocab_size: world.vocab().len(),
        max_seq_len: 4 + 3 + 12,
    }
}

#[test]
fn single_sample_is_memorized() {
    let world = tiny_world();
    let corpus = Corpus::generate(&world, 1, 3, "train");
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 1,
        lr: 1e-2,
        warmup_steps: 5,
        skip_checks: true,
        ..TrainConfig::default()
    };
    let empty = Corpus {
        world_hash: corpus.world_hash,
        records: vec![],
    };
    let (_, report) = train_base(&world, &corpus, &empty, &tiny_model_config(&world), &cfg, 5).unwrap();
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn training_is_deterministic() {
    let world = tiny_world();
    let corpus = Corpus::generate(&world, 12, 3, "train");
    let held = Corpus::generate(&world, 4, 3, "heldout");
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        skip_checks: true,
        eval_max_new_tokens: 8,
        ..TrainConfig::default()
    };
    let mc = tiny_model_config(&world);
    let (a, ra) = train_base(&world, &corpus, &held, &mc, &cfg, 9).unwrap();
    let (b, rb) = train_base(&world, &corpus, &held, &mc, &cfg, 9).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(ra, rb);
}

#[test]
fn empty_corpus_is_rejected() {
    let world = tiny_world();
    let empty = Corpus {
        world_hash: world.content_hash(),
        records: vec![],
    };
    let err = train_base(
        &world,
        &empty,
        &empty,
        &tiny_model_config(&world),
        &TrainConfig::default(),
        1,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
