// SPDX-License-Identifier: MIT OR Apache-2.0

//! Base-model training on the synthetic caption corpus.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analyze::chair_metrics;
use crate::artifact::{rng_for, split_seed};
use crate::degrade::{apply, DegradationSpec};
use crate::error::{MesaError, Result};
use crate::tensor::{matmul_at_acc, softmax, Matrix};
use crate::world::{Corpus, CorpusRecord, TokenId, World, EOS};

use super::{
    backward, extend, forward, generate_batch, DecodeStrategy, ForwardTape, GenerationRequest, Gradients, ModelConfig,
    ModelParams, SeqState,
};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects which tensors are weight-decayed.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], decay: &[bool], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                if decay[i] {
                    p[j] -= lr * self.weight_decay * p[j];
                }
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Teacher-forced next-token accuracy required on held-out captions.
    pub min_heldout_accuracy: f64,
    /// Vanilla greedy CHAIR_S required on held-out scenes.
    pub min_chair_s: f64,
    /// Required ratio of planted-partner probability under text-only vs grounded input.
    pub min_planted_ratio: f64,
    pub eval_max_new_tokens: usize,
    /// Skip the precondition checks (unit tests on toy corpora).
    pub skip_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            min_heldout_accuracy: 0.8,
            min_chair_s: 0.25,
            min_planted_ratio: 2.0,
            eval_max_new_tokens: 32,
            skip_checks: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub heldout_accuracy: f64,
    pub vanilla_chair_s: f64,
    pub planted_ratio: f64,
}

struct EncodedSample {
    patches: Matrix,
    input: Matrix,
    text: Vec<TokenId>,
    /// (row within this sample, target token)
    targets: Vec<(usize, TokenId)>,
}

fn encode(params: &ModelParams, world: &World, rec: &CorpusRecord, noise_seed: u64) -> Result<EncodedSample> {
    let grid = world.render(&rec.scene(), noise_seed);
    let prompt = world.prompt();
    let mut full = prompt.clone();
    full.extend_from_slice(&rec.caption);
    full.push(EOS);
    let text = full[..full.len() - 1].to_vec();
    let mut input = params.embed_visual(&grid)?;
    for row in params.embed_text(&text, 0)?.rows_iter() {
        input.push_row(row);
    }
    let nv = params.config.visual_tokens;
    let targets = (prompt.len()..full.len()).map(|i| (nv + i - 1, full[i])).collect();
    Ok(EncodedSample {
        patches: grid.patches,
        input,
        text,
        targets,
    })
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    cfg.lr * (0.1 + 0.9 * cosine)
}

/// Mean cross-entropy of one minibatch and its gradients.
fn batch_loss_and_grads(params: &ModelParams, batch: &[EncodedSample]) -> (f64, Gradients) {
    let cfg = &params.config;
    let mut states: Vec<SeqState> = batch.iter().map(|_| SeqState::new(cfg)).collect();
    let mut refs: Vec<&mut SeqState> = states.iter_mut().collect();
    let inputs: Vec<Matrix> = batch.iter().map(|s| s.input.clone()).collect();
    let mut tape = ForwardTape::new();
    let logits = extend(params, &mut refs, &inputs, None, Some(&mut tape));

    let n_targets: usize = batch.iter().map(|s| s.targets.len()).sum();
    let mut dlogits = Matrix::zeros(tape.num_rows(), cfg.vocab_size);
    let mut loss = 0.0;
    for (s, sample) in batch.iter().enumerate() {
        for &(row, target) in &sample.targets {
            let p = softmax(logits[s].row(row));
            loss -= p[target as usize].max(1e-300).ln();
            let out = dlogits.row_mut(tape.row_of(s, row));
            for (o, pv) in out.iter_mut().zip(&p) {
                *o = pv / n_targets as f64;
            }
            out[target as usize] -= 1.0 / n_targets as f64;
        }
    }
    let mut grads = ModelParams::zeros(cfg);
    let dinput = backward(params, &tape, &dlogits, &mut grads);
    let nv = cfg.visual_tokens;
    for (s, sample) in batch.iter().enumerate() {
        let base = tape.row_of(s, 0);
        let dvis = dinput.slice_rows(base, base + nv);
        matmul_at_acc(&sample.patches, &dvis, &mut grads.patch_proj);
        grads.visual_pos.add_assign(&dvis);
        for (j, &tok) in sample.text.iter().enumerate() {
            let drow = dinput.row(base + nv + j);
            for (g, v) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(drow) {
                *g += v;
            }
            for (g, v) in grads.text_pos.row_mut(j).iter_mut().zip(drow) {
                *g += v;
            }
        }
    }
    (loss / n_targets as f64, grads)
}

/// Trains the frozen base model and verifies the planted-hallucination
/// preconditions on `heldout`.
pub fn train_base(
    world: &World,
    corpus: &Corpus,
    heldout: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    if corpus.is_empty() {
        return Err(MesaError::config("training corpus is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(MesaError::config("batch_size and epochs must be positive"));
    }
    model_config.validate()?;
    if model_config.vocab_size != world.vocab().len()
        || model_config.patch_dim != world.config().patch_dim
        || model_config.visual_tokens != world.config().num_cells()
    {
        return Err(MesaError::config(
            "model config does not match the world (vocab, patch dim or grid)",
        ));
    }
    let mut params = ModelParams::init(model_config, &mut rng_for(seed, "model/init"))?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let decay: Vec<bool> = names.iter().map(|n| ModelParams::decayed(n)).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);

    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &format!("model/epoch/{epoch}")));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let rec = &corpus.records[i];
                    encode(
                        &params,
                        world,
                        rec,
                        split_seed(rec.render_seed, &format!("epoch/{epoch}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_loss_and_grads(&params, &batch);
            if !loss.is_finite() {
                return Err(MesaError::TrainingFailure(format!("non-finite loss at step {step}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let grad_views: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, g)| g).collect();
            opt.step(params.tensors_mut(), &grad_views, &decay, lr_at(cfg, step, total_steps));
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / corpus.len() as f64);
    }
    params.round_to_f32();
    report.steps = step;

    if !heldout.is_empty() {
        report.heldout_accuracy = heldout_accuracy(&params, world, heldout)?;
        let (chair_s, ratio) = planted_checks(&params, world, heldout, cfg.eval_max_new_tokens)?;
        report.vanilla_chair_s = chair_s;
        report.planted_ratio = ratio;
    }
    if !cfg.skip_checks {
        let mut problems = Vec::new();
        if report.heldout_accuracy < cfg.min_heldout_accuracy {
            problems.push(format!(
                "held-out accuracy {:.3} < {:.3}",
                report.heldout_accuracy, cfg.min_heldout_accuracy
            ));
        }
        if report.vanilla_chair_s < cfg.min_chair_s {
            problems.push(format!(
                "vanilla CHAIR_S {:.3} < {:.3}",
                report.vanilla_chair_s, cfg.min_chair_s
            ));
        }
        if report.planted_ratio < cfg.min_planted_ratio {
            problems.push(format!(
                "planted text-only/grounded ratio {:.3} < {:.3}",
                report.planted_ratio, cfg.min_planted_ratio
            ));
        }
        if !problems.is_empty() {
            return Err(MesaError::TrainingFailure(format!(
                "{} (epoch losses {:?})",
                problems.join("; "),
                report.epoch_losses
            )));
        }
    }
    Ok((params, report))
}

/// Teacher-forced argmax accuracy over caption tokens (EOS included).
pub fn heldout_accuracy(params: &ModelParams, world: &World, heldout: &Corpus) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for rec in &heldout.records {
        let s = encode(params, world, rec, rec.render_seed)?;
        let visual = s.input.slice_rows(0, params.config.visual_tokens);
        let out = forward(params, &visual, &s.text, None)?;
        for &(row, target) in &s.targets {
            total += 1;
            if crate::tensor::argmax(out.logits.row(row)) == target as usize {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Vanilla greedy CHAIR_S on `heldout`, and the ratio of mean first-step
/// planted-partner probability under text-only input to that under the
/// grounded render (over scenes lacking the partner).
pub fn planted_checks(
    params: &ModelParams,
    world: &World,
    heldout: &Corpus,
    max_new_tokens: usize,
) -> Result<(f64, f64)> {
    let prompt = world.prompt();
    let scenes: Vec<_> = heldout.records.iter().map(CorpusRecord::scene).collect();
    let requests = heldout
        .records
        .iter()
        .map(|r| {
            Ok(GenerationRequest {
                visual: params.embed_visual(&world.render(&r.scene(), r.render_seed))?,
                prompt: prompt.clone(),
                sample_seed: r.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let traces = generate_batch(params, &requests, &DecodeStrategy::Greedy, max_new_tokens, None, false)?;
    let report = chair_metrics(&traces, &scenes, world.vocab())?;

    let text_only = DegradationSpec::text_only();
    let (mut text_mass, mut grounded_mass) = (0.0, 0.0);
    for (rec, req) in heldout.records.iter().zip(&requests) {
        let scene = rec.scene();
        let partners: Vec<usize> = world
            .planted_partners()
            .into_iter()
            .filter(|&p| !scene.contains(p))
            .collect();
        if partners.is_empty() {
            continue;
        }
        let grid = world.render(&scene, rec.render_seed);
        let degraded = params.embed_visual(&apply(world, &grid, &text_only)?)?;
        let p_text = softmax(first_step_logits(params, &degraded, &prompt)?.as_slice());
        let p_grounded = softmax(first_step_logits(params, &req.visual, &prompt)?.as_slice());
        for p in partners {
            let tok = world.vocab().object_token(p) as usize;
            text_mass += p_text[tok];
            grounded_mass += p_grounded[tok];
        }
    }
    let ratio = if grounded_mass > 0.0 {
        text_mass / grounded_mass
    } else if text_mass > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok((report.chair_s, ratio))
}

/// Logits at the first generation position.
pub fn first_step_logits(params: &ModelParams, visual: &Matrix, prompt: &[TokenId]) -> Result<Vec<f64>> {
    let out = forward(params, visual, prompt, None)?;
    Ok(out.logits.row(out.logits.rows() - 1).to_vec())
}
