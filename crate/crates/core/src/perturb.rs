// SPDX-License-Identifier: MIT OR Apache-2.0

//! The learnable token-wise visual perturbation, its truncated-KL
//! objective, training loop and finite-difference gradient check.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, rng_for, ByteReader, ByteWriter, Hash32};
use crate::error::{MesaError, Result};
use crate::model::{backward, extend, gelu, gelu_grad, AdamW, ForwardTape, ModelConfig, ModelParams, SeqState};
use crate::supervision::{SupervisionCache, SupervisionRecord};
use crate::tensor::{log_softmax, matmul, matmul_at_acc, matmul_bt, rank_descending, Matrix};
use crate::world::{Corpus, TokenId, World};

const MAGIC: &[u8; 8] = b"MESAPERT";
const VERSION: u32 = 1;
const ACTIVATION: &str = "gelu_tanh";

// ---------------------------------------------------------------------------
// The perturbation network
// ---------------------------------------------------------------------------

/// `δ = clip(W2 · gelu(W1 · x + b1) + b2, −ε, ε)` applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationParams {
    pub d_model: usize,
    pub hidden: usize,
    pub epsilon: f64,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub model_hash: Hash32,
    pub cache_hash: Hash32,
    pub manifest_hash: Hash32,
}

/// Intermediates of [`PerturbationParams::forward`].
pub struct DeltaCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
    out: Matrix,
}

impl PerturbationParams {
    /// Random first layer, zero output layer: the network starts at `δ = 0`.
    pub fn new<R: Rng>(d_model: usize, hidden: usize, epsilon: f64, rng: &mut R) -> Result<Self> {
        if d_model == 0 || hidden == 0 {
            return Err(MesaError::config("perturbation widths must be positive"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(MesaError::config("epsilon must be finite and >= 0"));
        }
        Ok(Self {
            d_model,
            hidden,
            epsilon,
            w1: Matrix::randn(d_model, hidden, 1.0 / (d_model as f64).sqrt(), rng),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, d_model),
            b2: vec![0.0; d_model],
            model_hash: Hash32::default(),
            cache_hash: Hash32::default(),
            manifest_hash: Hash32::default(),
        })
    }

    pub fn forward(&self, visual: &Matrix) -> Result<(Matrix, DeltaCache)> {
        if visual.cols() != self.d_model {
            return Err(MesaError::input(format!(
                "visual tokens have width {}, perturbation expects {}",
                visual.cols(),
                self.d_model
            )));
        }
        if !visual.is_finite() {
            return Err(MesaError::input("visual tokens contain non-finite values"));
        }
        let mut pre = matmul(visual, &self.w1);
        pre.add_row_vector(&self.b1);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = matmul(&act, &self.w2);
        out.add_row_vector(&self.b2);
        let mut delta = out.clone();
        let e = self.epsilon;
        delta.data_mut().iter_mut().for_each(|v| *v = v.clamp(-e, e));
        Ok((
            delta,
            DeltaCache {
                input: visual.clone(),
                pre,
                act,
                out,
            },
        ))
    }

    pub fn compute_delta(&self, visual: &Matrix) -> Result<Matrix> {
        Ok(self.forward(visual)?.0)
    }

    /// Accumulates `∂L/∂φ` into `grads` given `∂L/∂δ`. The clamp passes
    /// gradient only strictly inside `(−ε, ε)`.
    pub fn backward(&self, cache: &DeltaCache, ddelta: &Matrix, grads: &mut PerturbationParams) {
        let e = self.epsilon;
        let mut dout = ddelta.clone();
        for (d, &o) in dout.data_mut().iter_mut().zip(cache.out.data()) {
            if !(o > -e && o < e) {
                *d = 0.0;
            }
        }
        matmul_at_acc(&cache.act, &dout, &mut grads.w2);
        for (g, v) in grads.b2.iter_mut().zip(dout.column_sums()) {
            *g += v;
        }
        let mut dpre = matmul_bt(&dout, &self.w2);
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        matmul_at_acc(&cache.input, &dpre, &mut grads.w1);
        for (g, v) in grads.b1.iter_mut().zip(dpre.column_sums()) {
            *g += v;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.d_model, self.hidden),
            b1: vec![0.0; self.hidden],
            w2: Matrix::zeros(self.hidden, self.d_model),
            b2: vec![0.0; self.d_model],
            ..self.clone()
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w1.data_mut(), &mut self.b1, self.w2.data_mut(), &mut self.b2]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.d_model as u32);
        w.u32(self.hidden as u32);
        w.f64(self.epsilon);
        w.blob(ACTIVATION.as_bytes());
        for t in self.tensors() {
            w.f32s(t);
        }
        w.hash(&self.model_hash);
        w.hash(&self.cache_hash);
        w.hash(&self.manifest_hash);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported perturbation version {version}")));
        }
        let d = r.u32()? as usize;
        let h = r.u32()? as usize;
        let epsilon = r.f64()?;
        if r.blob()? != ACTIVATION.as_bytes() {
            return Err(r.error("unknown activation"));
        }
        let w1 = Matrix::from_vec(d, h, r.f32s(d * h)?);
        let b1 = r.f32s(h)?;
        let w2 = Matrix::from_vec(h, d, r.f32s(h * d)?);
        let b2 = r.f32s(d)?;
        let model_hash = r.hash()?;
        let cache_hash = r.hash()?;
        let manifest_hash = r.hash()?;
        r.finish()?;
        Ok(Self {
            d_model: d,
            hidden: h,
            epsilon,
            w1,
            b1,
            w2,
            b2,
            model_hash,
            cache_hash,
            manifest_hash,
        })
    }

    pub fn content_hash(&self) -> Hash32 {
        Hash32::of(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<Hash32> {
        let bytes = self.to_bytes();
        atomic_write(path, &bytes)?;
        Ok(Hash32::of(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Staleness check against the base model about to be steered.
    pub fn check_model(&self, model_hash: &Hash32) -> Result<()> {
        if &self.model_hash != model_hash {
            return Err(MesaError::Stale {
                what: "perturbation base model".into(),
                expected: model_hash.hex(),
                found: self.model_hash.hex(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Truncated KL objective
// ---------------------------------------------------------------------------

/// Which token ids a truncated KL is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SubsetRule {
    /// The `m` most probable tokens of the reference.
    TopM { m: usize },
    /// The reference's top `m` minus its top `exclude`.
    TopMExcluding { m: usize, exclude: usize },
}

impl SubsetRule {
    /// Token ids in descending reference probability (ties: lower id first).
    pub fn select(&self, reference_logits: &[f64]) -> Result<Vec<usize>> {
        let v = reference_logits.len();
        let (m, skip) = match *self {
            Self::TopM { m } => (m, 0),
            Self::TopMExcluding { m, exclude } => (m, exclude),
        };
        if m == 0 || m > v {
            return Err(MesaError::config(format!("subset size {m} outside 1..={v}")));
        }
        if skip >= m {
            return Err(MesaError::config(format!(
                "excluding {skip} of the top {m} leaves an empty subset"
            )));
        }
        let order = rank_descending(reference_logits);
        Ok(order[skip..m].to_vec())
    }

    /// True when the reference ranking is tied across a subset boundary.
    pub fn boundary_tied(&self, reference_logits: &[f64], tol: f64) -> bool {
        let order = rank_descending(reference_logits);
        let tied = |k: usize| {
            k > 0 && k < order.len() && (reference_logits[order[k - 1]] - reference_logits[order[k]]).abs() <= tol
        };
        match *self {
            Self::TopM { m } => tied(m),
            Self::TopMExcluding { m, exclude } => tied(m) || tied(exclude),
        }
    }
}

fn restricted_log_softmax(logits: &[f64], subset: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = subset.iter().map(|&i| logits[i]).collect();
    log_softmax(&sub)
}

/// `KL(P̃ ‖ Q̃)` where both distributions are renormalized over `subset`.
pub fn truncated_kl(p_logits: &[f64], q_logits: &[f64], subset: &[usize]) -> f64 {
    truncated_kl_with_grad(p_logits, q_logits, subset).0
}

/// Truncated KL and its gradient with respect to `p_logits`:
/// `∂/∂z_i = p̃_i (log p̃_i − log q̃_i − KL)` on the subset, zero elsewhere.
pub fn truncated_kl_with_grad(p_logits: &[f64], q_logits: &[f64], subset: &[usize]) -> (f64, Vec<f64>) {
    let lp = restricted_log_softmax(p_logits, subset);
    let lq = restricted_log_softmax(q_logits, subset);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let mut grad = vec![0.0; p_logits.len()];
    for (j, &i) in subset.iter().enumerate() {
        grad[i] = lp[j].exp() * (lp[j] - lq[j] - kl);
    }
    (kl.max(0.0), grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub m_hall: usize,
    pub m_excl: usize,
    /// Weight of the hallucination-alignment term (1, or 0 for the ablation).
    pub hall_weight: f64,
    /// Weight of the preservation term.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Hidden width of the perturbation network; 0 means the model width.
    pub hidden: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_hall: 50,
            m_excl: 5,
            hall_weight: 1.0,
            lambda: 1.0,
            epochs: 10,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            epsilon: 1.0,
            hidden: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.m_excl >= self.m_hall {
            return Err(MesaError::config("m_excl must be smaller than m_hall"));
        }
        if self.m_hall > vocab_size {
            return Err(MesaError::config(format!(
                "m_hall {} exceeds vocabulary {vocab_size}",
                self.m_hall
            )));
        }
        if !(self.hall_weight >= 0.0 && self.lambda >= 0.0) {
            return Err(MesaError::config("loss weights must be >= 0"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(MesaError::config("lr and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn hall_rule(&self) -> SubsetRule {
        SubsetRule::TopM { m: self.m_hall }
    }

    pub fn preserve_rule(&self) -> SubsetRule {
        SubsetRule::TopMExcluding {
            m: self.m_hall,
            exclude: self.m_excl,
        }
    }
}

/// Per-record subsets, fixed by the cached targets.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub hall: Vec<(f64, Vec<usize>, Vec<f64>)>,
    pub preserve: (Vec<usize>, Vec<f64>),
}

impl LossTargets {
    pub fn new(record: &SupervisionRecord, cfg: &LossConfig) -> Result<Self> {
        let hall = record
            .z_hall
            .iter()
            .zip(&record.weights)
            .map(|(z, &w)| Ok((w, cfg.hall_rule().select(z)?, z.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hall,
            preserve: (cfg.preserve_rule().select(&record.z_orig)?, record.z_orig.clone()),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub hall: f64,
    pub preserve: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.hall += o.hall;
        self.preserve += o.preserve;
        self.total += o.total;
    }
}

impl LossParts {
    fn scaled(self, s: f64) -> Self {
        Self {
            hall: self.hall * s,
            preserve: self.preserve * s,
            total: self.total * s,
        }
    }
}

/// `Σ_k w_k KL_trunc(P_ind ‖ P_hall^k)` over each target's top-m.
pub fn loss_hall(z_ind: &[f64], record: &SupervisionRecord, cfg: &LossConfig) -> Result<f64> {
    let t = LossTargets::new(record, cfg)?;
    Ok(t.hall.iter().map(|(w, s, z)| w * truncated_kl(z_ind, z, s)).sum())
}

/// `KL_trunc(P_ind ‖ P_orig)` over P_orig's top-m minus its top-j.
pub fn loss_preserve(z_ind: &[f64], record: &SupervisionRecord, cfg: &LossConfig) -> Result<f64> {
    let t = LossTargets::new(record, cfg)?;
    Ok(truncated_kl(z_ind, &t.preserve.1, &t.preserve.0))
}

/// Weighted objective and its gradient with respect to the induced logits.
pub fn objective(z_ind: &[f64], t: &LossTargets, cfg: &LossConfig) -> (LossParts, Vec<f64>) {
    let mut grad = vec![0.0; z_ind.len()];
    let mut hall = 0.0;
    for (w, subset, z) in &t.hall {
        let (kl, g) = truncated_kl_with_grad(z_ind, z, subset);
        hall += w * kl;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += cfg.hall_weight * w * b;
        }
    }
    let (preserve, g) = truncated_kl_with_grad(z_ind, &t.preserve.1, &t.preserve.0);
    for (a, b) in grad.iter_mut().zip(&g) {
        *a += cfg.lambda * b;
    }
    (
        LossParts {
            hall,
            preserve,
            total: cfg.hall_weight * hall + cfg.lambda * preserve,
        },
        grad,
    )
}

// ---------------------------------------------------------------------------
// Induced logits through the frozen model
// ---------------------------------------------------------------------------

/// One Stage II sample: clean visual tokens, prompt, fixed targets.
pub struct PerturbSample {
    pub visual: Matrix,
    pub targets: LossTargets,
}

/// Loss (summed over `batch`) and, when `grads` is given, its gradient.
fn batch_objective(
    model: &ModelParams,
    phi: &PerturbationParams,
    prompt: &[TokenId],
    batch: &[&PerturbSample],
    cfg: &LossConfig,
    grads: Option<&mut PerturbationParams>,
    scale: f64,
) -> Result<LossParts> {
    let mc = &model.config;
    let prompt_rows = model.embed_text(prompt, 0)?;
    let mut caches = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for s in batch {
        let (delta, cache) = phi.forward(&s.visual)?;
        let mut input = s.visual.clone();
        input.add_assign(&delta);
        for row in prompt_rows.rows_iter() {
            input.push_row(row);
        }
        inputs.push(input);
        caches.push(cache);
    }
    let mut states: Vec<SeqState> = batch.iter().map(|_| SeqState::new(mc)).collect();
    let mut refs: Vec<&mut SeqState> = states.iter_mut().collect();
    let want_grad = grads.is_some();
    let mut tape = ForwardTape::new();
    let logits = extend(
        model,
        &mut refs,
        &inputs,
        None,
        if want_grad { Some(&mut tape) } else { None },
    );
    let last = mc.visual_tokens + prompt.len() - 1;
    let mut parts = LossParts::default();
    let mut dlogits = if want_grad {
        Matrix::zeros(tape.num_rows(), mc.vocab_size)
    } else {
        Matrix::zeros(0, 0)
    };
    for (i, s) in batch.iter().enumerate() {
        let (p, g) = objective(logits[i].row(last), &s.targets, cfg);
        parts += p;
        if want_grad {
            for (d, v) in dlogits.row_mut(tape.row_of(i, last)).iter_mut().zip(&g) {
                *d = v * scale;
            }
        }
    }
    if let Some(grads) = grads {
        let mut scratch = ModelParams::zeros(mc);
        let dinput = backward(model, &tape, &dlogits, &mut scratch);
        for (i, cache) in caches.iter().enumerate() {
            let base = tape.row_of(i, 0);
            let ddelta = dinput.slice_rows(base, base + mc.visual_tokens);
            phi.backward(cache, &ddelta, grads);
        }
    }
    Ok(parts)
}

/// Logits at the first generation position with `δ` added to the visual tokens.
pub fn induced_logits(
    model: &ModelParams,
    phi: &PerturbationParams,
    visual: &Matrix,
    prompt: &[TokenId],
) -> Result<Vec<f64>> {
    let mut v = visual.clone();
    v.add_assign(&phi.compute_delta(visual)?);
    crate::model::first_step_logits(model, &v, prompt)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbTrainReport {
    pub initial: LossParts,
    /// Mean loss over each epoch's minibatches (before each update).
    pub epochs: Vec<LossParts>,
    pub final_loss: LossParts,
    pub warning: Option<String>,
}

fn mean_loss(
    model: &ModelParams,
    phi: &PerturbationParams,
    prompt: &[TokenId],
    samples: &[PerturbSample],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let mut total = LossParts::default();
    for chunk in samples.chunks(64) {
        let refs: Vec<&PerturbSample> = chunk.iter().collect();
        total += batch_objective(model, phi, prompt, &refs, cfg, None, 1.0)?;
    }
    Ok(total.scaled(1.0 / samples.len() as f64))
}

/// Builds the Stage II samples: clean visual tokens of each cached record.
pub fn perturb_samples(
    cache: &SupervisionCache,
    model: &ModelParams,
    world: &World,
    corpus: &Corpus,
    cfg: &LossConfig,
) -> Result<Vec<PerturbSample>> {
    cache.check(
        &model.content_hash(),
        &world.vocab().content_hash(),
        Some(&corpus.content_hash()),
    )?;
    let mut records: Vec<&SupervisionRecord> = cache.records.iter().collect();
    records.sort_by_key(|r| r.id);
    records
        .into_iter()
        .map(|r| {
            let rec = corpus
                .records
                .iter()
                .find(|c| c.id == r.id)
                .ok_or_else(|| MesaError::input(format!("cache record {} missing from corpus", r.id)))?;
            Ok(PerturbSample {
                visual: model.embed_visual(&world.render(&rec.scene(), rec.render_seed))?,
                targets: LossTargets::new(r, cfg)?,
            })
        })
        .collect()
}

/// Minimizes the mean objective over the cache with AdamW; the base model
/// is only read.
pub fn train_perturbation(
    cache: &SupervisionCache,
    model: &ModelParams,
    world: &World,
    corpus: &Corpus,
    cfg: &LossConfig,
    seed: u64,
) -> Result<(PerturbationParams, PerturbTrainReport)> {
    cfg.validate(model.config.vocab_size)?;
    if cache.records.is_empty() {
        return Err(MesaError::config("supervision cache is empty"));
    }
    let samples = perturb_samples(cache, model, world, corpus, cfg)?;
    let prompt = cache.spec.prompt.clone();
    let hidden = if cfg.hidden == 0 {
        model.config.d_model
    } else {
        cfg.hidden
    };
    let mut phi = PerturbationParams::new(
        model.config.d_model,
        hidden,
        cfg.epsilon,
        &mut rng_for(seed, "perturb/init"),
    )?;
    phi.model_hash = model.content_hash();
    phi.cache_hash = cache.content_hash();
    phi.manifest_hash = Hash32::of(&serde_json::to_vec(&(cfg, seed, phi.model_hash, phi.cache_hash)).expect("json"));

    let mut report = PerturbTrainReport {
        initial: mean_loss(model, &phi, &prompt, &samples, cfg)?,
        ..Default::default()
    };
    let sizes: Vec<usize> = phi.tensors().iter().map(|t| t.len()).collect();
    let decay = [true, false, true, false];
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    // A zero budget pins δ at zero; there is nothing to learn.
    let frozen = cfg.epsilon == 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &format!("perturb/epoch/{epoch}")));
        let mut epoch_loss = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut ids = chunk.to_vec();
            ids.sort_unstable();
            let batch: Vec<&PerturbSample> = ids.iter().map(|&i| &samples[i]).collect();
            let mut grads = phi.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            epoch_loss += batch_objective(model, &phi, &prompt, &batch, cfg, Some(&mut grads), scale)?;
            if !frozen {
                let g = grads.tensors();
                opt.step(phi.tensors_mut(), &g, &decay, cfg.lr);
            }
        }
        report.epochs.push(epoch_loss.scaled(1.0 / samples.len() as f64));
    }
    phi.round_to_f32();
    report.final_loss = mean_loss(model, &phi, &prompt, &samples, cfg)?;
    if !frozen && report.final_loss.total >= report.initial.total {
        report.warning = Some(format!(
            "loss did not decrease: initial {:.6}, final {:.6}",
            report.initial.total, report.final_loss.total
        ));
    }
    Ok((phi, report))
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Which scalar the check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedObjective {
    Hall,
    Preserve,
    Total,
    /// `½ Σ c_j (φ_j − t_j)²`, used to calibrate the checker.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: CheckedObjective,
    pub max_relative_error: f64,
    /// `‖∂L/∂φ‖∞` of the analytic gradient.
    pub max_abs_gradient: f64,
    pub parameters: usize,
    /// Why the instance was not checked, if it was skipped.
    pub skipped: Option<String>,
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` against central differences with step `h`.
pub fn central_difference_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut max_diff: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_n: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let n = (up - down) / (2.0 * h);
        max_diff = max_diff.max((analytic[i] - n).abs());
        max_a = max_a.max(analytic[i].abs());
        max_n = max_n.max(n.abs());
    }
    let denom = max_a.max(max_n);
    if denom == 0.0 {
        0.0
    } else {
        max_diff / denom
    }
}

/// A random small model, perturbation network and supervision record.
pub struct GradCheckInstance {
    pub model: ModelParams,
    pub phi: PerturbationParams,
    pub record: SupervisionRecord,
    pub visual: Matrix,
    pub prompt: Vec<TokenId>,
    pub cfg: LossConfig,
}

impl GradCheckInstance {
    /// `8 ≤ vocab ≤ 16`, even `4 ≤ D ≤ 8`; everything drawn from `seed`.
    /// Layer norm over two coordinates is a sign function, so `D = 2` has
    /// vanishing gradients and is rejected.
    pub fn random(seed: u64, vocab: usize, d_model: usize) -> Result<Self> {
        if vocab > 16 || d_model > 8 || vocab < 8 || d_model < 4 || !d_model.is_multiple_of(2) {
            return Err(MesaError::config(
                "gradient-check instances need 8 <= vocab <= 16 and even 4 <= D <= 8",
            ));
        }
        let mut rng = rng_for(seed, "gradcheck");
        let mc = ModelConfig {
            layers: 2,
            d_model,
            heads: 2,
            mlp_hidden: 2 * d_model,
            patch_dim: 4,
            visual_tokens: 4,
            vocab_size: vocab,
            max_seq_len: 8,
        };
        let model = ModelParams::init(&mc, &mut rng)?;
        let mut phi = PerturbationParams::new(d_model, d_model, 1.0, &mut rng)?;
        phi.w2 = Matrix::randn(d_model, d_model, 0.3, &mut rng);
        phi.b2 = (0..d_model).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let normal = Normal::new(0.0, 1.5).expect("valid");
        let mut logits = || (0..vocab).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
        let z_orig = logits();
        let z_hall = vec![logits(), logits()];
        let weights = crate::supervision::dynamic_weights(&z_orig, &z_hall)?;
        let visual = Matrix::randn(4, d_model, 0.5, &mut rng);
        let prompt = vec![1, 3];
        Ok(Self {
            model,
            phi,
            record: SupervisionRecord {
                id: 0,
                z_orig,
                z_hall,
                weights,
            },
            visual,
            prompt,
            cfg: LossConfig {
                m_hall: vocab / 2 + 2,
                m_excl: 2,
                ..LossConfig::default()
            },
        })
    }
}

/// Compares the analytic `∂L/∂φ` with central differences (step 1e-4).
///
/// Instances with a pre-clip value within `1e-3` of `±ε`, or with tied
/// target rankings at a subset boundary, are skipped and reported as such.
pub fn gradient_check(instance: &GradCheckInstance, which: CheckedObjective) -> Result<GradCheckReport> {
    gradient_check_with_step(instance, which, 1e-4)
}

/// [`gradient_check`] with an explicit finite-difference step.
pub fn gradient_check_with_step(
    instance: &GradCheckInstance,
    which: CheckedObjective,
    h: f64,
) -> Result<GradCheckReport> {
    let phi0 = &instance.phi;
    let x = phi0.flat();
    let skip = |reason: String| GradCheckReport {
        objective: which,
        max_relative_error: 0.0,
        max_abs_gradient: 0.0,
        parameters: x.len(),
        skipped: Some(reason),
    };

    if which == CheckedObjective::Quadratic {
        let c: Vec<f64> = (0..x.len()).map(|i| 1.0 + (i % 7) as f64 * 0.25).collect();
        let t: Vec<f64> = (0..x.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let f = |p: &[f64]| {
            p.iter()
                .zip(&c)
                .zip(&t)
                .map(|((p, c), t)| 0.5 * c * (p - t).powi(2))
                .sum::<f64>()
        };
        let g: Vec<f64> = x.iter().zip(&c).zip(&t).map(|((p, c), t)| c * (p - t)).collect();
        return Ok(GradCheckReport {
            objective: which,
            max_relative_error: central_difference_error(f, &x, &g, h),
            max_abs_gradient: g.iter().fold(0.0, |m, v| m.max(v.abs())),
            parameters: x.len(),
            skipped: None,
        });
    }

    let (_, cache) = phi0.forward(&instance.visual)?;
    if cache.out.data().iter().any(|o| (o.abs() - phi0.epsilon).abs() < 1e-3) {
        return Ok(skip("pre-clip value within 1e-3 of the clip bound".into()));
    }
    let cfg = match which {
        CheckedObjective::Hall => LossConfig {
            lambda: 0.0,
            ..instance.cfg.clone()
        },
        CheckedObjective::Preserve => LossConfig {
            hall_weight: 0.0,
            ..instance.cfg.clone()
        },
        _ => instance.cfg.clone(),
    };
    cfg.validate(instance.model.config.vocab_size)?;
    let r = &instance.record;
    let tied = r.z_hall.iter().any(|z| cfg.hall_rule().boundary_tied(z, 1e-12))
        || cfg.preserve_rule().boundary_tied(&r.z_orig, 1e-12);
    if tied {
        return Ok(skip("target ranking tied at a subset boundary".into()));
    }
    let targets = LossTargets::new(r, &cfg)?;
    let sample = PerturbSample {
        visual: instance.visual.clone(),
        targets,
    };
    let mut grads = phi0.zeros_like();
    batch_objective(
        &instance.model,
        phi0,
        &instance.prompt,
        &[&sample],
        &cfg,
        Some(&mut grads),
        1.0,
    )?;
    let analytic = grads.flat();
    let f = |p: &[f64]| {
        let mut phi = phi0.clone();
        phi.set_flat(p);
        batch_objective(&instance.model, &phi, &instance.prompt, &[&sample], &cfg, None, 1.0)
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    };
    let err = central_difference_error(f, &x, &analytic, h);
    Ok(GradCheckReport {
        objective: which,
        max_relative_error: err,
        max_abs_gradient: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
        parameters: x.len(),
        skipped: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_gives_zero_delta() {
        let phi = PerturbationParams::new(6, 6, 1.0, &mut rng_for(1, "t")).unwrap();
        let x = Matrix::randn(5, 6, 1.0, &mut rng_for(2, "t"));
        assert!(phi.compute_delta(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_is_bounded() {
        let mut rng = rng_for(3, "t");
        let mut phi = PerturbationParams::new(4, 4, 0.7, &mut rng).unwrap();
        phi.w2 = Matrix::randn(4, 4, 5.0, &mut rng);
        for _ in 0..1000 {
            let x = Matrix::randn(3, 4, 3.0, &mut rng);
            assert!(phi.compute_delta(&x).unwrap().max_abs() <= 0.7);
        }
    }

    #[test]
    fn saturated_coordinate_has_zero_gradient() {
        // One input, identity-like net whose output coordinate 0 sits at 3.2.
        let mut phi = PerturbationParams::new(2, 2, 1.0, &mut rng_for(0, "t")).unwrap();
        phi.w1 = Matrix::zeros(2, 2);
        phi.w2 = Matrix::zeros(2, 2);
        phi.b2 = vec![3.2, 0.4];
        let x = Matrix::from_rows(&[vec![0.3, -0.2]]);
        let (delta, cache) = phi.forward(&x).unwrap();
        assert_eq!(delta.row(0), &[1.0, 0.4]);
        let mut g = phi.zeros_like();
        phi.backward(&cache, &Matrix::from_rows(&[vec![1.0, 1.0]]), &mut g);
        assert_eq!(g.b2, vec![0.0, 1.0]);
        // Finite difference through the saturated coordinate is zero too.
        let f = |b: f64| {
            let mut p = phi.clone();
            p.b2[0] = b;
            p.compute_delta(&x).unwrap().get(0, 0)
        };
        assert_eq!((f(3.2 + 1e-4) - f(3.2 - 1e-4)) / 2e-4, 0.0);
    }

    #[test]
    fn truncated_kl_hand_values() {
        let p = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let q = [0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()];
        let kl = truncated_kl(&p, &q, &[0, 1, 2]);
        assert!((kl - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(truncated_kl(&p, &p, &[0, 1, 2]), 0.0);
    }

    #[test]
    fn empty_subset_rejected() {
        let rule = SubsetRule::TopMExcluding { m: 3, exclude: 3 };
        assert_eq!(rule.select(&[0.0; 5]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn preserve_ignores_excluded_head() {
        let z_orig = vec![5.0, 4.0, 3.0, 1.0, 0.5, 0.2, -1.0, -2.0];
        let mut z_ind = z_orig.clone();
        // Reshuffle mass among the top-2 only.
        z_ind[0] = 3.5;
        z_ind[1] = 6.0;
        let rec = SupervisionRecord {
            id: 0,
            z_orig: z_orig.clone(),
            z_hall: vec![z_orig.clone()],
            weights: vec![1.0],
        };
        let cfg = LossConfig {
            m_hall: 6,
            m_excl: 2,
            ..LossConfig::default()
        };
        assert!(loss_preserve(&z_ind, &rec, &cfg).unwrap().abs() < 1e-15);
        assert!(loss_hall(&z_orig, &rec, &cfg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_for(9, "t");
        let mut phi = PerturbationParams::new(4, 3, 1.0, &mut rng).unwrap();
        phi.w2 = Matrix::randn(3, 4, 1.0, &mut rng);
        phi.round_to_f32();
        let back = PerturbationParams::from_bytes(&phi.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, phi);
    }
}
