// SPDX-License-Identifier: MIT OR Apache-2.0

//! A tiny decoder-only vision-language transformer.
//!
//! Visual patches are projected linearly (plus a learned position
//! embedding) and prepended to the embedded text prompt. The residual stream
//! after every block is exposed as a hidden-state tap, and an
//! [`InjectionSpec`] can add a fixed vector to the post-block residual of
//! selected layers at selected positions.
//!
//! All arithmetic is `f64`. Parameters are rounded through `f32` when a
//! training run ends so they survive the float32 checkpoint unchanged.

mod decode;
mod engine;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, ByteReader, ByteWriter, Hash32};
use crate::error::{MesaError, Result};
use crate::tensor::{matmul, Matrix};
use crate::world::{PatchGrid, TokenId};

pub use decode::{generate, generate_batch, DecodeStrategy, GenerationRequest, GenerationTrace, StopReason};
pub use engine::{backward, extend, ForwardTape, Gradients, SeqState};
pub(crate) use engine::{gelu, gelu_grad};
pub use train::{first_step_logits, heldout_accuracy, planted_checks, train_base, AdamW, TrainConfig, TrainReport};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MESAMODL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch_dim: usize,
    pub visual_tokens: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            mlp_hidden: 128,
            patch_dim: 16,
            visual_tokens: 16,
            vocab_size: 53,
            max_seq_len: 16 + 3 + 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(MesaError::config("model needs at least 2 layers"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(MesaError::config("d_model must be a positive multiple of heads"));
        }
        if self.mlp_hidden == 0 || self.patch_dim == 0 || self.vocab_size < 3 {
            return Err(MesaError::config(
                "mlp_hidden, patch_dim and vocab_size must be positive",
            ));
        }
        if self.max_seq_len <= self.visual_tokens {
            return Err(MesaError::config("max_seq_len must exceed the visual token count"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn max_text_len(&self) -> usize {
        self.max_seq_len - self.visual_tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_fc1: Matrix,
    pub b_fc1: Vec<f64>,
    pub w_fc2: Matrix,
    pub b_fc2: Vec<f64>,
}

/// Model weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_proj: Matrix,
    pub visual_pos: Matrix,
    pub tok_emb: Matrix,
    pub text_pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub unembed: Matrix,
    pub unembed_b: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let h = config.mlp_hidden;
        let layer = LayerParams {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: Matrix::zeros(d, 3 * d),
            b_qkv: vec![0.0; 3 * d],
            w_o: Matrix::zeros(d, d),
            b_o: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_fc1: Matrix::zeros(d, h),
            b_fc1: vec![0.0; h],
            w_fc2: Matrix::zeros(h, d),
            b_fc2: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            patch_proj: Matrix::zeros(config.patch_dim, d),
            visual_pos: Matrix::zeros(config.visual_tokens, d),
            tok_emb: Matrix::zeros(config.vocab_size, d),
            text_pos: Matrix::zeros(config.max_text_len(), d),
            layers: vec![layer; config.layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            unembed: Matrix::zeros(d, config.vocab_size),
            unembed_b: vec![0.0; config.vocab_size],
        }
    }

    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2L)`, unit layer-norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden;
        let std = 0.02;
        let resid_std = std / ((2 * config.layers) as f64).sqrt();
        let mut p = Self::zeros(config);
        p.patch_proj = Matrix::randn(config.patch_dim, d, 1.0 / (config.patch_dim as f64).sqrt(), rng);
        p.visual_pos = Matrix::randn(config.visual_tokens, d, std, rng);
        p.tok_emb = Matrix::randn(config.vocab_size, d, std, rng);
        p.text_pos = Matrix::randn(config.max_text_len(), d, std, rng);
        for layer in &mut p.layers {
            layer.ln1_g = vec![1.0; d];
            layer.ln2_g = vec![1.0; d];
            layer.w_qkv = Matrix::randn(d, 3 * d, std, rng);
            layer.w_o = Matrix::randn(d, d, resid_std, rng);
            layer.w_fc1 = Matrix::randn(d, h, std, rng);
            layer.w_fc2 = Matrix::randn(h, d, resid_std, rng);
        }
        p.lnf_g = vec![1.0; d];
        p.unembed = Matrix::randn(d, config.vocab_size, std, rng);
        Ok(p)
    }

    /// Named views of every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("patch_proj".into(), self.patch_proj.data()),
            ("visual_pos".into(), self.visual_pos.data()),
            ("tok_emb".into(), self.tok_emb.data()),
            ("text_pos".into(), self.text_pos.data()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layers.{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layers.{i}.w_qkv"), l.w_qkv.data()));
            out.push((format!("layers.{i}.b_qkv"), &l.b_qkv));
            out.push((format!("layers.{i}.w_o"), l.w_o.data()));
            out.push((format!("layers.{i}.b_o"), &l.b_o));
            out.push((format!("layers.{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layers.{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layers.{i}.w_fc1"), l.w_fc1.data()));
            out.push((format!("layers.{i}.b_fc1"), &l.b_fc1));
            out.push((format!("layers.{i}.w_fc2"), l.w_fc2.data()));
            out.push((format!("layers.{i}.b_fc2"), &l.b_fc2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("unembed".into(), self.unembed.data()));
        out.push(("unembed_b".into(), &self.unembed_b));
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_proj.data_mut(),
            self.visual_pos.data_mut(),
            self.tok_emb.data_mut(),
            self.text_pos.data_mut(),
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(l.w_qkv.data_mut());
            out.push(&mut l.b_qkv);
            out.push(l.w_o.data_mut());
            out.push(&mut l.b_o);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(l.w_fc1.data_mut());
            out.push(&mut l.b_fc1);
            out.push(l.w_fc2.data_mut());
            out.push(&mut l.b_fc2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(self.unembed.data_mut());
        out.push(&mut self.unembed_b);
        out
    }

    /// Names of tensors that receive weight decay (matrices, not gains/biases).
    pub fn decayed(name: &str) -> bool {
        !(name.ends_with("_g") || name.ends_with("_b") || name.contains(".b_") || name == "unembed_b")
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    // -- checkpoint -------------------------------------------------------

    /// Versioned float32 container; the trailing 32 bytes hash everything before them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(&serde_json::to_vec(&self.config).expect("config serializes"));
        let tensors = self.tensors();
        w.u32(tensors.len() as u32);
        for (name, data) in tensors {
            w.blob(name.as_bytes());
            w.u32(data.len() as u32);
            w.f32s(data);
        }
        let mut bytes = w.into_inner();
        let h = Hash32::of(&bytes);
        bytes.extend_from_slice(&h.0);
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(MesaError::format(origin, "checkpoint too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Hash32::of(body).0 != trailer {
            return Err(MesaError::format(origin, "checkpoint content hash mismatch"));
        }
        let mut r = ByteReader::new(body, origin);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_slice(r.blob()?)?;
        config.validate()?;
        let mut params = Self::zeros(&config);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(r.error(format!("expected {} tensors, found {count}", names.len())));
        }
        for (slot, name) in params.tensors_mut().into_iter().zip(&names) {
            let got = r.blob()?;
            if got != name.as_bytes() {
                return Err(r.error(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(got)
                )));
            }
            let n = r.u32()? as usize;
            if n != slot.len() {
                return Err(r.error(format!("tensor {name}: expected {} values, found {n}", slot.len())));
            }
            for v in slot.iter_mut() {
                *v = r.f32()?;
            }
        }
        r.finish()?;
        Ok(params)
    }

    /// Hash of the checkpoint bytes (identifies the frozen model downstream).
    pub fn content_hash(&self) -> Hash32 {
        let bytes = self.to_bytes();
        Hash32(bytes[bytes.len() - 32..].try_into().expect("32"))
    }

    pub fn save(&self, path: &Path) -> Result<Hash32> {
        let bytes = self.to_bytes();
        atomic_write(path, &bytes)?;
        Ok(Hash32(bytes[bytes.len() - 32..].try_into().expect("32")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    // -- embeddings -------------------------------------------------------

    /// `E_v(V)`: linear patch projection plus learned visual positions.
    pub fn embed_visual(&self, grid: &PatchGrid) -> Result<Matrix> {
        let cfg = &self.config;
        if grid.num_patches() != cfg.visual_tokens
            || grid.patches.rows() != cfg.visual_tokens
            || grid.patch_dim() != cfg.patch_dim
        {
            return Err(MesaError::input(format!(
                "patch grid {}x{} (dim {}) does not match model ({} tokens, dim {})",
                grid.grid_h,
                grid.grid_w,
                grid.patch_dim(),
                cfg.visual_tokens,
                cfg.patch_dim
            )));
        }
        let mut out = matmul(&grid.patches, &self.patch_proj);
        out.add_assign(&self.visual_pos);
        Ok(out)
    }

    /// Embedding of text token `id` at text offset `pos` (0 = first prompt token).
    pub fn embed_token(&self, id: TokenId, pos: usize) -> Vec<f64> {
        self.tok_emb
            .row(id as usize)
            .iter()
            .zip(self.text_pos.row(pos))
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn embed_text(&self, ids: &[TokenId], offset: usize) -> Result<Matrix> {
        if offset + ids.len() > self.config.max_text_len() {
            return Err(MesaError::input(format!(
                "text length {} exceeds maximum {}",
                offset + ids.len(),
                self.config.max_text_len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(MesaError::input(format!("token id {bad} outside vocabulary")));
        }
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(i, &t)| self.embed_token(t, offset + i))
            .collect();
        Ok(Matrix::from_rows(&rows))
    }
}

// ---------------------------------------------------------------------------
// Injection and hidden states
// ---------------------------------------------------------------------------

/// Adds `alpha · d^(l)` to the post-block residual of layer `l` (1-based)
/// at every position `>= start_position`.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec {
    /// `directions[l - 1]` is the vector for layer `l`; `None` leaves the layer alone.
    pub directions: Vec<Option<Vec<f64>>>,
    pub alpha: f64,
    pub start_position: usize,
}

impl InjectionSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.directions.len() != config.layers {
            return Err(MesaError::config(format!(
                "injection names {} layers, model has {}",
                self.directions.len(),
                config.layers
            )));
        }
        if !self.alpha.is_finite() {
            return Err(MesaError::config("injection alpha must be finite"));
        }
        for d in self.directions.iter().flatten() {
            if d.len() != config.d_model {
                return Err(MesaError::config(format!(
                    "direction has dimension {}, model width is {}",
                    d.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }

    /// True when the injection cannot change anything.
    pub fn is_noop(&self) -> bool {
        self.alpha == 0.0 || self.directions.iter().flatten().all(|d| d.iter().all(|&v| v == 0.0))
    }

    /// The vector added at layer `layer` (1-based), already scaled by alpha.
    pub fn scaled(&self, layer: usize) -> Option<Vec<f64>> {
        self.directions[layer - 1]
            .as_ref()
            .map(|d| d.iter().map(|v| self.alpha * v).collect())
    }
}

/// Residual stream taps `h^(0) ..= h^(L)`, each `[len × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn at(&self, layer: usize, position: usize) -> &[f64] {
        self.layers[layer].row(position)
    }
}

/// Output of a full-sequence forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Next-token logits at every position, `[len × V]`.
    pub logits: Matrix,
    pub hidden: HiddenStates,
}

/// Full forward over `visual ‖ text`.
pub fn forward(
    params: &ModelParams,
    visual: &Matrix,
    text: &[TokenId],
    injection: Option<&InjectionSpec>,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if visual.shape() != (cfg.visual_tokens, cfg.d_model) {
        return Err(MesaError::input(format!(
            "visual tokens have shape {:?}, expected ({}, {})",
            visual.shape(),
            cfg.visual_tokens,
            cfg.d_model
        )));
    }
    if cfg.visual_tokens + text.len() > cfg.max_seq_len {
        return Err(MesaError::input(format!(
            "sequence length {} exceeds maximum {}",
            cfg.visual_tokens + text.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(inj) = injection {
        inj.validate(cfg)?;
    }
    if !visual.is_finite() {
        return Err(MesaError::input("visual tokens contain non-finite values"));
    }
    let text_rows = params.embed_text(text, 0)?;
    let mut input = visual.clone();
    for row in text_rows.rows_iter() {
        input.push_row(row);
    }
    let mut state = SeqState::new(cfg);
    let logits = extend(params, &mut [&mut state], &[input], injection, None);
    Ok(ForwardOutput {
        logits: logits.into_iter().next().expect("one sequence"),
        hidden: state.into_hidden(),
    })
}

/// Teacher-forced next-token logits for the tokens after the prompt.
///
/// `sequence` is prompt followed by continuation; the result has one row per
/// continuation token: row `t` is the distribution that predicted
/// `sequence[prompt_len + t]`.
pub fn teacher_forced_logits(
    params: &ModelParams,
    visual: &Matrix,
    sequence: &[TokenId],
    prompt_len: usize,
    injection: Option<&InjectionSpec>,
) -> Result<Matrix> {
    if prompt_len == 0 || prompt_len > sequence.len() {
        return Err(MesaError::input("prompt must be non-empty and within the sequence"));
    }
    let steps = sequence.len() - prompt_len;
    // The last token of the sequence predicts nothing we need.
    let take = if steps == 0 { prompt_len } else { sequence.len() - 1 };
    let out = forward(params, visual, &sequence[..take], injection)?;
    let first = params.config.visual_tokens + prompt_len - 1;
    let n = steps.max(1);
    Ok(out.logits.slice_rows(first, first + n))
}

#[cfg(test)]
mod tests;
