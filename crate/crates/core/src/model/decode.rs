// SPDX-License-Identifier: MIT OR Apache-2.0

//! Autoregressive decoding: greedy and the five sampling strategies used in
//! the decoding ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::rng_for;
use crate::error::{MesaError, Result};
use crate::tensor::{argmax, rank_descending, Matrix};
use crate::world::{TokenId, EOS};

use super::{extend, HiddenStates, InjectionSpec, ModelParams, SeqState};

/// Token selection rule. Sampling variants carry their own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopP { p: f64, seed: u64 },
    TopK { k: usize, seed: u64 },
    Temperature { t: f64, seed: u64 },
    TopPTemperature { p: f64, t: f64, seed: u64 },
    TopKTemperature { k: usize, t: f64, seed: u64 },
}

impl DecodeStrategy {
    /// CLI names with the ablation defaults: p = 0.7, k = 50, t = 0.5.
    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        Ok(match name {
            "greedy" => Self::Greedy,
            "top_p" => Self::TopP { p: 0.7, seed },
            "top_k" => Self::TopK { k: 50, seed },
            "temp" => Self::Temperature { t: 0.5, seed },
            "top_p_temp" => Self::TopPTemperature { p: 0.7, t: 0.5, seed },
            "top_k_temp" => Self::TopKTemperature { k: 50, t: 0.5, seed },
            other => {
                return Err(MesaError::config(format!(
                    "unknown decode strategy {other:?} (expected greedy|top_p|top_k|temp|top_p_temp|top_k_temp)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::TopP { .. } => "top_p",
            Self::TopK { .. } => "top_k",
            Self::Temperature { .. } => "temp",
            Self::TopPTemperature { .. } => "top_p_temp",
            Self::TopKTemperature { .. } => "top_k_temp",
        }
    }

    pub fn all(seed: u64) -> Vec<Self> {
        ["greedy", "top_p", "top_k", "temp", "top_p_temp", "top_k_temp"]
            .iter()
            .map(|n| Self::from_name(n, seed).expect("known name"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MesaError::config(m.to_string()));
        match *self {
            Self::TopP { p, .. } | Self::TopPTemperature { p, .. } if !(p > 0.0 && p <= 1.0) => {
                bad("top-p must be in (0, 1]")
            }
            Self::TopK { k, .. } | Self::TopKTemperature { k, .. } if k == 0 => bad("top-k must be >= 1"),
            Self::Temperature { t, .. } | Self::TopPTemperature { t, .. } | Self::TopKTemperature { t, .. }
                if !(t > 0.0 && t.is_finite()) =>
            {
                bad("temperature must be positive and finite")
            }
            _ => Ok(()),
        }
    }

    fn seed(&self) -> Option<u64> {
        match *self {
            Self::Greedy => None,
            Self::TopP { seed, .. }
            | Self::TopK { seed, .. }
            | Self::Temperature { seed, .. }
            | Self::TopPTemperature { seed, .. }
            | Self::TopKTemperature { seed, .. } => Some(seed),
        }
    }

    fn parts(&self) -> (Option<usize>, Option<f64>, f64) {
        match *self {
            Self::Greedy => (None, None, 1.0),
            Self::TopP { p, .. } => (None, Some(p), 1.0),
            Self::TopK { k, .. } => (Some(k), None, 1.0),
            Self::Temperature { t, .. } => (None, None, t),
            Self::TopPTemperature { p, t, .. } => (None, Some(p), t),
            Self::TopKTemperature { k, t, .. } => (Some(k), None, t),
        }
    }

    /// Picks the next token. Sampling walks the kept tokens in id order.
    pub fn select<R: Rng>(&self, logits: &[f64], rng: &mut R) -> usize {
        if matches!(self, Self::Greedy) {
            return argmax(logits);
        }
        let (top_k, top_p, t) = self.parts();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&z| ((z - max) / t).exp()).collect();
        let mut keep = vec![true; logits.len()];
        if top_k.is_some() || top_p.is_some() {
            let order = rank_descending(&weights);
            let mut kept: Vec<usize> = order.clone();
            if let Some(k) = top_k {
                kept.truncate(k.min(kept.len()));
            }
            if let Some(p) = top_p {
                let total: f64 = kept.iter().map(|&i| weights[i]).sum();
                let mut cum = 0.0;
                let mut n = 0;
                for &i in &kept {
                    cum += weights[i] / total;
                    n += 1;
                    if cum >= p {
                        break;
                    }
                }
                kept.truncate(n);
            }
            keep.iter_mut().for_each(|k| *k = false);
            for i in kept {
                keep[i] = true;
            }
        }
        let total: f64 = weights.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| w).sum();
        let threshold = rng.gen::<f64>() * total;
        let mut cum = 0.0;
        let mut last = 0;
        for (i, (&w, &k)) in weights.iter().zip(&keep).enumerate() {
            if k {
                cum += w;
                last = i;
                if cum > threshold {
                    return i;
                }
            }
        }
        last
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// Everything a decoding run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub prompt: Vec<TokenId>,
    /// Generated tokens; ends with EOS iff `stop == Eos`.
    pub generated: Vec<TokenId>,
    /// Logits that selected each generated token.
    pub logits: Vec<Vec<f64>>,
    /// Residual taps over prompt and generated positions, if recorded.
    pub hidden: Option<HiddenStates>,
    pub stop: StopReason,
    pub strategy: DecodeStrategy,
}

impl GenerationTrace {
    /// Generated tokens without the terminating EOS.
    pub fn content(&self) -> &[TokenId] {
        match self.stop {
            StopReason::Eos => &self.generated[..self.generated.len() - 1],
            StopReason::MaxLength => &self.generated,
        }
    }

    /// Prompt followed by every generated token (the teacher-forcing input).
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.generated);
        s
    }

    /// Stable fingerprint of tokens and logits.
    pub fn content_hash(&self) -> crate::artifact::Hash32 {
        let mut w = crate::artifact::ByteWriter::new();
        for &t in &self.prompt {
            w.u32(t);
        }
        w.u32(u32::MAX);
        for &t in &self.generated {
            w.u32(t);
        }
        for l in &self.logits {
            for &v in l {
                w.f64(v);
            }
        }
        w.bytes(self.strategy.name().as_bytes());
        crate::artifact::Hash32::of(&w.into_inner())
    }
}

/// One decoding job: embedded visual tokens, prompt and a per-sample seed.
#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub visual: Matrix,
    pub prompt: Vec<TokenId>,
    pub sample_seed: u64,
}

/// Decodes a single request.
pub fn generate(
    params: &ModelParams,
    request: &GenerationRequest,
    strategy: &DecodeStrategy,
    max_new_tokens: usize,
    injection: Option<&InjectionSpec>,
    record_hidden: bool,
) -> Result<GenerationTrace> {
    Ok(generate_batch(
        params,
        std::slice::from_ref(request),
        strategy,
        max_new_tokens,
        injection,
        record_hidden,
    )?
    .pop()
    .expect("one trace"))
}

/// Decodes many requests in lock step. Each trace is identical to what
/// [`generate`] returns for that request alone.
pub fn generate_batch(
    params: &ModelParams,
    requests: &[GenerationRequest],
    strategy: &DecodeStrategy,
    max_new_tokens: usize,
    injection: Option<&InjectionSpec>,
    record_hidden: bool,
) -> Result<Vec<GenerationTrace>> {
    let cfg = &params.config;
    strategy.validate()?;
    if let Some(inj) = injection {
        inj.validate(cfg)?;
    }
    if max_new_tokens == 0 {
        return Err(MesaError::config("max_new_tokens must be >= 1"));
    }
    let mut states = Vec::with_capacity(requests.len());
    let mut inputs = Vec::with_capacity(requests.len());
    for req in requests {
        if req.prompt.is_empty() {
            return Err(MesaError::input("prompt must not be empty"));
        }
        if cfg.visual_tokens + req.prompt.len() + max_new_tokens - 1 > cfg.max_seq_len {
            return Err(MesaError::input(format!(
                "prompt length {} + max_new_tokens {} exceeds the model context",
                req.prompt.len(),
                max_new_tokens
            )));
        }
        if req.visual.shape() != (cfg.visual_tokens, cfg.d_model) || !req.visual.is_finite() {
            return Err(MesaError::input(
                "visual tokens have the wrong shape or non-finite values",
            ));
        }
        let mut input = req.visual.clone();
        for row in params.embed_text(&req.prompt, 0)?.rows_iter() {
            input.push_row(row);
        }
        inputs.push(input);
        states.push(SeqState::new(cfg));
    }
    let mut rngs: Vec<_> = requests
        .iter()
        .map(|r| rng_for(strategy.seed().unwrap_or(0), &format!("decode/{}", r.sample_seed)))
        .collect();
    let mut traces: Vec<GenerationTrace> = requests
        .iter()
        .map(|r| GenerationTrace {
            prompt: r.prompt.clone(),
            generated: Vec::new(),
            logits: Vec::new(),
            hidden: None,
            stop: StopReason::MaxLength,
            strategy: strategy.clone(),
        })
        .collect();

    let mut current: Vec<Vec<f64>> = {
        let mut refs: Vec<&mut SeqState> = states.iter_mut().collect();
        extend(params, &mut refs, &inputs, injection, None)
            .into_iter()
            .map(|m| m.row(m.rows() - 1).to_vec())
            .collect()
    };
    let mut active: Vec<usize> = (0..requests.len()).collect();
    while !active.is_empty() {
        let mut next_active = Vec::new();
        let mut next_inputs = Vec::new();
        for (slot, &i) in active.iter().enumerate() {
            let logits = std::mem::take(&mut current[slot]);
            let tok = strategy.select(&logits, &mut rngs[i]) as TokenId;
            let tr = &mut traces[i];
            tr.generated.push(tok);
            tr.logits.push(logits);
            if tok == EOS {
                tr.stop = StopReason::Eos;
            } else if tr.generated.len() >= max_new_tokens {
                tr.stop = StopReason::MaxLength;
            } else {
                let pos = tr.prompt.len() + tr.generated.len() - 1;
                next_inputs.push(Matrix::from_vec(1, cfg.d_model, params.embed_token(tok, pos)));
                next_active.push(i);
            }
        }
        if next_active.is_empty() {
            break;
        }
        let mut refs: Vec<&mut SeqState> = Vec::with_capacity(next_active.len());
        {
            let mut rest: &mut [SeqState] = &mut states;
            let mut offset = 0;
            for &i in &next_active {
                let (_, tail) = std::mem::take(&mut rest).split_at_mut(i - offset);
                let (head, tail) = tail.split_first_mut().expect("index in range");
                refs.push(head);
                rest = tail;
                offset = i + 1;
            }
        }
        current = extend(params, &mut refs, &next_inputs, injection, None)
            .into_iter()
            .map(|m| m.row(0).to_vec())
            .collect();
        active = next_active;
    }
    if record_hidden {
        for (tr, st) in traces.iter_mut().zip(states) {
            tr.hidden = Some(st.into_hidden());
        }
    }
    Ok(traces)
}
