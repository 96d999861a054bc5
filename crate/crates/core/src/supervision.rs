// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-step logits on clean and degraded inputs, with per-degradation
//! weights proportional to the KL shift they cause.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, split_seed, ByteReader, ByteWriter, Hash32};
use crate::degrade::{apply, DegradationSpec};
use crate::error::{MesaError, Result};
use crate::model::{forward, ModelParams};
use crate::tensor::{log_softmax, softmax};
use crate::world::{Corpus, TokenId, World};

const MAGIC: &[u8; 8] = b"MESACACH";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionRecord {
    pub id: u64,
    pub z_orig: Vec<f64>,
    pub z_hall: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Everything the header pins besides the two hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSpec {
    pub degradations: Vec<DegradationSpec>,
    pub prompt: Vec<TokenId>,
    pub corpus_hash: Hash32,
    /// Seed that per-sample degradation seeds derive from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionCache {
    pub model_hash: Hash32,
    pub vocab_hash: Hash32,
    pub spec: CacheSpec,
    pub records: Vec<SupervisionRecord>,
}

/// `KL(P ‖ Q)` over the full vocabulary, from logits.
pub fn full_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let p = softmax(p_logits);
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    p.iter()
        .zip(lp.iter().zip(&lq))
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(pi, (a, b))| pi * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// `w_k ∝ KL(P_hall^k ‖ P_orig)`, uniform when every KL is zero.
pub fn dynamic_weights(z_orig: &[f64], z_hall: &[Vec<f64>]) -> Result<Vec<f64>> {
    if z_hall.is_empty() {
        return Err(MesaError::config("at least one degraded condition is required"));
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(z_orig) || z_hall.iter().any(|z| z.len() != z_orig.len() || !finite(z)) {
        return Err(MesaError::input("logit vectors must be finite and of equal length"));
    }
    let kls: Vec<f64> = z_hall.iter().map(|z| full_kl(z, z_orig)).collect();
    let total: f64 = kls.iter().sum();
    if total > 0.0 {
        Ok(kls.iter().map(|k| k / total).collect())
    } else {
        Ok(vec![1.0 / z_hall.len() as f64; z_hall.len()])
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Runs the clean and each degraded condition for every corpus sample.
pub fn build_supervision(
    params: &ModelParams,
    world: &World,
    samples: &Corpus,
    degradations: &[DegradationSpec],
    seed: u64,
) -> Result<SupervisionCache> {
    if degradations.is_empty() {
        return Err(MesaError::config("supervision needs at least one degradation"));
    }
    for d in degradations {
        d.validate(world.config().grid_h, world.config().grid_w)?;
    }
    let prompt = world.prompt();
    let first = |grid: &crate::world::PatchGrid| -> Result<Vec<f64>> {
        let out = forward(params, &params.embed_visual(grid)?, &prompt, None)?;
        Ok(to_f32(out.logits.row(out.logits.rows() - 1).to_vec()))
    };
    let mut records = Vec::with_capacity(samples.len());
    for rec in &samples.records {
        let grid = world.render(&rec.scene(), rec.render_seed);
        let z_orig = first(&grid)?;
        let z_hall = degradations
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let d = d.reseeded(split_seed(seed, &format!("supervision/{}/{k}", rec.id)));
                first(&apply(world, &grid, &d)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = dynamic_weights(&z_orig, &z_hall)?;
        records.push(SupervisionRecord {
            id: rec.id,
            z_orig,
            z_hall,
            weights,
        });
    }
    Ok(SupervisionCache {
        model_hash: params.content_hash(),
        vocab_hash: world.vocab().content_hash(),
        spec: CacheSpec {
            degradations: degradations.to_vec(),
            prompt,
            corpus_hash: samples.content_hash(),
            seed,
        },
        records,
    })
}

impl SupervisionCache {
    pub fn num_conditions(&self) -> usize {
        self.spec.degradations.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.records.first().map_or(0, |r| r.z_orig.len())
    }

    /// Staleness check against the artifacts a consumer is about to use.
    pub fn check(&self, model_hash: &Hash32, vocab_hash: &Hash32, corpus_hash: Option<&Hash32>) -> Result<()> {
        let stale = |what: &str, e: &Hash32, f: &Hash32| {
            Err(MesaError::Stale {
                what: what.into(),
                expected: e.hex(),
                found: f.hex(),
            })
        };
        if &self.model_hash != model_hash {
            return stale("supervision cache model", model_hash, &self.model_hash);
        }
        if &self.vocab_hash != vocab_hash {
            return stale("supervision cache vocabulary", vocab_hash, &self.vocab_hash);
        }
        if let Some(c) = corpus_hash {
            if &self.spec.corpus_hash != c {
                return stale("supervision cache corpus", c, &self.spec.corpus_hash);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.num_conditions();
        let v = self.vocab_size();
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.hash(&self.model_hash);
        w.hash(&self.vocab_hash);
        w.u32(k as u32);
        w.u32(v as u32);
        w.u64(self.records.len() as u64);
        w.blob(&serde_json::to_vec(&self.spec).expect("json"));
        for r in &self.records {
            w.u64(r.id);
            w.f32s(&r.z_orig);
            for z in &r.z_hall {
                w.f32s(z);
            }
            for &x in &r.weights {
                w.f64(x);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported cache version {version}")));
        }
        let model_hash = r.hash()?;
        let vocab_hash = r.hash()?;
        let k = r.u32()? as usize;
        let v = r.u32()? as usize;
        let n = r.u64()? as usize;
        let spec: CacheSpec = serde_json::from_slice(r.blob()?).map_err(|e| r.error(e.to_string()))?;
        if spec.degradations.len() != k {
            return Err(r.error("degradation count disagrees with header"));
        }
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.u64()?;
            let z_orig = r.f32s(v)?;
            let z_hall = (0..k).map(|_| r.f32s(v)).collect::<Result<Vec<_>>>()?;
            let weights = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            records.push(SupervisionRecord {
                id,
                z_orig,
                z_hall,
                weights,
            });
        }
        r.finish()?;
        Ok(Self {
            model_hash,
            vocab_hash,
            spec,
            records,
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_follow_kl_proportion() {
        // Hand-computed 3-token KLs.
        let z0 = vec![0.0, 0.0, 0.0];
        let z1 = vec![(0.5f64).ln(), (0.25f64).ln(), (0.25f64).ln()];
        let z2 = vec![(0.8f64).ln(), (0.1f64).ln(), (0.1f64).ln()];
        let kl = |p: [f64; 3]| p.iter().map(|x| x * (x / (1.0 / 3.0)).ln()).sum::<f64>();
        let (k1, k2) = (kl([0.5, 0.25, 0.25]), kl([0.8, 0.1, 0.1]));
        let w = dynamic_weights(&z0, &[z1, z2]).unwrap();
        assert!((w[0] - k1 / (k1 + k2)).abs() < 1e-9);
        assert!((w[1] - k2 / (k1 + k2)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_weights_are_uniform() {
        let z = vec![0.3, -1.0, 2.0];
        let w = dynamic_weights(&z, &[z.clone(), z.clone(), z.clone()]).unwrap();
        assert!(w.iter().all(|&x| x == 1.0 / 3.0));
        assert!(dynamic_weights(&z, &[]).is_err());
    }

    #[test]
    fn weights_shift_invariant() {
        let z0 = vec![0.1, 0.9, -0.4, 1.2];
        let zs = vec![vec![1.0, 0.0, 0.5, -0.2], vec![0.3, 0.3, 2.0, 0.0]];
        let w = dynamic_weights(&z0, &zs).unwrap();
        let shifted: Vec<Vec<f64>> = zs.iter().map(|z| z.iter().map(|x| x + 7.0).collect()).collect();
        let z0s: Vec<f64> = z0.iter().map(|x| x + 7.0).collect();
        let w2 = dynamic_weights(&z0s, &shifted).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
