// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering-direction extraction (principal components of representation
//! shifts) and inference-time intervention.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, split_seed, ByteReader, ByteWriter, Hash32};
use crate::degrade::{stochastic_contrast_inputs, ContrastConfig};
use crate::error::{MesaError, Result};
use crate::model::{
    forward, generate_batch, DecodeStrategy, GenerationRequest, GenerationTrace, InjectionSpec, ModelParams,
};
use crate::perturb::PerturbationParams;
use crate::tensor::{dot, norm, Matrix};
use crate::world::{Corpus, TokenId, World};

const MAGIC: &[u8; 8] = b"MESADIRS";
const VERSION: u32 = 1;
pub const SIGN_CONVENTION: &str = "mean_shift_nonnegative";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMethod {
    Mesa,
    StochasticContrast,
}

impl DirectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mesa => "mesa",
            Self::StochasticContrast => "stochastic_contrast",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "mesa" => Some(Self::Mesa),
            "stochastic_contrast" => Some(Self::StochasticContrast),
            _ => None,
        }
    }
}

/// Per-layer shift rows `h − h̃`; `layers[l - 1]` is `[n × D]` for layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSet {
    pub layers: Vec<Matrix>,
}

impl ShiftSet {
    pub fn num_samples(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn content_hash(&self) -> Hash32 {
        let mut w = ByteWriter::new();
        for m in &self.layers {
            w.u64(m.rows() as u64);
            for &v in m.data() {
                w.f64(v);
            }
        }
        Hash32::of(&w.into_inner())
    }
}

fn last_position_taps(model: &ModelParams, visual: &Matrix, prompt: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let out = forward(model, visual, prompt, None)?;
    let pos = model.config.visual_tokens + prompt.len() - 1;
    Ok((1..=model.config.layers)
        .map(|l| out.hidden.at(l, pos).to_vec())
        .collect())
}

fn push_shift(shifts: &mut [Matrix], clean: &[Vec<f64>], other: &[Vec<f64>]) {
    for (m, (a, b)) in shifts.iter_mut().zip(clean.iter().zip(other)) {
        let row: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        m.push_row(&row);
    }
}

/// Clean minus perturbation-induced hidden states at the first generation position.
pub fn collect_shifts(
    model: &ModelParams,
    phi: &PerturbationParams,
    world: &World,
    samples: &Corpus,
) -> Result<ShiftSet> {
    phi.check_model(&model.content_hash())?;
    let prompt = world.prompt();
    let d = model.config.d_model;
    let mut layers = vec![Matrix::zeros(0, d); model.config.layers];
    for rec in &samples.records {
        let visual = model.embed_visual(&world.render(&rec.scene(), rec.render_seed))?;
        let mut induced = visual.clone();
        induced.add_assign(&phi.compute_delta(&visual)?);
        let clean = last_position_taps(model, &visual, &prompt)?;
        let pert = last_position_taps(model, &induced, &prompt)?;
        push_shift(&mut layers, &clean, &pert);
    }
    Ok(ShiftSet { layers })
}

/// Clean minus randomly perturbed hidden states, `n` contrast inputs per sample.
pub fn collect_contrast_shifts(
    model: &ModelParams,
    world: &World,
    samples: &Corpus,
    n: usize,
    contrast: &ContrastConfig,
    seed: u64,
) -> Result<ShiftSet> {
    let prompt = world.prompt();
    let d = model.config.d_model;
    let mut layers = vec![Matrix::zeros(0, d); model.config.layers];
    for rec in &samples.records {
        let grid = world.render(&rec.scene(), rec.render_seed);
        let clean = last_position_taps(model, &model.embed_visual(&grid)?, &prompt)?;
        let s = split_seed(seed, &format!("contrast/{}", rec.id));
        for g in stochastic_contrast_inputs(&grid, n, contrast, s)? {
            let other = last_position_taps(model, &model.embed_visual(&g)?, &prompt)?;
            push_shift(&mut layers, &clean, &other);
        }
    }
    Ok(ShiftSet { layers })
}

// ---------------------------------------------------------------------------
// Principal components
// ---------------------------------------------------------------------------

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let total: f64 = m.data().iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, c, v.get(k, i));
        }
    }
    (values, vecs)
}

/// Unit directions of one layer plus whether the layer was degenerate.
fn layer_components(x: &Matrix, rank: usize) -> (Vec<Vec<f64>>, bool) {
    let (n, d) = x.shape();
    let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n as f64).collect();
    let mut cov = Matrix::zeros(d, d);
    for row in x.rows_iter() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov.data_mut()[i * d + j] += c[i] * c[j];
            }
        }
    }
    cov.scale(1.0 / n as f64);
    let scale = x.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let (values, vecs) = symmetric_eigen(&cov);
    let mean_norm = norm(&mean);
    if scale == 0.0 || !(values[0] > 1e-15 * scale) {
        // No spread: the only available direction is the mean itself.
        let first = if mean_norm > 0.0 {
            mean.iter().map(|m| m / mean_norm).collect()
        } else {
            vec![0.0; d]
        };
        let mut comps = vec![first];
        comps.resize(rank, vec![0.0; d]);
        return (comps, mean_norm == 0.0);
    }
    let comps = (0..rank)
        .map(|c| {
            let mut v: Vec<f64> = (0..d).map(|k| vecs.get(k, c)).collect();
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            if dot(&v, &mean) < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    (comps, false)
}

/// Per-layer unit steering vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringDirections {
    pub method: DirectionMethod,
    pub d_model: usize,
    pub rank: usize,
    /// `components[l - 1][j]` is component `j` of layer `l`.
    pub components: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
    pub sign_convention: String,
    pub samples: u64,
    pub model_hash: Hash32,
    pub perturbation_hash: Hash32,
    /// Layers (1-based) that had neither spread nor mean.
    pub degenerate_layers: Vec<usize>,
}

/// Top-`rank` principal components of each layer's shifts.
pub fn extract_directions(
    shifts: &ShiftSet,
    rank: usize,
    method: DirectionMethod,
    model_hash: Hash32,
    perturbation_hash: Hash32,
) -> Result<SteeringDirections> {
    let n = shifts.num_samples();
    if rank == 0 || n < rank {
        return Err(MesaError::config(format!(
            "rank {rank} needs 1 <= rank <= samples ({n})"
        )));
    }
    let d = shifts.layers[0].cols();
    if rank > d {
        return Err(MesaError::config(format!("rank {rank} exceeds width {d}")));
    }
    let mut components = Vec::new();
    let mut degenerate_layers = Vec::new();
    for (l, x) in shifts.layers.iter().enumerate() {
        if !x.is_finite() {
            return Err(MesaError::input(format!("non-finite shifts at layer {}", l + 1)));
        }
        let (comps, degenerate) = layer_components(x, rank);
        if degenerate {
            eprintln!("warning: layer {} has zero shift; emitting a zero direction", l + 1);
            degenerate_layers.push(l + 1);
        }
        components.push(comps);
    }
    Ok(SteeringDirections {
        method,
        d_model: d,
        rank,
        components,
        weights: vec![1.0 / rank as f64; rank],
        sign_convention: SIGN_CONVENTION.into(),
        samples: n as u64,
        model_hash,
        perturbation_hash,
        degenerate_layers,
    })
}

impl SteeringDirections {
    pub fn num_layers(&self) -> usize {
        self.components.len()
    }

    /// `Σ_j w_j · c_j` for layer `layer` (1-based).
    pub fn combined(&self, layer: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d_model];
        for (c, w) in self.components[layer - 1].iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }

    /// Same directions truncated to the leading `rank` components.
    pub fn with_rank(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank {
            return Err(MesaError::config(format!(
                "rank {rank} not available (have {})",
                self.rank
            )));
        }
        let mut out = self.clone();
        out.rank = rank;
        out.components.iter_mut().for_each(|c| c.truncate(rank));
        out.weights = vec![1.0 / rank as f64; rank];
        Ok(out)
    }

    pub fn injection(&self, alpha: f64, start_position: usize) -> InjectionSpec {
        InjectionSpec {
            directions: (1..=self.num_layers()).map(|l| Some(self.combined(l))).collect(),
            alpha,
            start_position,
        }
    }

    pub fn check_model(&self, model_hash: &Hash32) -> Result<()> {
        if &self.model_hash != model_hash {
            return Err(MesaError::Stale {
                what: format!("{} directions base model", self.method.name()),
                expected: model_hash.hex(),
                found: self.model_hash.hex(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.blob(self.method.name().as_bytes());
        w.u32(self.num_layers() as u32);
        w.u32(self.d_model as u32);
        w.u32(self.rank as u32);
        w.blob(self.sign_convention.as_bytes());
        for &x in &self.weights {
            w.f64(x);
        }
        for layer in &self.components {
            for c in layer {
                w.f32s(c);
            }
        }
        w.u64(self.samples);
        w.hash(&self.model_hash);
        w.hash(&self.perturbation_hash);
        w.u32(self.degenerate_layers.len() as u32);
        for &l in &self.degenerate_layers {
            w.u32(l as u32);
        }
        w.into_inner()
    }

    /// Parses a directions file; stored vectors are renormalized to unit length.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported directions version {version}")));
        }
        let tag = String::from_utf8_lossy(r.blob()?).to_string();
        let method = DirectionMethod::from_name(&tag).ok_or_else(|| r.error(format!("unknown method {tag:?}")))?;
        let layers = r.u32()? as usize;
        let d = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let sign_convention = String::from_utf8_lossy(r.blob()?).to_string();
        if sign_convention.is_empty() {
            return Err(r.error("missing sign convention"));
        }
        let weights = (0..rank).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut components = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut layer = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut v = r.f32s(d)?;
                let n = norm(&v);
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                layer.push(v);
            }
            components.push(layer);
        }
        let samples = r.u64()?;
        let model_hash = r.hash()?;
        let perturbation_hash = r.hash()?;
        let nd = r.u32()? as usize;
        let degenerate_layers = (0..nd)
            .map(|_| r.u32().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            method,
            d_model: d,
            rank,
            components,
            weights,
            sign_convention,
            samples,
            model_hash,
            perturbation_hash,
            degenerate_layers,
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

/// Baseline directions from random noise/mask contrast inputs.
pub fn baseline_directions_stochastic(
    model: &ModelParams,
    world: &World,
    samples: &Corpus,
    n_per_sample: usize,
    contrast: &ContrastConfig,
    rank: usize,
    seed: u64,
) -> Result<SteeringDirections> {
    let shifts = collect_contrast_shifts(model, world, samples, n_per_sample, contrast, seed)?;
    extract_directions(
        &shifts,
        rank,
        DirectionMethod::StochasticContrast,
        model.content_hash(),
        Hash32::default(),
    )
}

/// Where the steering vector is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionScope {
    /// From the last prompt position on (every position that emits a token).
    #[default]
    Generated,
    /// Every position, visual prefix included.
    All,
}

/// First residual position that receives the steering vector.
pub fn injection_start(model: &ModelParams, prompt_len: usize, scope: InjectionScope) -> usize {
    match scope {
        InjectionScope::Generated => model.config.visual_tokens + prompt_len - 1,
        InjectionScope::All => 0,
    }
}

/// Decodes `requests` with `α · d` added at the generated positions.
pub fn intervene(
    model: &ModelParams,
    directions: &SteeringDirections,
    requests: &[GenerationRequest],
    alpha: f64,
    strategy: &DecodeStrategy,
    max_new_tokens: usize,
    scope: InjectionScope,
) -> Result<Vec<GenerationTrace>> {
    directions.check_model(&model.content_hash())?;
    if directions.d_model != model.config.d_model || directions.num_layers() != model.config.layers {
        return Err(MesaError::config("directions do not match the model's layers or width"));
    }
    let prompt_len = requests.first().map_or(1, |r| r.prompt.len());
    if requests.iter().any(|r| r.prompt.len() != prompt_len) {
        return Err(MesaError::input(
            "all requests in one intervention batch must share the prompt length",
        ));
    }
    let inj = directions.injection(alpha, injection_start(model, prompt_len, scope));
    generate_batch(model, requests, strategy, max_new_tokens, Some(&inj), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifts(rows: &[Vec<f64>]) -> ShiftSet {
        ShiftSet {
            layers: vec![Matrix::from_rows(rows), Matrix::from_rows(rows)],
        }
    }

    #[test]
    fn axis_aligned_shifts() {
        let s = shifts(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0]]);
        let d = extract_directions(&s, 1, DirectionMethod::Mesa, Hash32::default(), Hash32::default()).unwrap();
        assert_eq!(d.components[0][0], vec![1.0, 0.0]);
    }

    #[test]
    fn single_sample_uses_its_direction() {
        let s = shifts(&[vec![3.0, 4.0]]);
        let d = extract_directions(&s, 1, DirectionMethod::Mesa, Hash32::default(), Hash32::default()).unwrap();
        assert!((d.components[0][0][0] - 0.6).abs() < 1e-15);
        assert!((d.components[0][0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_shift_is_degenerate() {
        let s = shifts(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let d = extract_directions(&s, 1, DirectionMethod::Mesa, Hash32::default(), Hash32::default()).unwrap();
        assert_eq!(d.degenerate_layers, vec![1, 2]);
        assert_eq!(d.components[0][0], vec![0.0, 0.0]);
    }

    #[test]
    fn rank_exceeding_samples_rejected() {
        let s = shifts(&[vec![1.0, 0.0]]);
        assert!(extract_directions(&s, 2, DirectionMethod::Mesa, Hash32::default(), Hash32::default()).is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 1.0]]);
        let (vals, vecs) = symmetric_eigen(&a);
        for c in 0..3 {
            let v: Vec<f64> = (0..3).map(|k| vecs.get(k, c)).collect();
            for i in 0..3 {
                let av: f64 = (0..3).map(|k| a.get(i, k) * v[k]).sum();
                assert!((av - vals[c] * v[i]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn directions_round_trip_unit_norm() {
        let s = shifts(&[vec![1.0, 0.3, -0.2], vec![0.2, -0.1, 0.9], vec![0.5, 0.5, 0.5]]);
        let d = extract_directions(
            &s,
            2,
            DirectionMethod::StochasticContrast,
            Hash32::of(b"m"),
            Hash32::default(),
        )
        .unwrap();
        let back = SteeringDirections::from_bytes(&d.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.method, d.method);
        for layer in &back.components {
            for c in layer {
                assert!((norm(c) - 1.0).abs() < 1e-9);
            }
        }
    }
}
