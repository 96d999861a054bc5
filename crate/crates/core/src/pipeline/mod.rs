// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, output-directory layout, stage records and the
//! manifest that ties every artifact hash together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, split_seed, Hash32};
use crate::degrade::{ContrastConfig, DegradationSpec};
use crate::error::{MesaError, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::perturb::LossConfig;
use crate::steer::InjectionScope;
use crate::world::WorldConfig;

pub mod cli;
pub mod experiment;
pub mod stages;

pub use experiment::{Analysis, CriterionResult, EvalContext, MethodSweep, SweepPoint};
pub use stages::{GenerateSummary, GradcheckSummary, ReproReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sizes of the corpus splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub heldout: usize,
    pub supervision: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            heldout: 300,
            supervision: 400,
            validation: 200,
            test: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerConfig {
    pub rank: usize,
    pub scope: InjectionScope,
    /// Contrast inputs per sample for the stochastic baseline.
    pub baseline_per_sample: usize,
    pub contrast: ContrastConfig,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            scope: InjectionScope::Generated,
            baseline_per_sample: 4,
            contrast: ContrastConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Steering strength used by `generate` when no tuning is involved.
    pub alpha: f64,
    /// Grid for sweeps and tuning.
    pub alphas: Vec<f64>,
    pub decode: String,
    pub max_new_tokens: usize,
    /// Tuning constraint: largest allowed relative length change.
    pub max_length_change: f64,
    /// Tuning constraint: largest allowed recall drop (absolute).
    pub max_recall_drop: f64,
    /// Top-m and exclusion used by the distribution-preservation measurement.
    pub preserve_m: usize,
    pub preserve_exclude: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.4,
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6],
            decode: "greedy".into(),
            max_new_tokens: 32,
            max_length_change: 0.15,
            max_recall_drop: 0.05,
            preserve_m: 50,
            preserve_exclude: 5,
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub degradations: Vec<DegradationSpec>,
    pub perturb: LossConfig,
    pub steer: SteerConfig,
    pub eval: EvalConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 20240901,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            degradations: DegradationSpec::default_family(0),
            perturb: LossConfig::default(),
            steer: SteerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MesaError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| MesaError::format(path, e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Seed of one stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        split_seed(self.seed, &format!("stage/{stage}"))
    }

    pub fn hash(&self) -> Hash32 {
        Hash32::of(&serde_json::to_vec(self).expect("json"))
    }

    /// Copies the shape the world dictates (vocabulary, patch width, grid)
    /// into the model config.
    pub fn resolved(mut self) -> Self {
        self.model.vocab_size = self.world.objects.len() + crate::world::NUM_SPECIAL_TOKENS;
        self.model.patch_dim = self.world.patch_dim;
        self.model.visual_tokens = self.world.num_cells();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        let needed = self.model.visual_tokens + 3 + self.eval.max_new_tokens.max(self.train.eval_max_new_tokens);
        if self.model.max_seq_len + 1 < needed {
            return Err(MesaError::config(format!(
                "max_seq_len {} is too short for the prompt plus {} new tokens",
                self.model.max_seq_len, self.eval.max_new_tokens
            )));
        }
        if self.degradations.is_empty() {
            return Err(MesaError::config("at least one degradation is required"));
        }
        for d in &self.degradations {
            d.validate(self.world.grid_h, self.world.grid_w)?;
        }
        self.perturb.validate(self.model.vocab_size)?;
        if self.steer.rank == 0 || self.steer.rank > 5 {
            return Err(MesaError::config("rank must be in 1..=5"));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(MesaError::config("max_new_tokens must be >= 1"));
        }
        if self.eval.alphas.iter().any(|a| !a.is_finite()) || !self.eval.alpha.is_finite() {
            return Err(MesaError::config("alphas must be finite"));
        }
        crate::model::DecodeStrategy::from_name(&self.eval.decode, 0)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run directory and stage records
// ---------------------------------------------------------------------------

/// One stage execution: what it read, what it wrote, how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub config_hash: Hash32,
    pub inputs: BTreeMap<String, Hash32>,
    pub outputs: BTreeMap<String, Hash32>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub hash: Hash32,
    pub stage: String,
}

/// Snapshot of a run: config, seeds, every artifact hash and stage timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: LabConfig,
    pub config_hash: Hash32,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub stage_timings: BTreeMap<String, f64>,
    /// Interpretive choices that shape the numbers.
    pub choices: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn hash(&self) -> Hash32 {
        Hash32::of(&serde_json::to_vec(&(&self.config_hash, &self.seeds, &self.artifacts)).expect("json"))
    }
}

fn default_choices() -> BTreeMap<String, String> {
    [
        (
            "injection_site",
            "post-block residual stream, from the last prompt position on",
        ),
        ("direction_sign", crate::steer::SIGN_CONVENTION),
        ("direction_norm", "unit vectors; alpha carries all magnitude"),
        ("rank_combination", "equal weights 1/r"),
        ("hall_subset", "top-m of each degraded target"),
        ("preserve_subset", "top-m minus top-j of the clean target"),
        ("truncated_kl", "both distributions renormalized over the subset"),
        ("weight_kl", "full vocabulary, frozen at cache time"),
        ("shift_position", "first generation position"),
        ("zipf_fit", "ordinary least squares on log-log"),
        ("text_only", "every patch replaced by the background prototype"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// An output directory owned by one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub config: LabConfig,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, config: LabConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let root = root.into();
        for sub in ["", "stages", "traces", "reports"] {
            std::fs::create_dir_all(root.join(sub)).map_err(|e| MesaError::io(root.join(sub), e))?;
        }
        Ok(Self { root, config })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn stage_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn stage_record(&self, stage: &str) -> Result<Option<StageRecord>> {
        let p = self.stage_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&read_file(&p)?)?))
    }

    fn all_records(&self) -> Result<Vec<StageRecord>> {
        let mut out = Vec::new();
        let dir = self.root.join("stages");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| MesaError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        for p in names {
            out.push(serde_json::from_slice(&read_file(&p)?)?);
        }
        Ok(out)
    }

    /// Hash of an artifact as recorded by whichever stage produced it.
    fn recorded_hash(&self, artifact: &str) -> Result<Option<Hash32>> {
        Ok(self
            .all_records()?
            .into_iter()
            .find_map(|r| r.outputs.get(artifact).copied()))
    }

    /// Verifies that `artifact` exists and still has the hash its producer
    /// recorded, and returns that hash.
    pub fn require(&self, artifact: &str) -> Result<Hash32> {
        let path = self.path(artifact);
        let recorded = self
            .recorded_hash(artifact)?
            .ok_or_else(|| MesaError::input(format!("{artifact} has not been produced in {}", self.root.display())))?;
        let actual = Hash32::of(&read_file(&path)?);
        if actual != recorded {
            return Err(MesaError::Stale {
                what: artifact.into(),
                expected: recorded.hex(),
                found: actual.hex(),
            });
        }
        Ok(recorded)
    }

    /// Writes bytes atomically and returns their hash.
    pub fn write(&self, artifact: &str, bytes: &[u8]) -> Result<Hash32> {
        let p = self.path(artifact);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MesaError::io(parent, e))?;
        }
        atomic_write(&p, bytes)?;
        Ok(Hash32::of(bytes))
    }

    pub fn write_json<T: Serialize>(&self, artifact: &str, value: &T) -> Result<Hash32> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(artifact, &bytes)
    }

    /// Records a finished stage and refreshes the run manifest.
    pub fn finish_stage(&self, record: StageRecord) -> Result<RunManifest> {
        let mut bytes = serde_json::to_vec_pretty(&record)?;
        bytes.push(b'\n');
        atomic_write(&self.stage_path(&record.stage), &bytes)?;
        let manifest = self.manifest()?;
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        atomic_write(&self.path("manifest.json"), &bytes)?;
        Ok(manifest)
    }

    /// Manifest assembled from every stage record present.
    pub fn manifest(&self) -> Result<RunManifest> {
        let mut m = RunManifest {
            tool_version: TOOL_VERSION.into(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seeds: BTreeMap::from([("master".to_string(), self.config.seed)]),
            artifacts: BTreeMap::new(),
            stage_timings: BTreeMap::new(),
            choices: default_choices(),
        };
        for r in self.all_records()? {
            m.seeds.insert(r.stage.clone(), r.seed);
            m.stage_timings.insert(r.stage.clone(), r.seconds);
            for (name, hash) in &r.outputs {
                m.artifacts.insert(
                    name.clone(),
                    ArtifactEntry {
                        path: name.clone(),
                        hash: *hash,
                        stage: r.stage.clone(),
                    },
                );
            }
        }
        Ok(m)
    }
}
