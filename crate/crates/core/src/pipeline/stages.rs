// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each reads only declared artifacts (verifying their
//! recorded hashes), writes its outputs atomically and records itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analyze::sweep_tsv;
use crate::artifact::{read_file, Hash32};
use crate::error::{MesaError, Result};
use crate::model::{self, DecodeStrategy, GenerationTrace, ModelParams, StopReason};
use crate::perturb::{self, gradient_check, CheckedObjective, GradCheckInstance, GradCheckReport, PerturbationParams};
use crate::steer::{self, collect_shifts, extract_directions as extract, DirectionMethod, SteeringDirections};
use crate::supervision::{build_supervision, SupervisionCache};
use crate::world::{self, Corpus, TokenId, World};

use super::experiment::{self, ablation_criterion, AblationInputs, Analysis, EvalContext, MethodSweep};
use super::{RunDir, RunManifest, StageRecord};

pub const WORLD: &str = "world.json";
pub const MODEL: &str = "model.mesamodl";
pub const CACHE: &str = "supervision.mesacach";
pub const PERTURBATION: &str = "perturbation.mesapert";
pub const DIRECTIONS_MESA: &str = "directions_mesa.mesadirs";
pub const DIRECTIONS_BASELINE: &str = "directions_baseline.mesadirs";
pub const SPLITS: [&str; 5] = ["train", "heldout", "supervision", "validation", "test"];

pub fn corpus_artifact(split: &str) -> String {
    format!("corpus_{split}.jsonl")
}

/// Bookkeeping for one running stage.
struct Stage<'a> {
    dir: &'a RunDir,
    name: &'static str,
    started: Instant,
    inputs: BTreeMap<String, Hash32>,
    outputs: BTreeMap<String, Hash32>,
}

impl<'a> Stage<'a> {
    fn start(dir: &'a RunDir, name: &'static str) -> Self {
        Self {
            dir,
            name,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn seed(&self) -> u64 {
        self.dir.config.stage_seed(self.name)
    }

    fn require(&mut self, artifact: &str) -> Result<PathBuf> {
        let h = self.dir.require(artifact)?;
        self.inputs.insert(artifact.to_string(), h);
        Ok(self.dir.path(artifact))
    }

    fn output(&mut self, artifact: &str, hash: Hash32) {
        self.outputs.insert(artifact.to_string(), hash);
    }

    fn write(&mut self, artifact: &str, bytes: &[u8]) -> Result<()> {
        let h = self.dir.write(artifact, bytes)?;
        self.output(artifact, h);
        Ok(())
    }

    /// Writes a JSON report wrapped with the hash of the manifest it was derived from.
    fn report<T: Serialize>(&mut self, artifact: &str, body: &T) -> Result<()> {
        let manifest_hash = self.dir.manifest()?.hash();
        let value = serde_json::json!({ "manifest_hash": manifest_hash, "report": body });
        let h = self.dir.write_json(artifact, &value)?;
        self.output(artifact, h);
        Ok(())
    }

    fn finish(self) -> Result<RunManifest> {
        let record = StageRecord {
            stage: self.name.to_string(),
            seed: self.seed(),
            config_hash: self.dir.config.hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        self.dir.finish_stage(record)
    }
}

// ---------------------------------------------------------------------------
// Loaders with gating
// ---------------------------------------------------------------------------

fn world_from(stage: &mut Stage) -> Result<World> {
    let p = stage.require(WORLD)?;
    world::load_world(&p)
}

fn corpus_from(stage: &mut Stage, split: &str, world: &World) -> Result<Corpus> {
    let p = stage.require(&corpus_artifact(split))?;
    let c = Corpus::load(&p)?;
    if c.world_hash != world.content_hash() {
        return Err(MesaError::Stale {
            what: format!("{split} corpus world"),
            expected: world.content_hash().hex(),
            found: c.world_hash.hex(),
        });
    }
    Ok(c)
}

fn model_from(stage: &mut Stage, world: &World) -> Result<ModelParams> {
    let p = stage.require(MODEL)?;
    let m = ModelParams::load(&p)?;
    if m.config.vocab_size != world.vocab().len() {
        return Err(MesaError::config("model vocabulary does not match the world"));
    }
    Ok(m)
}

fn directions_from(stage: &mut Stage, artifact: &str, model: &ModelParams) -> Result<SteeringDirections> {
    let p = stage.require(artifact)?;
    let d = SteeringDirections::load(&p)?;
    d.check_model(&model.content_hash())?;
    Ok(d)
}

/// Loads the world of a run after verifying its hash.
pub fn load_world(dir: &RunDir) -> Result<World> {
    dir.require(WORLD)?;
    world::load_world(&dir.path(WORLD))
}

pub fn load_corpus(dir: &RunDir, split: &str) -> Result<Corpus> {
    let a = corpus_artifact(split);
    dir.require(&a)?;
    Corpus::load(&dir.path(&a))
}

pub fn load_model(dir: &RunDir) -> Result<ModelParams> {
    dir.require(MODEL)?;
    ModelParams::load(&dir.path(MODEL))
}

/// `mesa` or `baseline`.
pub fn load_directions(dir: &RunDir, which: &str) -> Result<SteeringDirections> {
    let a = directions_artifact(which)?;
    dir.require(a)?;
    SteeringDirections::load(&dir.path(a))
}

fn directions_artifact(which: &str) -> Result<&'static str> {
    match which {
        "mesa" => Ok(DIRECTIONS_MESA),
        "baseline" | "stochastic_contrast" => Ok(DIRECTIONS_BASELINE),
        other => Err(MesaError::config(format!(
            "unknown direction set {other:?} (expected mesa|baseline)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Stages I-IV
// ---------------------------------------------------------------------------

/// Builds the world and every corpus split.
pub fn gen_corpus(dir: &RunDir) -> Result<RunManifest> {
    let mut st = Stage::start(dir, "gen-corpus");
    let world = World::new(dir.config.world.clone())?;
    world::save_world(&world, &dir.path(WORLD))?;
    st.output(WORLD, Hash32::of(&read_file(&dir.path(WORLD))?));
    let d = &dir.config.data;
    let sizes = [d.train, d.heldout, d.supervision, d.validation, d.test];
    for (split, n) in SPLITS.iter().zip(sizes) {
        let corpus = Corpus::generate(&world, n, st.seed(), split);
        st.write(&corpus_artifact(split), &corpus.to_jsonl())?;
    }
    st.finish()
}

/// Trains the base model; a missed precondition exits as a training failure.
pub fn train_base(dir: &RunDir) -> Result<(RunManifest, model::TrainReport)> {
    let mut st = Stage::start(dir, "train-base");
    let world = world_from(&mut st)?;
    let train = corpus_from(&mut st, "train", &world)?;
    let heldout = corpus_from(&mut st, "heldout", &world)?;
    let (params, report) = model::train_base(
        &world,
        &train,
        &heldout,
        &dir.config.model,
        &dir.config.train,
        st.seed(),
    )?;
    st.write(MODEL, &params.to_bytes())?;
    st.report("reports/train_base.json", &report)?;
    Ok((st.finish()?, report))
}

pub fn cache_supervision(dir: &RunDir) -> Result<RunManifest> {
    let mut st = Stage::start(dir, "cache-supervision");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let corpus = corpus_from(&mut st, "supervision", &world)?;
    let cache = build_supervision(&model, &world, &corpus, &dir.config.degradations, st.seed())?;
    st.write(CACHE, &cache.to_bytes())?;
    st.finish()
}

fn load_cache(st: &mut Stage, model: &ModelParams, world: &World, corpus: &Corpus) -> Result<SupervisionCache> {
    let p = st.require(CACHE)?;
    let cache = SupervisionCache::load(&p)?;
    cache.check(
        &model.content_hash(),
        &world.vocab().content_hash(),
        Some(&corpus.content_hash()),
    )?;
    Ok(cache)
}

pub fn train_perturbation(dir: &RunDir) -> Result<(RunManifest, perturb::PerturbTrainReport)> {
    let mut st = Stage::start(dir, "train-perturbation");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let corpus = corpus_from(&mut st, "supervision", &world)?;
    let cache = load_cache(&mut st, &model, &world, &corpus)?;
    let (phi, report) = perturb::train_perturbation(&cache, &model, &world, &corpus, &dir.config.perturb, st.seed())?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    st.write(PERTURBATION, &phi.to_bytes())?;
    st.report("reports/train_perturbation.json", &report)?;
    Ok((st.finish()?, report))
}

fn mesa_shifts(st: &mut Stage, world: &World, model: &ModelParams) -> Result<(steer::ShiftSet, PerturbationParams)> {
    let corpus = corpus_from(st, "supervision", world)?;
    let p = st.require(PERTURBATION)?;
    let phi = PerturbationParams::load(&p)?;
    phi.check_model(&model.content_hash())?;
    Ok((collect_shifts(model, &phi, world, &corpus)?, phi))
}

pub fn extract_directions(dir: &RunDir) -> Result<RunManifest> {
    let mut st = Stage::start(dir, "extract-directions");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let (shifts, phi) = mesa_shifts(&mut st, &world, &model)?;
    let dirs = extract(
        &shifts,
        dir.config.steer.rank,
        DirectionMethod::Mesa,
        model.content_hash(),
        phi.content_hash(),
    )?;
    st.write(DIRECTIONS_MESA, &dirs.to_bytes())?;
    st.finish()
}

pub fn baseline_directions(dir: &RunDir) -> Result<RunManifest> {
    let mut st = Stage::start(dir, "baseline-directions");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let corpus = corpus_from(&mut st, "supervision", &world)?;
    let s = &dir.config.steer;
    let dirs = steer::baseline_directions_stochastic(
        &model,
        &world,
        &corpus,
        s.baseline_per_sample,
        &s.contrast,
        s.rank,
        st.seed(),
    )?;
    st.write(DIRECTIONS_BASELINE, &dirs.to_bytes())?;
    st.finish()
}

// ---------------------------------------------------------------------------
// Generation and analyses
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TraceLine {
    id: u64,
    generated: Vec<TokenId>,
    stop: StopReason,
    hash: Hash32,
}

fn traces_jsonl(corpus: &Corpus, traces: &[GenerationTrace]) -> Vec<u8> {
    let mut out = Vec::new();
    for (rec, t) in corpus.records.iter().zip(traces) {
        let line = TraceLine {
            id: rec.id,
            generated: t.generated.clone(),
            stop: t.stop,
            hash: t.content_hash(),
        };
        out.extend(serde_json::to_vec(&line).expect("json"));
        out.push(b'\n');
    }
    out
}

/// What `generate` decoded and the fingerprint of every trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub split: String,
    pub directions: Option<Hash32>,
    pub alpha: f64,
    pub strategy: String,
    pub samples: usize,
    pub trace_set_hash: Hash32,
    pub trace_hashes: Vec<Hash32>,
    pub artifact: String,
}

fn trace_set_hash(traces: &[GenerationTrace]) -> Hash32 {
    let mut bytes = Vec::with_capacity(traces.len() * 32);
    for t in traces {
        bytes.extend_from_slice(&t.content_hash().0);
    }
    Hash32::of(&bytes)
}

/// Decodes a split, optionally steered by a directions file.
pub fn generate(dir: &RunDir, split: &str, directions: Option<&Path>) -> Result<(RunManifest, GenerateSummary)> {
    let mut st = Stage::start(dir, "generate");
    if !SPLITS.contains(&split) {
        return Err(MesaError::config(format!("unknown split {split:?}")));
    }
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let corpus = corpus_from(&mut st, split, &world)?;
    let dirs = match directions {
        Some(p) => {
            let bytes = read_file(p)?;
            let d = SteeringDirections::from_bytes(&bytes, p)?;
            d.check_model(&model.content_hash())?;
            st.inputs.insert(p.display().to_string(), Hash32::of(&bytes));
            Some(d)
        }
        None => None,
    };
    let ev = &dir.config.eval;
    let strategy = DecodeStrategy::from_name(&ev.decode, st.seed())?;
    let traces = experiment::decode_split(
        &model,
        &world,
        &corpus,
        dirs.as_ref().map(|d| (d, ev.alpha)),
        &strategy,
        ev.max_new_tokens,
        dir.config.steer.scope,
    )?;
    let label = match &dirs {
        Some(d) => format!("{}_{}_a{}", split, d.method.name(), ev.alpha),
        None => format!("{split}_vanilla"),
    };
    let artifact = format!("traces/{label}_{}.jsonl", strategy.name());
    st.write(&artifact, &traces_jsonl(&corpus, &traces))?;
    let summary = GenerateSummary {
        split: split.to_string(),
        directions: dirs.as_ref().map(SteeringDirections::content_hash),
        alpha: ev.alpha,
        strategy: strategy.name().to_string(),
        samples: traces.len(),
        trace_set_hash: trace_set_hash(&traces),
        trace_hashes: traces.iter().map(GenerationTrace::content_hash).collect(),
        artifact,
    };
    Ok((st.finish()?, summary))
}

fn contexts<'a>(
    dir: &RunDir,
    st: &mut Stage,
    model: &'a ModelParams,
    world: &'a World,
    splits: &[&str],
) -> Result<Vec<EvalContext<'a>>> {
    splits
        .iter()
        .map(|split| {
            let corpus = corpus_from(st, split, world)?;
            EvalContext::new(
                model,
                world,
                &corpus,
                &dir.config.eval,
                dir.config.steer.scope,
                st.seed(),
            )
        })
        .collect()
}

/// Sweeps both direction sets over `eval.alphas` on `split`, writing one
/// trace set per strength and a flat table.
pub fn sweep_alpha(dir: &RunDir, split: &str) -> Result<(RunManifest, Vec<MethodSweep>)> {
    let mut st = Stage::start(dir, "sweep-alpha");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let corpus = corpus_from(&mut st, split, &world)?;
    let ctx = EvalContext::new(
        &model,
        &world,
        &corpus,
        &dir.config.eval,
        dir.config.steer.scope,
        st.seed(),
    )?;
    let mut sets = Vec::new();
    for which in ["mesa", "baseline"] {
        let a = directions_artifact(which)?;
        if dir.stage_record(stage_of(a))?.is_some() {
            sets.push((directions_from(&mut st, a, &model)?, which));
        }
    }
    if sets.is_empty() {
        return Err(MesaError::input(
            "no direction sets; run extract-directions or baseline-directions first",
        ));
    }
    let mut sweeps = Vec::new();
    for (dirs, which) in &sets {
        let method = dirs.method.name();
        let mut points = Vec::new();
        for &alpha in &dir.config.eval.alphas {
            let (point, traces) = ctx.evaluate(method, dirs, alpha)?;
            st.write(
                &format!("traces/sweep_{split}_{which}_a{alpha}.jsonl"),
                &traces_jsonl(&corpus, &traces),
            )?;
            points.push(point);
        }
        sweeps.push(MethodSweep {
            method: method.to_string(),
            points,
        });
    }
    let rows: Vec<_> = sweeps.iter().flat_map(|s| s.points.iter().map(|p| p.row())).collect();
    st.write(&format!("reports/sweep_{split}.tsv"), sweep_tsv(&rows).as_bytes())?;
    st.report(&format!("reports/sweep_{split}.json"), &sweeps)?;
    Ok((st.finish()?, sweeps))
}

fn stage_of(artifact: &str) -> &'static str {
    if artifact == DIRECTIONS_MESA {
        "extract-directions"
    } else {
        "baseline-directions"
    }
}

/// Tunes on validation, compares on test, optionally runs the ablations.
pub fn analyze(dir: &RunDir, ablations: bool) -> Result<(RunManifest, Analysis)> {
    let mut st = Stage::start(dir, "analyze");
    let world = world_from(&mut st)?;
    let model = model_from(&mut st, &world)?;
    let mesa = directions_from(&mut st, DIRECTIONS_MESA, &model)?;
    let baseline = directions_from(&mut st, DIRECTIONS_BASELINE, &model)?;
    let ctx = contexts(dir, &mut st, &model, &world, &["validation", "test"])?;
    let (val, test) = (&ctx[0], &ctx[1]);
    let ev = &dir.config.eval;
    let mut analysis = experiment::analyze(val, test, &mesa, &baseline, ev)?;
    if ablations {
        let supervision = corpus_from(&mut st, "supervision", &world)?;
        let cache = load_cache(&mut st, &model, &world, &supervision)?;
        let inputs = AblationInputs {
            model: &model,
            world: &world,
            cache: &cache,
            supervision: &supervision,
            loss: &dir.config.perturb,
            rank: dir.config.steer.rank,
            seed: dir.config.stage_seed("train-perturbation"),
        };
        let loss = experiment::loss_ablation(&inputs, val, test, ev)?;
        let (shifts, phi) = mesa_shifts(&mut st, &world, &model)?;
        let max_rank = 5.min(shifts.num_samples()).min(model.config.d_model);
        let full = extract(
            &shifts,
            max_rank,
            DirectionMethod::Mesa,
            model.content_hash(),
            phi.content_hash(),
        )?;
        let ranks = experiment::rank_sweep(&full, max_rank, val, test, ev)?;
        analysis.criteria.push(ablation_criterion(&loss, &ranks));
        analysis.loss_ablation = Some(loss);
        analysis.rank_sweep = Some(ranks);
    }
    let mut rows: Vec<_> = analysis.validation.points.iter().map(|p| p.row()).collect();
    rows.extend(analysis.baseline_test_sweep.points.iter().map(|p| p.row()));
    st.write("reports/analysis_sweeps.tsv", sweep_tsv(&rows).as_bytes())?;
    st.report("reports/analysis.json", &analysis)?;
    Ok((st.finish()?, analysis))
}

/// Outcome of the gradient-check battery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub reports: Vec<GradCheckReport>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance && self.checked > 0
    }
}

/// Runs `instances` random small problems through every objective.
pub fn gradcheck_battery(instances: usize, seed: u64) -> Result<GradcheckSummary> {
    let mut reports = Vec::new();
    for i in 0..instances {
        let vocab = 8 + (i % 9);
        let d = 4 + 2 * (i % 3);
        let inst = GradCheckInstance::random(crate::artifact::split_seed(seed, &format!("gradcheck/{i}")), vocab, d)?;
        for which in [
            CheckedObjective::Hall,
            CheckedObjective::Preserve,
            CheckedObjective::Total,
        ] {
            reports.push(gradient_check(&inst, which)?);
        }
    }
    let checked = reports.iter().filter(|r| r.skipped.is_none()).count();
    Ok(GradcheckSummary {
        instances,
        checked,
        skipped: reports.len() - checked,
        max_relative_error: reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max),
        tolerance: 1e-4,
        reports,
    })
}

pub fn gradcheck(dir: &RunDir, instances: usize) -> Result<(RunManifest, GradcheckSummary)> {
    let mut st = Stage::start(dir, "gradcheck");
    let summary = gradcheck_battery(instances, st.seed())?;
    st.report("reports/gradcheck.json", &summary)?;
    Ok((st.finish()?, summary))
}

/// Stages I-IV, a steered generation on the test split and the analysis.
pub fn run_all(dir: &RunDir) -> Result<RunManifest> {
    gen_corpus(dir)?;
    train_base(dir)?;
    cache_supervision(dir)?;
    train_perturbation(dir)?;
    extract_directions(dir)?;
    baseline_directions(dir)?;
    let mesa = dir.path(DIRECTIONS_MESA);
    generate(dir, "test", Some(&mesa))?;
    Ok(analyze(dir, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub artifacts: usize,
    pub mismatches: Vec<String>,
    pub first: BTreeMap<String, Hash32>,
    pub second: BTreeMap<String, Hash32>,
}

impl ReproReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty() && self.first.len() == self.second.len()
    }
}

fn artifact_hashes(m: &RunManifest) -> BTreeMap<String, Hash32> {
    m.artifacts.iter().map(|(k, v)| (k.clone(), v.hash)).collect()
}

/// Runs the pipeline twice into `root/run_a` and `root/run_b` and compares
/// every artifact hash.
pub fn repro_check(dir: &RunDir) -> Result<ReproReport> {
    let mut st = Stage::start(dir, "repro-check");
    let a = RunDir::new(dir.path("repro/run_a"), dir.config.clone())?;
    let b = RunDir::new(dir.path("repro/run_b"), dir.config.clone())?;
    let first = artifact_hashes(&run_all(&a)?);
    let second = artifact_hashes(&run_all(&b)?);
    let mut keys: Vec<&String> = first.keys().chain(second.keys()).collect();
    keys.sort();
    keys.dedup();
    let mismatches = keys
        .into_iter()
        .filter(|k| first.get(*k) != second.get(*k))
        .cloned()
        .collect();
    let report = ReproReport {
        artifacts: first.len(),
        mismatches,
        first,
        second,
    };
    st.report("reports/repro_check.json", &report)?;
    st.finish()?;
    Ok(report)
}
