// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation protocol: decoding whole splits, alpha sweeps, tuning,
//! the MESA-versus-baseline comparison and the ablation harness.

use serde::{Deserialize, Serialize};

use crate::analyze::{behavior_report, eos_margin, BehaviorReport, EosMarginSeries, SweepRow};
use crate::error::{MesaError, Result};
use crate::model::{
    generate_batch, teacher_forced_logits, DecodeStrategy, GenerationRequest, GenerationTrace, ModelParams,
};
use crate::perturb::{train_perturbation, truncated_kl, LossConfig, SubsetRule};
use crate::steer::{
    collect_shifts, extract_directions, injection_start, intervene, DirectionMethod, InjectionScope, SteeringDirections,
};
use crate::supervision::SupervisionCache;
use crate::tensor::Matrix;
use crate::world::{Corpus, Scene, World};

use super::EvalConfig;

/// Clean requests and ground-truth scenes for a split.
pub fn split_requests(
    model: &ModelParams,
    world: &World,
    corpus: &Corpus,
) -> Result<(Vec<GenerationRequest>, Vec<Scene>)> {
    if corpus.is_empty() {
        return Err(MesaError::input("evaluation split is empty"));
    }
    let prompt = world.prompt();
    let mut requests = Vec::with_capacity(corpus.len());
    let mut scenes = Vec::with_capacity(corpus.len());
    for rec in &corpus.records {
        let scene = rec.scene();
        requests.push(GenerationRequest {
            visual: model.embed_visual(&world.render(&scene, rec.render_seed))?,
            prompt: prompt.clone(),
            sample_seed: rec.id,
        });
        scenes.push(scene);
    }
    Ok((requests, scenes))
}

/// Decodes every sample of a split, optionally steered by `(directions, α)`.
pub fn decode_split(
    model: &ModelParams,
    world: &World,
    corpus: &Corpus,
    steering: Option<(&SteeringDirections, f64)>,
    strategy: &DecodeStrategy,
    max_new_tokens: usize,
    scope: InjectionScope,
) -> Result<Vec<GenerationTrace>> {
    let (requests, _) = split_requests(model, world, corpus)?;
    match steering {
        Some((dirs, alpha)) => intervene(model, dirs, &requests, alpha, strategy, max_new_tokens, scope),
        None => generate_batch(model, &requests, strategy, max_new_tokens, None, false),
    }
}

/// Teacher-forced logits along fixed trajectories, optionally steered.
fn forced_logits(
    model: &ModelParams,
    requests: &[GenerationRequest],
    trajectories: &[GenerationTrace],
    steering: Option<(&SteeringDirections, f64)>,
    scope: InjectionScope,
) -> Result<Vec<Matrix>> {
    requests
        .iter()
        .zip(trajectories)
        .map(|(req, tr)| {
            let inj = steering.map(|(d, a)| d.injection(a, injection_start(model, req.prompt.len(), scope)));
            teacher_forced_logits(model, &req.visual, &tr.full_sequence(), req.prompt.len(), inj.as_ref())
        })
        .collect()
}

/// EOS-margin series along the given trajectories.
pub fn eos_margins(logits: &[Matrix], eos: u32, condition: &str) -> Vec<EosMarginSeries> {
    logits
        .iter()
        .map(|m| EosMarginSeries {
            condition: condition.to_string(),
            margins: m.rows_iter().map(|l| eos_margin(l, eos)).collect(),
        })
        .collect()
}

/// Mean truncated `KL(P_vanilla ‖ P_steered)` over the top-`m` minus top-`j`
/// tokens of the vanilla distribution, averaged over every forced step.
pub fn preserve_kl(vanilla: &[Matrix], steered: &[Matrix], m: usize, exclude: usize) -> Result<f64> {
    let rule = SubsetRule::TopMExcluding { m, exclude };
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in vanilla.iter().zip(steered) {
        for (za, zb) in a.rows_iter().zip(b.rows_iter()) {
            let subset = rule.select(za)?;
            sum += truncated_kl(za, zb, &subset);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MesaError::Degenerate("no forced steps to compare".into()));
    }
    Ok(sum / n as f64)
}

/// One evaluated strength of one direction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    pub alpha: f64,
    pub report: BehaviorReport,
    pub preserve_kl: f64,
}

impl SweepPoint {
    pub fn row(&self) -> SweepRow {
        SweepRow {
            method: self.method.clone(),
            alpha: self.alpha,
            report: self.report.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSweep {
    pub method: String,
    pub points: Vec<SweepPoint>,
}

/// A split prepared for repeated steered evaluation against one vanilla run.
pub struct EvalContext<'a> {
    model: &'a ModelParams,
    world: &'a World,
    requests: Vec<GenerationRequest>,
    scenes: Vec<Scene>,
    vanilla: Vec<GenerationTrace>,
    vanilla_logits: Vec<Matrix>,
    vanilla_margins: Vec<EosMarginSeries>,
    strategy: DecodeStrategy,
    max_new_tokens: usize,
    scope: InjectionScope,
    preserve: (usize, usize),
}

impl<'a> EvalContext<'a> {
    pub fn new(
        model: &'a ModelParams,
        world: &'a World,
        corpus: &Corpus,
        eval: &EvalConfig,
        scope: InjectionScope,
        decode_seed: u64,
    ) -> Result<Self> {
        let strategy = DecodeStrategy::from_name(&eval.decode, decode_seed)?;
        let (requests, scenes) = split_requests(model, world, corpus)?;
        let vanilla = generate_batch(model, &requests, &strategy, eval.max_new_tokens, None, false)?;
        let vanilla_logits = forced_logits(model, &requests, &vanilla, None, scope)?;
        let vanilla_margins = eos_margins(&vanilla_logits, world.vocab().eos(), "vanilla");
        Ok(Self {
            model,
            world,
            requests,
            scenes,
            vanilla,
            vanilla_logits,
            vanilla_margins,
            strategy,
            max_new_tokens: eval.max_new_tokens,
            scope,
            preserve: (eval.preserve_m, eval.preserve_exclude),
        })
    }

    pub fn vanilla(&self) -> &[GenerationTrace] {
        &self.vanilla
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn steered(&self, dirs: &SteeringDirections, alpha: f64) -> Result<Vec<GenerationTrace>> {
        intervene(
            self.model,
            dirs,
            &self.requests,
            alpha,
            &self.strategy,
            self.max_new_tokens,
            self.scope,
        )
    }

    /// Behavior report plus EOS-margin and preservation measurements.
    pub fn evaluate(
        &self,
        method: &str,
        dirs: &SteeringDirections,
        alpha: f64,
    ) -> Result<(SweepPoint, Vec<GenerationTrace>)> {
        let traces = self.steered(dirs, alpha)?;
        let logits = forced_logits(
            self.model,
            &self.requests,
            &self.vanilla,
            Some((dirs, alpha)),
            self.scope,
        )?;
        let margins = eos_margins(&logits, self.world.vocab().eos(), method);
        let report = behavior_report(
            &self.vanilla,
            &traces,
            &self.scenes,
            self.world.vocab(),
            Some((&self.vanilla_margins, &margins)),
        )?;
        let preserve_kl = preserve_kl(&self.vanilla_logits, &logits, self.preserve.0, self.preserve.1)?;
        Ok((
            SweepPoint {
                method: method.to_string(),
                alpha,
                report,
                preserve_kl,
            },
            traces,
        ))
    }

    pub fn sweep(&self, method: &str, dirs: &SteeringDirections, alphas: &[f64]) -> Result<MethodSweep> {
        let points = alphas
            .iter()
            .map(|&a| self.evaluate(method, dirs, a).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        Ok(MethodSweep {
            method: method.to_string(),
            points,
        })
    }
}

/// Sweeps each named direction set over `alphas` on one split.
pub fn sweep_alpha(
    ctx: &EvalContext,
    methods: &[(&str, &SteeringDirections)],
    alphas: &[f64],
) -> Result<Vec<MethodSweep>> {
    methods.iter().map(|(name, d)| ctx.sweep(name, d, alphas)).collect()
}

/// Strength with the largest CHAIR_S reduction whose length change and
/// recall drop stay inside the configured band; smaller alpha wins ties.
pub fn tune_alpha(sweep: &MethodSweep, eval: &EvalConfig) -> f64 {
    let mut best = (0.0, 0.0);
    for p in &sweep.points {
        let r = &p.report;
        let ok = r.relative_length_change.abs() <= eval.max_length_change && r.delta_recall >= -eval.max_recall_drop;
        let better =
            r.relative_chair_s_reduction > best.1 || (r.relative_chair_s_reduction == best.1 && p.alpha.abs() < best.0);
        if ok && better {
            best = (p.alpha, r.relative_chair_s_reduction);
        }
    }
    best.0
}

/// Smallest grid strength whose CHAIR_S reduction reaches `target`, or the
/// closest one when none does.
fn match_reduction(sweep: &MethodSweep, target: f64) -> &SweepPoint {
    sweep
        .points
        .iter()
        .find(|p| p.report.relative_chair_s_reduction >= target)
        .unwrap_or_else(|| {
            sweep
                .points
                .iter()
                .min_by(|a, b| {
                    let da = (a.report.relative_chair_s_reduction - target).abs();
                    let db = (b.report.relative_chair_s_reduction - target).abs();
                    da.total_cmp(&db)
                })
                .expect("non-empty sweep")
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// One configuration of the ablation harness evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub tuned_alpha: f64,
    pub point: SweepPoint,
}

/// Full comparison between MESA and the stochastic baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub tuned_alpha: f64,
    pub validation: MethodSweep,
    pub mesa: SweepPoint,
    pub baseline_same_alpha: SweepPoint,
    pub baseline_matched: SweepPoint,
    pub baseline_test_sweep: MethodSweep,
    pub criteria: Vec<CriterionResult>,
    pub loss_ablation: Option<Vec<AblationRow>>,
    pub rank_sweep: Option<Vec<AblationRow>>,
}

impl Analysis {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

/// Grid used to find the baseline strength that matches MESA's reduction.
pub fn matching_grid(eval: &EvalConfig) -> Vec<f64> {
    let top = eval.alphas.iter().copied().fold(0.0, f64::max) * 2.5;
    let steps = 25;
    (0..=steps).map(|i| top * i as f64 / steps as f64).collect()
}

/// Tunes MESA on validation, evaluates on test and compares with the
/// baseline at equal strength and at matched CHAIR_S reduction.
pub fn analyze(
    val: &EvalContext,
    test: &EvalContext,
    mesa: &SteeringDirections,
    baseline: &SteeringDirections,
    eval: &EvalConfig,
) -> Result<Analysis> {
    let validation = val.sweep("mesa", mesa, &eval.alphas)?;
    let tuned_alpha = tune_alpha(&validation, eval);
    let (mesa_point, _) = test.evaluate("mesa", mesa, tuned_alpha)?;
    let (baseline_same, _) = test.evaluate("stochastic_contrast", baseline, tuned_alpha)?;
    let baseline_test_sweep = test.sweep("stochastic_contrast", baseline, &matching_grid(eval))?;
    let baseline_matched = match_reduction(&baseline_test_sweep, mesa_point.report.relative_chair_s_reduction).clone();

    let m = &mesa_point.report;
    let b = &baseline_matched.report;
    let mut criteria = Vec::new();
    criteria.push(CriterionResult {
        id: 5,
        name: "end-to-end reduction with length and recall held".into(),
        passed: m.relative_chair_s_reduction >= 0.20
            && m.relative_length_change.abs() <= 0.15
            && m.delta_recall >= -0.05,
        detail: format!(
            "alpha {tuned_alpha}: CHAIR_S {:.4} -> {:.4} ({:.1}% reduction), length {:.2} -> {:.2} ({:+.1}%), recall {:.4} -> {:.4}",
            m.vanilla.chair_s,
            m.steered.chair_s,
            100.0 * m.relative_chair_s_reduction,
            m.vanilla.avg_length,
            m.steered.avg_length,
            100.0 * m.relative_length_change,
            m.vanilla.recall,
            m.steered.recall
        ),
    });
    let reached = b.relative_chair_s_reduction >= m.relative_chair_s_reduction;
    criteria.push(CriterionResult {
        id: 6,
        name: "baseline shortens output and shifts Zipf slope more at matched reduction".into(),
        passed: reached
            && b.delta_length < m.delta_length
            && b.zipf_slope_delta.abs() > m.zipf_slope_delta.abs(),
        detail: format!(
            "baseline alpha {} ({:.1}% reduction{}): length delta {:+.3} vs mesa {:+.3}; |zipf delta| {:.4} vs mesa {:.4}",
            baseline_matched.alpha,
            100.0 * b.relative_chair_s_reduction,
            if reached { "" } else { ", target not reached" },
            b.delta_length,
            m.delta_length,
            b.zipf_slope_delta.abs(),
            m.zipf_slope_delta.abs()
        ),
    });
    let mad_m = m.eos_margin_mad.unwrap_or(f64::NAN);
    let mad_b = baseline_same.report.eos_margin_mad.unwrap_or(f64::NAN);
    criteria.push(CriterionResult {
        id: 7,
        name: "EOS-margin deviation at least 2x smaller than baseline".into(),
        passed: tuned_alpha != 0.0 && 2.0 * mad_m <= mad_b,
        detail: format!("alpha {tuned_alpha}: mesa {mad_m:.5}, baseline {mad_b:.5}"),
    });
    criteria.push(CriterionResult {
        id: 8,
        name: "preserve-subset KL below baseline".into(),
        passed: tuned_alpha != 0.0 && mesa_point.preserve_kl < baseline_same.preserve_kl,
        detail: format!(
            "alpha {tuned_alpha}: mesa {:.6}, baseline {:.6}",
            mesa_point.preserve_kl, baseline_same.preserve_kl
        ),
    });
    Ok(Analysis {
        tuned_alpha,
        validation,
        mesa: mesa_point,
        baseline_same_alpha: baseline_same,
        baseline_matched,
        baseline_test_sweep,
        criteria,
        loss_ablation: None,
        rank_sweep: None,
    })
}

fn tuned_row(
    label: &str,
    val: &EvalContext,
    test: &EvalContext,
    dirs: &SteeringDirections,
    eval: &EvalConfig,
) -> Result<AblationRow> {
    let sweep = val.sweep(label, dirs, &eval.alphas)?;
    let tuned_alpha = tune_alpha(&sweep, eval);
    let (point, _) = test.evaluate(label, dirs, tuned_alpha)?;
    Ok(AblationRow {
        label: label.to_string(),
        tuned_alpha,
        point,
    })
}

/// Inputs shared by the ablation runs.
pub struct AblationInputs<'a> {
    pub model: &'a ModelParams,
    pub world: &'a World,
    pub cache: &'a SupervisionCache,
    pub supervision: &'a Corpus,
    pub loss: &'a LossConfig,
    pub rank: usize,
    pub seed: u64,
}

/// Trains one perturbation per loss setting (hall only, preserve only,
/// both), extracts directions and evaluates each at its tuned strength.
pub fn loss_ablation(
    inp: &AblationInputs,
    val: &EvalContext,
    test: &EvalContext,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let variants = [
        ("hall_only", 1.0, 0.0),
        ("preserve_only", 0.0, 1.0),
        ("both", inp.loss.hall_weight, inp.loss.lambda),
    ];
    let mut rows = Vec::new();
    for (label, hall_weight, lambda) in variants {
        let cfg = LossConfig {
            hall_weight,
            lambda,
            ..inp.loss.clone()
        };
        let (phi, _) = train_perturbation(inp.cache, inp.model, inp.world, inp.supervision, &cfg, inp.seed)?;
        let shifts = collect_shifts(inp.model, &phi, inp.world, inp.supervision)?;
        let dirs = extract_directions(
            &shifts,
            inp.rank,
            DirectionMethod::Mesa,
            inp.model.content_hash(),
            phi.content_hash(),
        )?;
        rows.push(tuned_row(label, val, test, &dirs, eval)?);
    }
    Ok(rows)
}

/// Evaluates ranks `1..=max_rank` of one direction set at their tuned strengths.
pub fn rank_sweep(
    dirs: &SteeringDirections,
    max_rank: usize,
    val: &EvalContext,
    test: &EvalContext,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    (1..=max_rank)
        .map(|r| tuned_row(&format!("rank_{r}"), val, test, &dirs.with_rank(r)?, eval))
        .collect()
}

/// Criterion 10 verdict for a finished ablation.
pub fn ablation_criterion(loss: &[AblationRow], ranks: &[AblationRow]) -> CriterionResult {
    let chair = |label: &str| {
        loss.iter()
            .find(|r| r.label == label)
            .map_or(f64::NAN, |r| r.point.report.steered.chair_s)
    };
    let (h, p, b) = (chair("hall_only"), chair("preserve_only"), chair("both"));
    CriterionResult {
        id: 10,
        name: "ablations run; both losses give the lowest CHAIR_S".into(),
        passed: loss.len() == 3 && ranks.len() == 5 && b < h && b < p,
        detail: format!(
            "CHAIR_S hall_only {h:.4}, preserve_only {p:.4}, both {b:.4}; ranks {}",
            ranks
                .iter()
                .map(|r| format!("{:.4}", r.point.report.steered.chair_s))
                .collect::<Vec<_>>()
                .join("/")
        ),
    }
}
