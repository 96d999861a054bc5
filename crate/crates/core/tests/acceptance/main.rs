// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria. Every criterion test writes exactly one `[PASS]` or
//! `[FAIL]` line to stderr and then asserts.

mod cli;
mod fixture;
mod formats;

use std::time::Instant;

use mesa_lab::analyze::chair_from_captions;
use mesa_lab::artifact::{rng_for, Hash32};
use mesa_lab::model::{generate_batch, DecodeStrategy, GenerationRequest};
use mesa_lab::perturb::PerturbationParams;
use mesa_lab::pipeline::experiment::split_requests;
use mesa_lab::pipeline::{stages, LabConfig, RunDir};
use mesa_lab::steer::{extract_directions, intervene, DirectionMethod, ShiftSet};
use mesa_lab::tensor::Matrix;
use mesa_lab::world::{Scene, TokenId, World, WorldConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use fixture::{lab, report};

/// `(caption, scene objects, [sentences, hallucinated sentences, mentioned,
/// hallucinated objects, scene objects, recalled])`, counted by hand.
const CHAIR_CASES: [(&str, &[&str], [usize; 6]); 20] = [
    ("a table .", &["table"], [1, 0, 1, 0, 1, 1]),
    ("a chair .", &["table"], [1, 1, 1, 1, 1, 0]),
    ("a table and a chair .", &["table"], [1, 1, 2, 1, 1, 1]),
    ("a table and a chair .", &["table", "chair"], [1, 0, 2, 0, 2, 2]),
    ("a dog .", &["dog", "person"], [1, 0, 1, 0, 2, 1]),
    ("a dog and a person and a fork .", &["dog"], [1, 1, 3, 2, 1, 1]),
    ("", &["table"], [0, 0, 0, 0, 1, 0]),
    ("a table", &["table"], [1, 0, 1, 0, 1, 1]),
    ("a table . a chair .", &["table"], [2, 1, 2, 1, 1, 1]),
    ("a table and a table .", &["table"], [1, 0, 1, 0, 1, 1]),
    ("a chair and a chair .", &["table"], [1, 1, 1, 1, 1, 0]),
    ("a bed and a pillow .", &["bed", "pillow", "car"], [1, 0, 2, 0, 3, 2]),
    ("a car and a road .", &["boat", "water"], [1, 1, 2, 2, 2, 0]),
    ("a .", &["cup"], [1, 0, 0, 0, 1, 0]),
    (". .", &["cup"], [0, 0, 0, 0, 1, 0]),
    ("a fork . a knife . a fork .", &["fork"], [3, 1, 2, 1, 1, 1]),
    ("a boat and a water", &["boat", "water", "car"], [1, 0, 2, 0, 3, 2]),
    (
        "a cup and a bottle and a bowl .",
        &["cup", "bottle", "bowl"],
        [1, 0, 3, 0, 3, 3],
    ),
    ("a knife . a pillow", &["fork"], [2, 2, 2, 2, 1, 0]),
    ("a table and a dog . a dog .", &["dog", "table"], [2, 0, 2, 0, 2, 2]),
];

#[test]
fn criterion_01_chair_matches_hand_counts() {
    let start = Instant::now();
    let world = World::new(WorldConfig::default()).unwrap();
    let vocab = world.vocab();
    let class = |name: &str| vocab.object_class(vocab.id(name).unwrap()).unwrap();
    let mut captions: Vec<Vec<TokenId>> = Vec::new();
    let mut scenes = Vec::new();
    let mut mismatches = Vec::new();
    let mut totals = [0usize; 6];
    for (i, (text, objects, want)) in CHAIR_CASES.iter().enumerate() {
        let caption: Vec<TokenId> = text.split_whitespace().map(|t| vocab.id(t).unwrap()).collect();
        let scene = Scene {
            seed: i as u64,
            objects: objects.iter().map(|o| class(o)).collect(),
            cells: (0..objects.len()).collect(),
        };
        let r = chair_from_captions(&[&caption], std::slice::from_ref(&scene), vocab).unwrap();
        let got = [
            r.sentences,
            r.hallucinated_sentences,
            r.mentioned_objects,
            r.hallucinated_objects,
            r.scene_objects,
            r.recalled_objects,
        ];
        if &got != want {
            mismatches.push(format!("case {i} {text:?}: got {got:?}, want {want:?}"));
        }
        totals.iter_mut().zip(want).for_each(|(t, w)| *t += w);
        captions.push(caption);
        scenes.push(scene);
    }
    let refs: Vec<&[TokenId]> = captions.iter().map(Vec::as_slice).collect();
    let all = chair_from_captions(&refs, &scenes, vocab).unwrap();
    let aggregate = [
        all.sentences,
        all.hallucinated_sentences,
        all.mentioned_objects,
        all.hallucinated_objects,
        all.scene_objects,
        all.recalled_objects,
    ];
    if aggregate != totals {
        mismatches.push(format!("aggregate: got {aggregate:?}, want {totals:?}"));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "CHAIR matches hand counts",
        mismatches.is_empty() && secs < 1.0,
        &format!(
            "{} pairs, {} mismatches {:?}, {secs:.3}s",
            CHAIR_CASES.len(),
            mismatches.len(),
            mismatches
        ),
    );
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let s = stages::gradcheck_battery(24, 20240901).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let per_objective = |name: &str| {
        s.reports
            .iter()
            .filter(|r| r.skipped.is_none() && serde_json::to_value(r.objective).unwrap() == name)
            .count()
    };
    let counts = [per_objective("hall"), per_objective("preserve"), per_objective("total")];
    report(
        2,
        "analytic gradients match central differences",
        counts.iter().all(|&c| c >= 20) && s.max_relative_error < 1e-4 && secs < 30.0,
        &format!(
            "checked hall/preserve/total {counts:?}, skipped {}, max relative error {:.2e}, {secs:.1}s",
            s.skipped, s.max_relative_error
        ),
    );
}

fn oracle_components(x: &Matrix, rank: usize) -> Vec<Vec<f64>> {
    let (n, d) = x.shape();
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order[..rank]
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect()
}

#[test]
fn criterion_03_pca_matches_eigendecomposition() {
    let start = Instant::now();
    let mut rng = rng_for(3, "acceptance/pca");
    let mut worst_cos: f64 = 1.0;
    let mut sign_violations = 0;
    let mut checked = 0;
    for _ in 0..50 {
        let d = rng.gen_range(2..=16usize);
        let n = rng.gen_range(40..=80usize);
        let rank = d.min(3);
        let mut layers = Vec::new();
        for _ in 0..2 {
            // Orthonormal principal axes with well-separated spreads.
            let mut axes: Vec<Vec<f64>> = Vec::new();
            while axes.len() < rank {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                for a in &axes {
                    let p: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
                }
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nv > 1e-6 {
                    axes.push(v.iter().map(|x| x / nv).collect());
                }
            }
            let spreads = [4.0, 2.0, 1.0];
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = Matrix::zeros(0, d);
            for _ in 0..n {
                let mut row = mean.clone();
                for (a, s) in axes.iter().zip(spreads) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row.iter_mut().zip(a).for_each(|(r, v)| *r += s * z * v);
                }
                for r in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *r += 0.1 * e;
                }
                x.push_row(&row);
            }
            layers.push(x);
        }
        let shifts = ShiftSet { layers };
        let dirs =
            extract_directions(&shifts, rank, DirectionMethod::Mesa, Hash32::of(b"m"), Hash32::of(b"p")).unwrap();
        for (l, x) in shifts.layers.iter().enumerate() {
            let oracle = oracle_components(x, rank);
            let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n as f64).collect();
            for (got, want) in dirs.components[l].iter().zip(&oracle) {
                let cos: f64 = got.iter().zip(want).map(|(a, b)| a * b).sum::<f64>().abs();
                worst_cos = worst_cos.min(cos);
                let along: f64 = got.iter().zip(&mean).map(|(a, b)| a * b).sum();
                sign_violations += (along < 0.0) as usize;
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "principal directions match an eigendecomposition oracle",
        worst_cos > 0.999 && sign_violations == 0 && secs < 10.0,
        &format!(
            "50 sets, {checked} components, min |cos| {worst_cos:.6}, sign violations {sign_violations}, {secs:.2}s"
        ),
    );
}

#[test]
fn criterion_04_zero_strength_and_zero_perturbation_are_identity() {
    let lab = lab();
    let dir = &lab.dir;
    let world = stages::load_world(dir).unwrap();
    let model = stages::load_model(dir).unwrap();
    let mesa = stages::load_directions(dir, "mesa").unwrap();
    let mut corpus = stages::load_corpus(dir, "test").unwrap();
    corpus.records.truncate(100);
    let (requests, _) = split_requests(&model, &world, &corpus).unwrap();
    let phi = PerturbationParams::new(
        model.config.d_model,
        model.config.d_model,
        1.0,
        &mut rng_for(4, "acceptance/phi"),
    )
    .unwrap();
    let perturbed: Vec<GenerationRequest> = requests
        .iter()
        .map(|r| {
            let mut visual = r.visual.clone();
            visual.add_assign(&phi.compute_delta(&r.visual).unwrap());
            GenerationRequest { visual, ..r.clone() }
        })
        .collect();
    let max_new = dir.config.eval.max_new_tokens;
    let scope = dir.config.steer.scope;
    let mut differing = Vec::new();
    let strategies = DecodeStrategy::all(dir.config.seed);
    for s in &strategies {
        let vanilla = generate_batch(&model, &requests, s, max_new, None, false).unwrap();
        let steered = intervene(&model, &mesa, &requests, 0.0, s, max_new, scope).unwrap();
        let zero_delta = generate_batch(&model, &perturbed, s, max_new, None, false).unwrap();
        let hashes = |t: &[mesa_lab::model::GenerationTrace]| t.iter().map(|t| t.content_hash()).collect::<Vec<_>>();
        let base = hashes(&vanilla);
        let a = hashes(&steered).iter().zip(&base).filter(|(x, y)| x != y).count();
        let b = hashes(&zero_delta).iter().zip(&base).filter(|(x, y)| x != y).count();
        if a + b > 0 {
            differing.push(format!("{}: alpha=0 {a}, delta=0 {b}", s.name()));
        }
    }
    report(
        4,
        "zero strength and zero perturbation reproduce vanilla decoding",
        differing.is_empty(),
        &format!(
            "{} samples x {} strategies, differing traces {:?}",
            requests.len(),
            strategies.len(),
            differing
        ),
    );
}

fn pipeline_criterion(id: u32) {
    let lab = lab();
    let c = lab
        .analysis
        .criteria
        .iter()
        .find(|c| c.id == id)
        .unwrap_or_else(|| panic!("analysis has no criterion {id}"));
    report(id, &c.name, c.passed, &c.detail);
}

#[test]
fn criterion_05_end_to_end_reduction() {
    let lab = lab();
    let c = lab.analysis.criteria.iter().find(|c| c.id == 5).expect("criterion 5");
    let test_scenes = stages::load_corpus(&lab.dir, "test").unwrap().len();
    let fast = lab.pipeline_seconds < 600.0;
    report(
        5,
        &c.name,
        c.passed && fast && test_scenes >= 200,
        &format!(
            "{} | {test_scenes} test scenes, pipeline {:.0}s",
            c.detail, lab.pipeline_seconds
        ),
    );
}

#[test]
fn criterion_06_baseline_entangles_length_and_zipf() {
    pipeline_criterion(6);
}

#[test]
fn criterion_07_eos_margin_preserved() {
    pipeline_criterion(7);
}

#[test]
fn criterion_08_preserve_subset_kl_below_baseline() {
    pipeline_criterion(8);
}

#[test]
fn criterion_09_double_run_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path(), LabConfig::default()).unwrap();
    let r = stages::repro_check(&dir).unwrap();
    report(
        9,
        "double run yields identical artifact hashes",
        r.identical() && r.artifacts > 0,
        &format!("{} artifacts compared, mismatches {:?}", r.artifacts, r.mismatches),
    );
}

#[test]
fn criterion_10_ablations() {
    pipeline_criterion(10);
}
