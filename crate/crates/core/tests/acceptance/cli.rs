// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exit codes and flag handling of the command-line front end.

use mesa_lab::pipeline::cli::main_with;
use mesa_lab::pipeline::{stages, LabConfig, RunDir};

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("mesa").chain(args.iter().copied()))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["gen-corpus", "--no-such-flag"]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "--rank", "9", "gen-corpus"]), 2);
    assert_eq!(run(&["--out", out, "--decode", "beam", "gen-corpus"]), 2);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"not a number\"\n").unwrap();
    assert_eq!(run(&["--out", out, "--config", cfg.to_str().unwrap(), "gen-corpus"]), 2);
}

#[test]
fn missing_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--out", tmp.path().to_str().unwrap(), "train-base"]), 2);
}

#[test]
fn modified_input_is_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "gen-corpus"]), 0);
    let corpus = tmp.path().join("corpus_train.jsonl");
    let mut bytes = std::fs::read(&corpus).unwrap();
    bytes.push(b'\n');
    std::fs::write(&corpus, bytes).unwrap();
    assert_eq!(run(&["--out", out, "train-base"]), 3);
}

#[test]
fn zero_alpha_generation_matches_vanilla() {
    let lab = super::fixture::lab();
    let tmp = tempfile::tempdir().unwrap();
    super::fixture::copy_dir(&lab.dir.root, tmp.path());
    let out = tmp.path().to_str().unwrap();
    let mesa = tmp.path().join(stages::DIRECTIONS_MESA);
    let mesa = mesa.to_str().unwrap();
    assert_eq!(
        run(&["--out", out, "--alpha", "0", "generate", "--directions", mesa]),
        0
    );

    let mut cfg = LabConfig::load(&tmp.path().join("config.toml")).unwrap();
    assert_eq!(cfg.eval.alpha, 0.0);
    cfg.eval.alpha = 0.0;
    let dir = RunDir::new(tmp.path(), cfg).unwrap();
    let (_, vanilla) = stages::generate(&dir, "test", None).unwrap();
    let (_, steered) = stages::generate(&dir, "test", Some(std::path::Path::new(mesa))).unwrap();
    assert_eq!(vanilla.trace_hashes, steered.trace_hashes);
    assert_eq!(vanilla.samples, steered.samples);
}
