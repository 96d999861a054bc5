// SPDX-License-Identifier: MIT OR Apache-2.0

//! One default-config pipeline run shared by every test that needs a trained
//! model.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mesa_lab::pipeline::{stages, Analysis, LabConfig, RunDir};

pub struct Lab {
    _tmp: tempfile::TempDir,
    pub dir: RunDir,
    pub analysis: Analysis,
    /// Wall time of stages I-IV, a steered generation and the analysis
    /// including ablations.
    pub pipeline_seconds: f64,
}

pub fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let dir = RunDir::new(tmp.path().join("run"), LabConfig::default()).expect("run dir");
        let start = Instant::now();
        stages::gen_corpus(&dir).expect("gen-corpus");
        stages::train_base(&dir).expect("train-base");
        stages::cache_supervision(&dir).expect("cache-supervision");
        stages::train_perturbation(&dir).expect("train-perturbation");
        stages::extract_directions(&dir).expect("extract-directions");
        stages::baseline_directions(&dir).expect("baseline-directions");
        let mesa = dir.path(stages::DIRECTIONS_MESA);
        stages::generate(&dir, "test", Some(&mesa)).expect("generate");
        let (_, analysis) = stages::analyze(&dir, true).expect("analyze");
        Lab {
            _tmp: tmp,
            dir,
            analysis,
            pipeline_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

/// Prints the criterion line outside the test harness capture, then asserts.
pub fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let line = format!(
        "[{}] criterion {id}: {name} | {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
}

/// Copies a run directory so a test can write into it without touching the
/// shared one.
pub fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    std::fs::create_dir_all(to).expect("mkdir");
    for entry in std::fs::read_dir(from).expect("read_dir") {
        let entry = entry.expect("entry");
        let target = to.join(entry.file_name());
        if entry.file_type().expect("file type").is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).expect("copy");
        }
    }
}
