// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every artifact of a pipeline run reloads, re-serializes to the recorded
//! bytes, and rejects corruption.

use mesa_lab::artifact::Hash32;
use mesa_lab::model::ModelParams;
use mesa_lab::perturb::PerturbationParams;
use mesa_lab::pipeline::stages;
use mesa_lab::steer::SteeringDirections;
use mesa_lab::supervision::SupervisionCache;

#[test]
fn binary_artifacts_round_trip_byte_exact() {
    let lab = super::fixture::lab();
    let dir = &lab.dir;
    let check = |name: &str, reserialized: Vec<u8>| {
        let recorded = dir.require(name).unwrap();
        assert_eq!(Hash32::of(&reserialized), recorded, "{name}");
    };
    check(
        stages::MODEL,
        ModelParams::load(&dir.path(stages::MODEL)).unwrap().to_bytes(),
    );
    check(
        stages::CACHE,
        SupervisionCache::load(&dir.path(stages::CACHE)).unwrap().to_bytes(),
    );
    check(
        stages::PERTURBATION,
        PerturbationParams::load(&dir.path(stages::PERTURBATION))
            .unwrap()
            .to_bytes(),
    );
    for name in [stages::DIRECTIONS_MESA, stages::DIRECTIONS_BASELINE] {
        check(name, SteeringDirections::load(&dir.path(name)).unwrap().to_bytes());
    }
}

#[test]
fn corpora_reload_with_recorded_sizes() {
    let lab = super::fixture::lab();
    let data = &lab.dir.config.data;
    for (split, want) in [
        ("train", data.train),
        ("heldout", data.heldout),
        ("supervision", data.supervision),
        ("validation", data.validation),
        ("test", data.test),
    ] {
        assert_eq!(stages::load_corpus(&lab.dir, split).unwrap().len(), want, "{split}");
    }
}

#[test]
fn checkpoint_rejects_a_flipped_byte() {
    let lab = super::fixture::lab();
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(lab.dir.path(stages::MODEL)).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let path = tmp.path().join(stages::MODEL);
    std::fs::write(&path, &bytes).unwrap();
    assert!(ModelParams::load(&path).is_err());
}

#[test]
fn truncated_artifacts_are_rejected() {
    let lab = super::fixture::lab();
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        stages::MODEL,
        stages::CACHE,
        stages::PERTURBATION,
        stages::DIRECTIONS_MESA,
    ] {
        let bytes = std::fs::read(lab.dir.path(name)).unwrap();
        let path = tmp.path().join(name);
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let rejected = match name {
            stages::MODEL => ModelParams::load(&path).is_err(),
            stages::CACHE => SupervisionCache::load(&path).is_err(),
            stages::PERTURBATION => PerturbationParams::load(&path).is_err(),
            _ => SteeringDirections::load(&path).is_err(),
        };
        assert!(rejected, "{name} accepted a truncated file");
    }
}
