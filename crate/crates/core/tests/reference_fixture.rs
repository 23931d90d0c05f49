//! Guards the committed diversity-reference encoder fixture.
//!
//! The fixture is a deterministic artifact: retraining from scratch must
//! reproduce it byte for byte. The ignored writer test below is the only
//! sanctioned way to refresh it.

use std::fs;
use std::path::PathBuf;

use dppssl::evaluation;
use dppssl::training::train_reference_encoder;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join("reference_encoder.ckpt")
}

#[test]
#[ignore = "rewrites the committed fixture; run once after an intentional reference-trainer change"]
fn write_reference_encoder_fixture() {
    let bundle = train_reference_encoder().unwrap();
    bundle.save(&fixture_path()).unwrap();
}

#[test]
fn committed_fixture_matches_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let fresh_path = dir.path().join("fresh.ckpt");
    let bundle = train_reference_encoder().unwrap();
    bundle.save(&fresh_path).unwrap();
    let fresh = fs::read(&fresh_path).unwrap();
    let committed = fs::read(fixture_path()).unwrap();
    assert_eq!(
        committed, fresh,
        "committed reference fixture differs from a fresh deterministic retrain"
    );
}

#[test]
fn fixture_loads_and_embeds() {
    let corpus = dppssl::data::generate_corpus(&dppssl::data::GeneratorConfig::default()).unwrap();
    let embeddings = evaluation::reference_embeddings(&corpus).unwrap();
    assert_eq!(embeddings.len(), corpus.len());
    let dim = embeddings[0].len();
    assert!(dim > 0);
    assert!(embeddings.iter().all(|e| e.len() == dim));
    assert!(embeddings.iter().flatten().all(|v| v.is_finite()));
}
