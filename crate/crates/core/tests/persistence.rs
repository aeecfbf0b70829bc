mod common;

use common::*;
use veil::checkpoint::Checkpoint;

fn predictions(c: &Checkpoint, sample: &Sample) -> Vec<(Vec<usize>, Vec<u64>)> {
    sample
        .instances
        .iter()
        .map(|inst| {
            let rep = c.model.extract_representation(inst).unwrap();
            (
                c.model.predict(inst).unwrap(),
                rep.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn check(sample: Sample) {
    assert!(!sample.instances.is_empty() && sample.instances.len() <= 50);
    let (first, h1) = train_sample(&sample, 4);
    let (second, h2) = train_sample(&sample, 4);
    assert_eq!(first.to_bytes(), second.to_bytes());
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.veil");
    first.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first.to_bytes());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, first);
    assert_eq!(predictions(&back, &sample), predictions(&first, &sample));

    let (other, _) = train_sample(&sample, 5);
    assert_ne!(other.to_bytes(), first.to_bytes());
}

#[test]
fn tagger_checkpoints_are_reproducible_and_reload_exactly() {
    check(tagging_sample());
}

#[test]
fn classifier_checkpoints_are_reproducible_and_reload_exactly() {
    check(review_sample());
}

#[test]
fn sample_corpora_parse_cleanly() {
    let t = tagging_sample();
    assert!(t.instances.len() >= 40);
    assert!(t.labels.contains(&"NOUN".to_string()));
    let r = review_sample();
    assert_eq!(r.instances.len(), 50);
}
