//! Training on small synthetic corpora.

use amcrn::model::{load_checkpoint, save_checkpoint, Amcrn, AmcrnConfig};
use amcrn::train::*;

fn small_config(n_classes: usize) -> AmcrnConfig {
    AmcrnConfig {
        initial_channels: 16,
        mcb_channels: vec![16; 3],
        n_scales: 4,
        blstm_hidden: 8,
        pool_bottleneck: 8,
        embedding_dim: 32,
        n_classes,
        ..AmcrnConfig::default()
    }
}

fn corpus() -> Dataset {
    make_toy_dataset(&ToySpeakerSpec {
        n_speakers: 4,
        utterances_per_speaker: 6,
        utterance_seconds: 1.5,
        seed: 0,
    })
    .unwrap()
}

#[test]
fn loss_decreases_on_four_speakers() {
    let ds = corpus();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        crop_seconds: 1.0,
        val_fraction: 0.15,
        augment_copies: 0,
        ..TrainConfig::default()
    };
    let out = train(Amcrn::new(small_config(4), 0).unwrap(), &ds, &cfg).unwrap();
    let h = &out.history;
    assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
    assert!(h.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    assert!(h.iter().all(|r| h[out.best_epoch].val_loss <= r.val_loss));
}

#[test]
fn checkpoint_reproduces_validation_loss() {
    let ds = corpus();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        crop_seconds: 1.0,
        val_fraction: 0.15,
        augment_copies: 1,
        ..TrainConfig::default()
    };
    let out = train(Amcrn::new(small_config(4), 1).unwrap(), &ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&out.best, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let a = validation_loss(&out.best, &ds, 1.0, 8).unwrap();
    let b = validation_loss(&back, &ds, 1.0, 8).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn too_few_classes_is_a_config_error() {
    let ds = corpus();
    let err = train(Amcrn::new(small_config(2), 0).unwrap(), &ds, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, amcrn::Error::Config(_)));
}

#[test]
fn directory_corpus_matches_memory_corpus() {
    let ds = make_toy_dataset(&ToySpeakerSpec {
        n_speakers: 2,
        utterances_per_speaker: 2,
        utterance_seconds: 0.5,
        seed: 3,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = Dataset::from_dir(dir.path()).unwrap();
    assert_eq!(back.speakers, ds.speakers);
    assert_eq!(back.items.len(), ds.items.len());
    for (a, b) in back.items.iter().zip(&ds.items) {
        assert_eq!((&a.id, a.speaker), (&b.id, b.speaker));
        assert_eq!(a.audio.len(), b.audio.len());
    }
}
