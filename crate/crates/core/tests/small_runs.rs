//! End-to-end behaviour of pretraining, probing and the bias classifiers on
//! corpora small enough to run in seconds.

use std::fs;

use taskbias_core::backbone::{embed_images, embed_texts, BackboneConfig, BackboneWeights};
use taskbias_core::classifier::{pseudo_label, BiasDirectionDataset};
use taskbias_core::pretrain::{captions, infonce_loss, load_checkpoint, train_backbone, PretrainConfig};
use taskbias_core::probe::{probe_ids, text_prefix_delta, zero_shot_classify, PrefixTable};
use taskbias_core::synth::{build_pairwise_dataset, generate_corpus, CorpusConfig, Image, Manifest, TaskId};
use taskbias_core::CoreError;

fn small_config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 16,
        backbone: BackboneConfig {
            depth: 1,
            embed_width: 32,
            heads: 2,
            shared_dim: 16,
            ..BackboneConfig::default()
        },
        ..Default::default()
    }
}

fn corpus(count: usize) -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(dir.path().join("corpus"), &CorpusConfig { count, ..Default::default() }).unwrap();
    (dir, m)
}

/// Mean contrastive loss over consecutive batches, computed from the
/// inference embeddings rather than the training tape.
fn mean_loss(w: &BackboneWeights, m: &Manifest, ids: &[u64], batch: usize) -> f64 {
    let caps = captions(m, None).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for chunk in ids.chunks(batch).filter(|c| c.len() >= 2) {
        let images: Vec<Image> = chunk.iter().map(|&id| m.image(id).unwrap()).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let texts: Vec<&str> = chunk.iter().map(|id| caps[id].as_str()).collect();
        let (img, _) = embed_images(w, &refs, None, false).unwrap();
        let txt = embed_texts(w, &texts).unwrap();
        total += infonce_loss(&img, &txt, w.logit_scale()).unwrap();
        n += 1;
    }
    total / n as f64
}

#[test]
fn one_epoch_checkpoint_round_trips_and_improves() {
    let (dir, m) = corpus(64);
    let cfg = small_config(1);
    let ck = dir.path().join("ck.tbvlm");
    let log = dir.path().join("metrics.jsonl");
    let out = train_backbone(&m, &cfg, &ck, &log, &mut |_| {}).unwrap();
    assert!(ck.exists());
    let back = load_checkpoint(&ck).unwrap();
    assert!(back.bit_eq(&out.weights));
    assert!(back.is_frozen());

    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    let keys: Vec<&String> = lines[0].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["epoch", "holdout_top1", "loss"]);

    let (train, _) = cfg.split(&m);
    let untrained = BackboneWeights::init(&cfg.backbone, cfg.seed).unwrap();
    let before = mean_loss(&untrained, &m, &train, cfg.batch_size);
    let after = mean_loss(&back, &m, &train, cfg.batch_size);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (dir, m) = corpus(48);
    let cfg = small_config(2);
    let run = |tag: &str| {
        let log = dir.path().join(format!("{tag}.jsonl"));
        let ck = dir.path().join(format!("{tag}.tbvlm"));
        train_backbone(&m, &cfg, &ck, &log, &mut |_| {}).unwrap();
        (fs::read(log).unwrap(), fs::read(ck).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn pretraining_rejects_bad_inputs() {
    let (dir, m) = corpus(12);
    let ck = dir.path().join("x");
    let log = dir.path().join("y");
    let too_big = PretrainConfig {
        batch_size: 16,
        ..small_config(1)
    };
    assert!(matches!(
        train_backbone(&m, &too_big, &ck, &log, &mut |_| {}),
        Err(CoreError::TooFewExamples { .. })
    ));
    let degenerate = PretrainConfig {
        batch_size: 1,
        ..small_config(1)
    };
    assert!(train_backbone(&m, &degenerate, &ck, &log, &mut |_| {}).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(CoreError::Io { .. })));
}

#[test]
fn zero_shot_degenerate_cases() {
    let (_dir, m) = corpus(2);
    let w = BackboneWeights::init(&small_config(1).backbone, 4).unwrap();
    let img = m.image(0).unwrap();
    let one = zero_shot_classify(&w, &img, &["ring".into()], "This is a photo of a", None).unwrap();
    assert_eq!(one, vec![("ring".to_string(), 1.0)]);
    let dup = zero_shot_classify(&w, &img, &["kiwi".into(), "kiwi".into()], "", None).unwrap();
    assert!((dup[0].1 - dup[1].1).abs() < 1e-9);
    assert!(zero_shot_classify(&w, &img, &[], "", None).is_err());
}

#[test]
fn identical_prefix_tables_give_zero_deltas() {
    let (_dir, m) = corpus(60);
    let w = BackboneWeights::init(&small_config(1).backbone, 4).unwrap();
    let ds = build_pairwise_dataset(&m.entries, TaskId::Action, TaskId::SceneText, 0.5, 3).unwrap();
    for table in [PrefixTable::uniform(), PrefixTable::directed()] {
        let r = text_prefix_delta(&w, &m, &ds, &table, &table).unwrap();
        assert_eq!(r.deltas.len(), 2);
        assert!(r.deltas.iter().all(|d| d.delta_pct == 0.0));
    }
    let r = text_prefix_delta(&w, &m, &ds, &PrefixTable::uniform(), &PrefixTable::directed()).unwrap();
    for d in &r.deltas {
        assert_eq!(d.delta_pct, d.rate_directed_pct - d.rate_uniform_pct);
    }
}

fn classifier_fixture() -> (tempfile::TempDir, BiasDirectionDataset) {
    let (dir, m) = corpus(160);
    let w = BackboneWeights::init(&small_config(1).backbone, 8).unwrap();
    let ids = m.ids();
    let scores = probe_ids(&w, &m, &ids, (TaskId::Object, TaskId::SceneText)).unwrap();
    let images: Vec<Image> = ids.iter().map(|&id| m.image(id).unwrap()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let (emb, _) = embed_images(&w, &refs, None, false).unwrap();
    let ds = BiasDirectionDataset::new(&scores, images.clone(), images, emb, 0.2, 5).unwrap();
    for (s, &l) in scores.iter().zip(&ds.labels) {
        assert_eq!(pseudo_label(s), l);
        assert_eq!(l == 1, s.chosen == TaskId::SceneText);
    }
    (dir, ds)
}

#[test]
fn pseudo_labels_follow_the_probe() {
    let (_dir, ds) = classifier_fixture();
    assert!(ds.test_majority() <= 0.55);
    let mut seen: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..ds.labels.len()).collect::<Vec<_>>());
}
