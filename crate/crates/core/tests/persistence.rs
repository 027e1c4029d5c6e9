use resadapt::checkpoint::Checkpoint;
use resadapt::data::{
    build_vocab, load_manifest, make_synthetic_task, read_text_corpus, write_manifest,
    write_text_corpus, ManifestEntry, SyntheticSpec, TokenMode, Vocab,
};
use resadapt::train::{self, BaseModel, SharingMode, TrainConfig};
use resadapt::{AdapterConfig, Error, ModelConfig};

fn spec(id: &str, shift: f64) -> SyntheticSpec {
    SyntheticSpec {
        id: id.into(),
        content_size: 8,
        min_len: 2,
        max_len: 5,
        shift,
        shift_seed: 4,
        train: 80,
        dev: 12,
        test: 12,
        ..SyntheticSpec::default()
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = make_synthetic_task(&spec("news", 0.0), 1).unwrap();
    for (name, c) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
        write_text_corpus(c, &dir.path().join(format!("news.{name}"))).unwrap();
    }
    assert_eq!(read_text_corpus(&dir.path().join("news.dev")).unwrap(), task.dev);
    let entry = ManifestEntry {
        id: "news".into(),
        kind: task.kind,
        train: "news.train".into(),
        dev: "news.dev".into(),
        test: "news.test".into(),
        size: 80,
    };
    let path = dir.path().join("manifest.txt");
    write_manifest(&path, &[entry.clone()]).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), vec![task]);

    write_manifest(&path, &[ManifestEntry { size: 81, ..entry }]).unwrap();
    assert!(load_manifest(&path).is_err());
}

#[test]
fn vocab_file_round_trip() {
    let v = build_vocab(["a b", "b c c"], TokenMode::Word, 100, &["<2x>".to_string()]);
    assert_eq!(Vocab::from_bytes(&v.to_bytes()).unwrap(), v);
}

/// A trained base and bundle survive disk round trips, and the reloaded
/// pair evaluates exactly like the in-memory one.
#[test]
fn base_and_bundle_files() {
    let base_task = make_synthetic_task(&spec("base", 0.0), 1).unwrap();
    let shifted = make_synthetic_task(&spec("shifted", 0.5), 2).unwrap();
    let vocab = build_vocab(
        base_task.train.pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]),
        TokenMode::Word,
        100,
        &[],
    );
    let cfg = ModelConfig {
        num_layers: 1,
        d_model: 8,
        d_ff: 16,
        num_heads: 2,
        vocab_size: vocab.len(),
        max_len: 16,
        dropout: 0.1,
    };
    let tc = TrainConfig {
        steps: 20,
        eval_every: 10,
        batch_tokens: 40,
        warmup: 5,
        ..TrainConfig::default()
    };
    let (base, _) = train::pretrain(
        &cfg,
        &vocab,
        &[base_task.encode(&vocab).unwrap()],
        SharingMode::Domain,
        &tc,
    )
    .unwrap();
    let task = base.encode_task(&shifted).unwrap();
    let (bundle, _) = train::adapt(&base, &task, AdapterConfig::new(2), &tc).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (bp, ap) = (dir.path().join("base.ckpt"), dir.path().join("bundle.ckpt"));
    base.to_checkpoint("base").save(&bp).unwrap();
    base.bundle_checkpoint(&bundle).save(&ap).unwrap();

    let loaded = BaseModel::from_checkpoint(&Checkpoint::load(&bp).unwrap()).unwrap();
    let loaded_bundle = loaded.load_bundle(&Checkpoint::load(&ap).unwrap()).unwrap();
    assert_eq!(loaded_bundle, bundle);
    assert_eq!(loaded.to_checkpoint("base").to_bytes(), std::fs::read(&bp).unwrap());

    let mut a = base.model.clone();
    a.inject(bundle).unwrap();
    let mut b = loaded.model.clone();
    b.inject(loaded_bundle).unwrap();
    let ra = train::evaluate(&a, Some("shifted"), &task.dev.pairs, true).unwrap();
    let rb = train::evaluate(&b, Some("shifted"), &task.dev.pairs, true).unwrap();
    assert_eq!(ra, rb);

    // a bundle file is not a base checkpoint
    assert!(BaseModel::from_checkpoint(&Checkpoint::load(&ap).unwrap()).is_err());
    // a task whose words the base never saw is a vocabulary mismatch
    let mut alien = shifted.clone();
    alien.train.pairs[0].0.push_str(" zzz");
    assert!(matches!(base.encode_task(&alien), Err(Error::VocabMismatch(_))));
}
