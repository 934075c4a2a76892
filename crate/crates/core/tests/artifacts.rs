use fairgen::baselines::nattr_transform;
use fairgen::cli::Workspace;
use fairgen::corpus::{load_dir, save_dir, synthesize, Split, SynthesisSpec};
use fairgen::models::{load_checkpoint, save_checkpoint, Architecture, CheckpointMeta, GeneratorModel, ModelConfig};
use fairgen::numerics::Tape;

fn workspace() -> Workspace {
    let spec = SynthesisSpec {
        n_users: 12,
        n_items: 6,
        n_records: 60,
        max_len: 16,
        mean_length: vec![10.0, 4.0],
        ..SynthesisSpec::gender_default()
    };
    let ds = synthesize(&spec, 3).unwrap().split([0.8, 0.1, 0.1], 3).unwrap();
    Workspace::from_dataset(ds, SynthesisSpec::feature_lexicon(), 100).unwrap()
}

fn config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        max_len: 16,
        ..ModelConfig::desk(arch)
    }
}

fn logits(model: &GeneratorModel, ws: &Workspace) -> Vec<f64> {
    let ex = &ws.split(Split::Test, 16).unwrap()[0];
    let tape = Tape::inference();
    let out = model.forward(&tape, ex.context, &ex.input(), None).unwrap();
    out.log_probs.value().data().to_vec()
}

#[test]
fn corpus_survives_a_disk_roundtrip() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    save_dir(&ws.dataset, dir.path()).unwrap();
    let back = load_dir(dir.path(), ws.dataset.attribute_space()).unwrap();
    for split in [Split::Train, Split::Valid, Split::Test] {
        assert!(back.split_records(split).eq(ws.dataset.split_records(split)));
    }
}

#[test]
fn checkpoints_restore_identical_outputs() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::Transformer, Architecture::Recurrent] {
        let model = ws.build_model(&config(arch), 1).unwrap();
        let meta = CheckpointMeta {
            config_hash: model.config_hash(),
            vocab_hash: ws.vocab.hash(),
            step: 7,
            label: "attr".into(),
        };
        let path = dir.path().join(format!("{}.ckpt", arch.tag()));
        save_checkpoint(&path, &model, None, &meta).unwrap();
        let mut fresh = ws.build_model(&config(arch), 2).unwrap();
        assert_ne!(logits(&fresh, &ws), logits(&model, &ws));
        let read = load_checkpoint(&path, &mut fresh, &ws.vocab.hash(), None).unwrap();
        assert_eq!(read, meta);
        assert_eq!(logits(&fresh, &ws), logits(&model, &ws));
    }
}

#[test]
fn checkpoints_reject_a_different_vocabulary() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let model = ws.build_model(&config(Architecture::Transformer), 1).unwrap();
    let meta = CheckpointMeta {
        config_hash: model.config_hash(),
        vocab_hash: ws.vocab.hash(),
        step: 0,
        label: String::new(),
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None, &meta).unwrap();
    let mut other = model.clone();
    assert!(load_checkpoint(&path, &mut other, "not-the-vocab", None).is_err());
}

#[test]
fn nattr_only_touches_the_attribute_path() {
    let ws = workspace();
    for arch in [Architecture::Transformer, Architecture::Recurrent] {
        let model = ws.build_model(&config(arch), 4).unwrap();
        let view = nattr_transform(&model, 9).unwrap();
        let table = model.attribute_table().unwrap();
        for id in model.params.ids() {
            if id != table {
                assert_eq!(model.params.get(id), view.params.get(id));
            }
        }
        if arch == Architecture::Recurrent {
            assert!(view.params.get(table).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
