use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;

const V: usize = 12;

fn tiny(arch: Architecture) -> ModelConfig {
    ModelConfig {
        emb_dim: 8,
        ffn_dim: 12,
        hidden_dim: 10,
        attr_dim: 4,
        max_len: 10,
        ..ModelConfig::desk(arch)
    }
}

fn model(arch: Architecture, seed: u64) -> GeneratorModel {
    GeneratorModel::build_sized(&tiny(arch), V, 2, 3, 4, seed).unwrap()
}

fn ctx(attribute: usize) -> Context {
    Context {
        user: 1,
        item: 2,
        attribute,
    }
}

fn zero_all(m: &mut GeneratorModel) {
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let s = m.params.get(id).shape();
        m.params.set(id, Tensor::zeros(s[0], s[1])).unwrap();
    }
}

fn logits(m: &GeneratorModel, c: Context, input: &[usize]) -> Tensor {
    let tape = Tape::inference();
    m.forward(&tape, c, input, None).unwrap().logits.value().as_ref().clone()
}

const ARCHS: [Architecture; 2] = [Architecture::Transformer, Architecture::Recurrent];

#[test]
fn full_defaults() {
    let t = ModelConfig::full_transformer();
    assert_eq!((t.emb_dim, t.ffn_dim, t.layers, t.heads), (512, 2048, 2, 2));
    assert_eq!(t.dropout, 0.2);
    let r = ModelConfig::full_recurrent();
    assert_eq!((r.emb_dim, r.hidden_dim, r.attr_dim), (300, 400, 100));
    assert_eq!(r.dropout, 0.1);
}

#[test]
fn same_seed_same_weights() {
    for arch in ARCHS {
        let (a, b) = (model(arch, 5), model(arch, 5));
        for (id, p) in a.params.iter() {
            assert_eq!(p.value.data(), b.params.get(id).data());
        }
        assert!(model(arch, 6).params.get(ParamId(0)).data() != a.params.get(ParamId(0)).data());
    }
}

#[test]
fn init_within_scale() {
    let m = model(Architecture::Transformer, 1);
    let emb = m.params.get(m.emb.user);
    assert!(emb.data().iter().all(|v| v.abs() <= 0.1));
}

#[test]
fn zero_dims_rejected() {
    let cfg = ModelConfig {
        emb_dim: 0,
        ..tiny(Architecture::Transformer)
    };
    assert!(matches!(GeneratorModel::build_sized(&cfg, V, 2, 3, 4, 0), Err(Error::Config(_))));
}

#[test]
fn attribute_table_has_one_row_per_value() {
    let m = GeneratorModel::build_sized(&tiny(Architecture::Recurrent), V, 3, 3, 4, 0).unwrap();
    assert_eq!(m.params.get(m.attribute_table().unwrap()).shape(), [3, 4]);
}

#[test]
fn mask_examples() {
    let m = prefix_mask(3, 2);
    assert_eq!(m.row(3), vec![1, 1, 1, 1, 0]);
    assert_eq!(m.row(0), vec![1, 1, 1, 0, 0]);
    let only = prefix_mask(3, 0);
    assert!((0..3).all(|r| m.row(r)[..3] == [1, 1, 1] && only.row(r) == vec![1, 1, 1]));
    let big = prefix_mask(3, 6);
    for r in 3..9 {
        for c in 3..9 {
            assert_eq!(big.allowed(r, c), c <= r);
        }
    }
}

#[test]
fn output_shapes() {
    for arch in ARCHS {
        let m = model(arch, 0);
        let tape = Tape::inference();
        let out = m.forward(&tape, ctx(0), &[BOS_ID, 5, 6, 7], None).unwrap();
        assert_eq!(out.log_probs.shape(), [4, V]);
        assert_eq!(out.context_log_probs.shape(), [1, V]);
        assert_eq!(out.rating.shape(), [1, 1]);
        assert_eq!(out.user_embedding.shape(), [1, m.config.user_dim()]);
    }
}

#[test]
fn overlong_input_is_contract_error() {
    let m = model(Architecture::Transformer, 0);
    let tape = Tape::inference();
    let input = vec![4; 12];
    assert!(matches!(m.forward(&tape, ctx(0), &input, None), Err(Error::Contract(_))));
}

#[test]
fn zero_weights_give_uniform_rows() {
    for arch in ARCHS {
        let mut m = model(arch, 0);
        zero_all(&mut m);
        let tape = Tape::inference();
        let out = m.forward(&tape, ctx(1), &[BOS_ID, 4, 9], None).unwrap();
        let p = out.log_probs.value();
        assert!(p.data().iter().all(|v| (v.exp() - 1.0 / V as f64).abs() < 1e-15));
        let nll = nll_from_log_probs(out.log_probs, &[4, 9, EOS_ID]).unwrap().item().unwrap();
        assert!((nll - (V as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn one_hot_prediction_has_vanishing_nll() {
    let tape = Tape::new();
    let mut logits = Tensor::zeros(2, 4);
    logits.set(0, 1, 60.0);
    logits.set(1, 3, 60.0);
    let lp = tape.leaf(logits).log_softmax(crate::numerics::Axis::Cols).unwrap();
    assert!(nll_from_log_probs(lp, &[1, 3]).unwrap().item().unwrap() < 1e-20);
}

#[test]
fn rating_mse_example() {
    assert_eq!(rating_mse(&[3.0, 4.0], &[3.0, 2.0]).unwrap(), 2.0);
    let tape = Tape::new();
    let pred = tape.leaf(Tensor::row(vec![3.0, 4.0]));
    assert_eq!(pred.mse(&Tensor::row(vec![3.0, 2.0])).unwrap().item().unwrap(), 2.0);
}

#[test]
fn later_words_do_not_affect_earlier_outputs() {
    for arch in ARCHS {
        let mut m = model(arch, 3);
        let input = [BOS_ID, 5, 7];
        let before = logits(&m, ctx(0), &input);
        let mut w = m.params.get(m.emb.word).clone();
        for v in w.row_slice_mut(7) {
            *v += 0.5;
        }
        m.params.set(m.emb.word, w).unwrap();
        let after = logits(&m, ctx(0), &input);
        for r in 0..2 {
            assert_eq!(before.row_slice(r), after.row_slice(r), "{arch:?} row {r}");
        }
        assert!(before.row_slice(2) != after.row_slice(2));
    }
}

#[test]
fn counterfactual_identities() {
    for arch in ARCHS {
        let mut m = model(arch, 4);
        let input = [BOS_ID, 5, 6];
        let tape = Tape::inference();
        let same = m.counterfactual_forward(&tape, ctx(0), 0, &input).unwrap().logits.value();
        assert_eq!(same.as_ref(), &logits(&m, ctx(0), &input));
        assert!(logits(&m, ctx(0), &input) != logits(&m, ctx(1), &input));
        assert!(matches!(
            m.counterfactual_forward(&tape, ctx(0), 2, &input),
            Err(Error::Domain(_))
        ));

        let table = m.attribute_table().unwrap();
        let mut t = m.params.get(table).clone();
        let row0 = t.row_slice(0).to_vec();
        t.row_slice_mut(1).copy_from_slice(&row0);
        m.params.set(table, t).unwrap();
        assert_eq!(logits(&m, ctx(0), &input), logits(&m, ctx(1), &input));
    }
}

#[test]
fn incremental_decoder_matches_full_forward() {
    for arch in ARCHS {
        for masked in [false, true] {
            let mut m = model(arch, 9);
            m.mask_attribute = masked && arch == Architecture::Transformer;
            let input = [BOS_ID, 4, 8, 6, 11];
            let full = logits(&m, ctx(1), &input);
            let mut dec = m.decoder(ctx(1)).unwrap();
            for (t, &tok) in input.iter().enumerate() {
                let row = dec.step(tok).unwrap();
                for (a, b) in row.iter().zip(full.row_slice(t)) {
                    assert!((a - b).abs() < 1e-12, "{arch:?} masked={masked} t={t}");
                }
            }
        }
    }
}

#[test]
fn attribute_masking_hides_the_attribute_from_words() {
    let mut m = model(Architecture::Transformer, 2);
    m.mask_attribute = true;
    let input = [BOS_ID, 4, 5];
    assert_eq!(logits(&m, ctx(0), &input), logits(&m, ctx(1), &input));
}

#[test]
fn top_k_examples() {
    let logits = [0.1, 2.0, -1.0, 1.9];
    assert_eq!(top_k_pick(&logits, 1, 0.999).unwrap(), 1);
    let mut forced = vec![0.0; 6];
    forced[4] = 1e9;
    for u in [0.0, 0.5, 0.999_999] {
        assert_eq!(top_k_pick(&forced, 5, u).unwrap(), 4);
    }
    assert!(top_k_pick(&logits, 0, 0.5).is_err());
    assert!([1, 3].contains(&top_k_pick(&logits, 2, 0.7).unwrap()));
}

#[test]
fn greedy_sampling_follows_argmax() {
    let m = model(Architecture::Recurrent, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sample_with_log_prob(&m, ctx(0), 1, 6, &mut rng).unwrap();
    let mut dec = m.decoder(ctx(0)).unwrap();
    let mut prev = BOS_ID;
    for &tok in &s.tokens {
        let row = dec.step(prev).unwrap();
        let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(arg, tok);
        prev = tok;
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    for arch in ARCHS {
        let m = model(arch, 1);
        let run = |seed| sample(&m, ctx(1), 5, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(3), run(3));
        assert!(run(3).len() <= 10);
    }
}

#[test]
fn sampled_log_prob_matches_teacher_forcing() {
    for arch in ARCHS {
        let m = model(arch, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample_with_log_prob(&m, ctx(0), 5, 8, &mut rng).unwrap();
        let tape = Tape::inference();
        let out = m.forward(&tape, ctx(0), &s.input(), None).unwrap();
        let idx: Vec<_> = s.targets().into_iter().enumerate().collect();
        let lp = out.log_probs.pick(&idx).unwrap().sum().item().unwrap();
        assert!((lp - s.log_prob).abs() < 1e-10);
    }
}

fn fixture(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            context: Context {
                user: i % 3,
                item: i % 4,
                attribute: i % 2,
            },
            rating: 1.0 + (i % 5) as f64,
            words: (0..2 + i % 4).map(|t| 4 + (i + t) % 8).collect(),
        })
        .collect()
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let mut m = model(Architecture::Transformer, 0);
    let before = m.params.clone();
    let data = fixture(10);
    let opts = PretrainOptions {
        max_epochs: 0,
        ..Default::default()
    };
    let report = pretrain(&mut m, &data, &data, &opts).unwrap();
    assert!(report.curve.is_empty());
    for (id, p) in before.iter() {
        assert_eq!(p.value.data(), m.params.get(id).data());
    }
}

#[test]
fn pretraining_reduces_train_nll() {
    for arch in ARCHS {
        let mut m = model(arch, 2);
        let data = fixture(50);
        let w = LossWeights::default();
        let start = evaluate_losses(&m, &data, w, 16).unwrap().nll;
        let opts = PretrainOptions {
            max_epochs: 200,
            patience: 200,
            lr: 1e-3,
            ..Default::default()
        };
        let report = pretrain(&mut m, &data, &data, &opts).unwrap();
        let end = evaluate_losses(&m, &data, w, 16).unwrap().nll;
        assert!(end < start, "{arch:?}: {start} -> {end}");
        assert!(report.best_epoch > 0);
        for e in &report.curve {
            let b = e.valid;
            assert!((b.total - (b.nll + b.context + b.rating_mse)).abs() < 1e-9);
        }
    }
}

#[test]
fn early_stopping_keeps_best_epoch() {
    let mut m = model(Architecture::Recurrent, 2);
    let data = fixture(20);
    let opts = PretrainOptions {
        max_epochs: 40,
        patience: 2,
        lr: 5e-2,
        ..Default::default()
    };
    let report = pretrain(&mut m, &data, &data[..6], &opts).unwrap();
    let kept = evaluate_losses(&m, &data[..6], LossWeights::default(), 16).unwrap().total;
    assert!((kept - report.best_valid).abs() < 1e-9);
    assert!(report.curve.len() <= 40);
}

#[test]
fn checkpoint_round_trip_and_hash_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(Architecture::Transformer, 3);
    let d = crate::disentangle::Discriminator::build(8, 6, 2, 1).unwrap();
    let meta = CheckpointMeta {
        config_hash: m.config_hash(),
        vocab_hash: "abc".into(),
        step: 42,
        label: "attr".into(),
    };
    save_checkpoint(&path, &m, Some(&d), &meta).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..4], CHECKPOINT_MAGIC);

    let mut fresh = model(Architecture::Transformer, 99);
    let mut fresh_d = crate::disentangle::Discriminator::build(8, 6, 2, 7).unwrap();
    let got = load_checkpoint(&path, &mut fresh, "abc", Some(&mut fresh_d)).unwrap();
    assert_eq!(got, meta);
    for (id, p) in m.params.iter() {
        assert_eq!(p.value.data(), fresh.params.get(id).data());
    }
    for (id, p) in d.params.iter() {
        assert_eq!(p.value.data(), fresh_d.params.get(id).data());
    }

    assert!(matches!(load_checkpoint(&path, &mut fresh, "other", None), Err(Error::Checkpoint(_))));
    let mut other = GeneratorModel::build_sized(&tiny(Architecture::Transformer), V + 1, 2, 3, 4, 0).unwrap();
    assert!(matches!(load_checkpoint(&path, &mut other, "abc", None), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing"), &mut fresh, "abc", None),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn model_gradients_match_finite_differences() {
    use crate::numerics::uniform;
    for arch in ARCHS {
        let m = model(arch, 12);
        let data = fixture(3);
        let refs: Vec<&Example> = data.iter().collect();
        let loss_at = |mm: &GeneratorModel| {
            let tape = Tape::inference();
            batch_losses(mm, &tape, &refs, LossWeights::default(), None).unwrap().total.item().unwrap()
        };
        let tape = Tape::new();
        let l = batch_losses(&m, &tape, &refs, LossWeights::default(), None).unwrap();
        let grads = tape.backward(l.total).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs: Vec<(ParamId, Tensor)> = m
            .params
            .iter()
            .map(|(id, p)| (id, uniform(p.value.rows(), p.value.cols(), 1.0, &mut rng)))
            .collect();
        let analytic: f64 = dirs
            .iter()
            .map(|(id, d)| grads.param(*id).map_or(0.0, |g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()))
            .sum();
        let h = 1e-5;
        let shifted = |sign: f64| {
            let mut mm = m.clone();
            for (id, d) in &dirs {
                let mut t = mm.params.get(*id).clone();
                t.data_mut().iter_mut().zip(d.data()).for_each(|(v, dv)| *v += sign * h * dv);
                mm.params.set(*id, t).unwrap();
            }
            loss_at(&mm)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        assert!(rel < 1e-6, "{arch:?}: {analytic} vs {numeric}");
    }
}
