use std::path::Path;

use fairgen::baselines::Baseline;
use fairgen::cli::{self, RunConfig};
use fairgen::coffee::TrainConfig;
use fairgen::models::{read_checkpoint_meta, ModelConfig};

const TINY: &str = "model_preset = desk
emb_dim = 16
ffn_dim = 32
max_len = 16
mean_length = 10, 4
n_users = 16
n_items = 8
n_records = 96
vocab_size = 100
max_epochs = 2
samples_per_world = 2
sweep_lambdas = 0.5
";

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(cmd: &str, cfg: &str) -> i32 {
    cli::run(["fairgen", cmd, "--config", cfg])
}

#[test]
fn missing_config_is_a_usage_error() {
    assert_eq!(cli::run(["fairgen", "corpus"]), 2);
    assert_eq!(run("corpus", "/nonexistent/run.cfg"), 2);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(dir.path(), "no_such_key = 1\n");
    assert_eq!(run("corpus", &bad_key), 2);
    let bad_value = write_config(dir.path(), "eta = 1.5\n");
    assert_eq!(run("corpus", &bad_value), 2);
    let no_equals = write_config(dir.path(), "lambda\n");
    assert_eq!(run("corpus", &no_equals), 2);
}

#[test]
fn missing_artifacts_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(run("pretrain", &cfg), 4);
    assert_eq!(run("corpus", &cfg), 0);
    assert_eq!(run("eval", &cfg), 4);
    assert_eq!(run("finetune", &cfg), 4);
}

#[test]
fn raw_models_cannot_be_fine_tuned() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "baseline = raw\n");
    assert_eq!(run("corpus", &cfg), 0);
    assert_eq!(run("pretrain", &cfg), 0);
    assert_eq!(run("finetune", &cfg), 4);
    assert_eq!(run("eval", &cfg), 0);
}

#[test]
fn baselines_run_end_to_end() {
    for (baseline, artifact) in [("norm", "norm_removed.csv"), ("adv", "pretrain.ckpt"), ("nattr", "report.csv")] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &format!("baseline = {baseline}\n"));
        for cmd in ["corpus", "pretrain", "eval"] {
            assert_eq!(run(cmd, &cfg), 0, "{baseline} {cmd}");
        }
        assert!(dir.path().join("out").join(artifact).exists(), "{baseline}");
        let meta = read_checkpoint_meta(&dir.path().join("out/pretrain.ckpt")).unwrap();
        assert_eq!(meta.label, baseline);
    }
}

#[test]
fn sweep_writes_ratios_against_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for cmd in ["corpus", "pretrain", "sweep"] {
        assert_eq!(run(cmd, &cfg), 0, "{cmd}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    let base: Vec<f64> = rows[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(base[0], 0.0);
    assert_eq!(&base[3..], &[1.0, 1.0]);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n");
    assert_eq!(cli::run(["fairgen", "corpus", "--config", &cfg, "--seed", "2"]), 0);
    let a = std::fs::read(dir.path().join("data/train.jsonl")).unwrap();
    assert_eq!(cli::run(["fairgen", "corpus", "--config", &cfg]), 0);
    let b = std::fs::read(dir.path().join("data/train.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn baseline_configurations_resolve() {
    let (model, train) = (ModelConfig::desk_transformer(), TrainConfig::default());
    let check = |b: Baseline, token: bool, lambda: f64, lambda_d: f64| {
        let (m, t) = b.resolve(&model, &train);
        assert_eq!(m.use_attribute_token, token, "{b:?}");
        assert_eq!(t.lambda, lambda, "{b:?}");
        assert_eq!(t.lambda_d, lambda_d, "{b:?}");
    };
    check(Baseline::Raw, false, 0.0, 0.0);
    check(Baseline::Attr, true, 0.0, 0.0);
    check(Baseline::Adv, false, 0.0, train.lambda_d);
    check(Baseline::Coffee, true, train.lambda, train.lambda_d);
    assert!(Baseline::Norm.plan().norm && Baseline::Nattr.plan().nattr);
}

#[test]
fn config_paths_default_next_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Path::new(&write_config(dir.path(), ""))).unwrap();
    assert_eq!(cfg.data_dir, dir.path().join("data"));
    assert_eq!(cfg.pretrain_checkpoint(), dir.path().join("out/pretrain.ckpt"));
    assert_eq!(cfg.sweep_grid(), vec![0.0, 0.5]);
}
