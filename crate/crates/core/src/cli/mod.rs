//! Subcommands over a shared run configuration.

mod config;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

pub use config::{parse_pairs, RunConfig, KEYS};

use crate::artifact::write_atomic;
use crate::baselines::{nattr_transform, norm_preprocess, Baseline, NormSpec};
use crate::coffee::{finetune, mix_seed, write_step_log, Decoding, FinetuneReport, TrainConfig};
use crate::corpus::{load_dir, load_lexicon, save_dir, synthesize, Dataset, IdIndex, Record, Split, SynthesisSpec, Vocabulary};
use crate::disentangle::{alternate_train, Adversary, Discriminator};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fmt_sig, EvalConfig, FairnessReport};
use crate::models::{
    load_checkpoint, pretrain, read_checkpoint_meta, save_checkpoint, CheckpointMeta, Example, GeneratorModel,
    ModelConfig, PretrainOptions, PretrainReport,
};
use crate::quality::{q_feat, q_len, QualityKind, QualityOracle};

pub const THREADS_ENV: &str = "FAIRGEN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fairgen", about = "Counterfactually fair explanation generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize and split the corpus.
    Corpus,
    /// Pretrain the configured baseline.
    Pretrain,
    /// Fairness fine-tuning of a pretrained checkpoint.
    Finetune,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Fine-tune and evaluate over the λ grid.
    Sweep,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Numeric(_) => 3,
        Error::MissingArtifact(_) | Error::NoAttributeTable(_) => 4,
        _ => 1,
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::Corpus => {
            let summary = cmd_corpus(&cfg)?;
            print!("{}", summary.to_csv());
        }
        Command::Pretrain => {
            let path = cmd_pretrain(&cfg)?;
            println!("checkpoint {}", path.display());
        }
        Command::Finetune => {
            let path = cmd_finetune(&cfg)?;
            println!("checkpoint {}", path.display());
        }
        Command::Eval => {
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_csv());
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg)?;
            print!("{}", sweep_csv(&rows));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub value: String,
    pub records: usize,
    pub mean_length: f64,
    pub mean_features: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub groups: Vec<GroupSummary>,
}

impl CorpusSummary {
    pub fn of(dataset: &Dataset, lexicon: &BTreeSet<String>) -> Self {
        let space = dataset.attribute_space();
        let groups = (0..space.len())
            .map(|a| {
                let idx = dataset.group(a);
                let n = idx.len().max(1) as f64;
                let recs = idx.iter().map(|&i| dataset.record(i));
                GroupSummary {
                    value: space.values[a].clone(),
                    records: idx.len(),
                    mean_length: recs.clone().map(|r| q_len(&r.explanation)).sum::<f64>() / n,
                    mean_features: recs.map(|r| q_feat(&r.explanation, lexicon)).sum::<f64>() / n,
                }
            })
            .collect();
        Self { groups }
    }

    /// Largest difference in mean explanation length between groups.
    pub fn length_gap(&self) -> f64 {
        let lens = self.groups.iter().filter(|g| g.records > 0).map(|g| g.mean_length);
        let (lo, hi) = lens.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,records,mean_length,mean_features\n");
        for g in &self.groups {
            let _ = writeln!(out, "{},{},{},{}", g.value, g.records, fmt_sig(g.mean_length), fmt_sig(g.mean_features));
        }
        out
    }
}

/// Dataset, vocabulary and encoded splits shared by the training commands.
pub struct Workspace {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub ids: IdIndex,
    pub lexicon: BTreeSet<String>,
}

impl Workspace {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        if !cfg.data_dir.join("train.jsonl").exists() {
            return Err(Error::MissingArtifact(cfg.data_dir.join("train.jsonl")));
        }
        let dataset = load_dir(&cfg.data_dir, cfg.attribute_space())?;
        let lexicon = match &cfg.lexicon {
            Some(p) => load_lexicon(p)?,
            None => SynthesisSpec::feature_lexicon(),
        };
        Self::from_dataset(dataset, lexicon, cfg.vocab_size)
    }

    pub fn from_dataset(dataset: Dataset, lexicon: BTreeSet<String>, vocab_size: usize) -> Result<Self> {
        let train: Vec<&[String]> = dataset.split_records(Split::Train).map(|r| r.explanation.as_slice()).collect();
        let vocab = Vocabulary::build(train, vocab_size)?.with_feature_lexicon(&lexicon);
        let ids = dataset.id_index();
        Ok(Self {
            dataset,
            vocab,
            ids,
            lexicon,
        })
    }

    pub fn encode<'a>(&self, records: impl IntoIterator<Item = &'a Record>, max_len: usize) -> Result<Vec<Example>> {
        let space = self.dataset.attribute_space();
        records
            .into_iter()
            .map(|r| Example::encode(r, &self.vocab, &self.ids, space, max_len))
            .collect()
    }

    pub fn split(&self, split: Split, max_len: usize) -> Result<Vec<Example>> {
        self.encode(self.dataset.split_records(split), max_len)
    }

    pub fn oracle(&self, kind: QualityKind) -> Result<QualityOracle> {
        QualityOracle::of_kind(kind, &self.lexicon)
    }

    pub fn build_model(&self, config: &ModelConfig, seed: u64) -> Result<GeneratorModel> {
        GeneratorModel::build(
            config,
            &self.vocab,
            self.dataset.attribute_space(),
            self.ids.n_users(),
            self.ids.n_items(),
            mix_seed(&[seed, 11]),
        )
    }
}

fn discriminator_for(cfg: &RunConfig, model: &GeneratorModel) -> Result<Discriminator> {
    Discriminator::build(model.config.user_dim(), cfg.disc_hidden, model.n_attributes, mix_seed(&[cfg.seed(), 13]))
}

pub fn cmd_corpus(cfg: &RunConfig) -> Result<CorpusSummary> {
    cfg.synthesis.validate()?;
    let dataset = synthesize(&cfg.synthesis, cfg.seed())?.split(cfg.split, cfg.seed())?;
    save_dir(&dataset, &cfg.data_dir)?;
    let lexicon = match &cfg.lexicon {
        Some(p) => load_lexicon(p)?,
        None => SynthesisSpec::feature_lexicon(),
    };
    let summary = CorpusSummary::of(&dataset, &lexicon);
    write_atomic(&cfg.data_dir.join("summary.csv"), summary.to_csv().as_bytes())?;
    info!("corpus length gap {}", fmt_sig(summary.length_gap()));
    Ok(summary)
}

fn curve_csv(report: &PretrainReport) -> String {
    let mut out = String::from(
        "epoch,train_nll,train_context,train_rating_mse,train_total,valid_nll,valid_context,valid_rating_mse,valid_total,discriminator\n",
    );
    for r in &report.curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt_sig(r.train.nll),
            fmt_sig(r.train.context),
            fmt_sig(r.train.rating_mse),
            fmt_sig(r.train.total),
            fmt_sig(r.valid.nll),
            fmt_sig(r.valid.context),
            fmt_sig(r.valid.rating_mse),
            fmt_sig(r.valid.total),
            r.discriminator.map(fmt_sig).unwrap_or_default()
        );
    }
    out
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let ws = Workspace::open(cfg)?;
    let (model_cfg, train_cfg) = cfg.baseline.resolve(&cfg.model, &cfg.train);
    let plan = cfg.baseline.plan();
    let train_records: Vec<Record> = if plan.norm {
        let input: Vec<Record> = ws.dataset.split_records(Split::Train).cloned().collect();
        let spec = NormSpec {
            oracle: ws.oracle(train_cfg.quality)?,
            threshold: cfg.norm_threshold,
        };
        let outcome = norm_preprocess(&input, ws.dataset.attribute_space(), &spec)?;
        write_atomic(&cfg.out_dir.join("norm_removed.csv"), outcome.manifest_csv(&input).as_bytes())?;
        outcome.records
    } else {
        ws.dataset.split_records(Split::Train).cloned().collect()
    };
    let train = ws.encode(&train_records, model_cfg.max_len)?;
    let valid = ws.split(Split::Valid, model_cfg.max_len)?;

    let mut model = ws.build_model(&model_cfg, cfg.seed())?;
    let mut adversary = if plan.adversarial && train_cfg.lambda_d > 0.0 {
        let disc = discriminator_for(cfg, &model)?;
        Some(Adversary::new(disc, train_cfg.lambda_d, cfg.schedule, cfg.disc_lr)?)
    } else {
        None
    };
    let mut start_step = 0;
    if let Some(resume) = &cfg.resume {
        let disc = adversary.as_mut().map(|a| &mut a.discriminator);
        start_step = load_checkpoint(resume, &mut model, &ws.vocab.hash(), disc)?.step;
    }
    let options = PretrainOptions {
        max_epochs: cfg.max_epochs,
        batch_size: train_cfg.batch_size,
        lr: train_cfg.pretrain_lr,
        patience: cfg.patience,
        seed: mix_seed(&[cfg.seed(), 12, start_step]),
        ..PretrainOptions::default()
    };
    let report = match adversary.as_mut() {
        Some(adv) => alternate_train(&mut model, adv, &train, &valid, &options)?,
        None => pretrain(&mut model, &train, &valid, &options)?,
    };
    write_atomic(&cfg.out_dir.join("pretrain_curve.csv"), curve_csv(&report).as_bytes())?;
    let path = cfg.pretrain_checkpoint();
    let meta = CheckpointMeta {
        config_hash: model.config_hash(),
        vocab_hash: ws.vocab.hash(),
        step: start_step + report.steps,
        label: cfg.baseline.tag().to_string(),
    };
    save_checkpoint(&path, &model, adversary.as_ref().map(|a| &a.discriminator), &meta)?;
    Ok(path)
}

/// Loads a checkpoint into a model rebuilt from the baseline recorded in it.
pub fn open_checkpoint(cfg: &RunConfig, ws: &Workspace, path: &Path) -> Result<(GeneratorModel, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let source = Baseline::parse(&meta.label)?;
    let (model_cfg, _) = source.resolve(&cfg.model, &cfg.train);
    let mut model = ws.build_model(&model_cfg, cfg.seed())?;
    let meta = load_checkpoint(path, &mut model, &ws.vocab.hash(), None)?;
    Ok((model, meta))
}

fn finetune_from(
    cfg: &RunConfig,
    ws: &Workspace,
    source: &Path,
    train_cfg: &TrainConfig,
) -> Result<(GeneratorModel, CheckpointMeta, FinetuneReport)> {
    let (mut model, meta) = open_checkpoint(cfg, ws, source)?;
    if !model.has_attribute_token() {
        return Err(Error::NoAttributeTable(source.to_path_buf()));
    }
    let train = ws.split(Split::Train, model.config.max_len)?;
    let report = finetune(&mut model, &train, &ws.oracle(train_cfg.quality)?, &ws.vocab, train_cfg)?;
    Ok((model, meta, report))
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<PathBuf> {
    let ws = Workspace::open(cfg)?;
    let source = cfg.checkpoint.clone().unwrap_or_else(|| cfg.pretrain_checkpoint());
    let (model, meta, report) = finetune_from(cfg, &ws, &source, &cfg.train)?;
    let mut log = Vec::new();
    write_step_log(&report.log, &mut log)?;
    write_atomic(&cfg.out_dir.join("finetune_steps.csv"), &log)?;
    let path = cfg.finetune_checkpoint();
    let out_meta = CheckpointMeta {
        config_hash: model.config_hash(),
        vocab_hash: ws.vocab.hash(),
        step: meta.step + report.steps,
        label: Baseline::Coffee.tag().to_string(),
    };
    save_checkpoint(&path, &model, None, &out_meta)?;
    Ok(path)
}

fn with_threads<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))
        })
        .transpose()?;
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn evaluate_model(cfg: &RunConfig, ws: &Workspace, model: &GeneratorModel, tag: &str) -> Result<FairnessReport> {
    let test = ws.split(Split::Test, model.config.max_len)?;
    let oracles = QualityKind::ALL
        .into_iter()
        .map(|k| Ok((k, ws.oracle(k)?)))
        .collect::<Result<Vec<_>>>()?;
    let eval = EvalConfig {
        samples_per_world: cfg.train.samples_per_world,
        seed: cfg.seed(),
        decoding: Decoding {
            top_k: cfg.train.top_k,
            max_len: cfg.train.max_decode_len,
        },
        model_tag: format!("{tag}-{}", model.config.architecture.tag()),
        dataset_tag: ws.dataset.attribute_space().name.clone(),
    };
    with_threads(|| evaluate(model, &test, &ws.vocab, &ws.dataset.attribute_space().values, &oracles, &eval))
}

pub fn write_report(report: &FairnessReport, dir: &Path, stem: &str) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), report.to_json()?.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}_lengths.csv")), report.histogram_csv().as_bytes())?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<FairnessReport> {
    let ws = Workspace::open(cfg)?;
    let path = cfg.checkpoint.clone().unwrap_or_else(|| match cfg.baseline {
        Baseline::Coffee => cfg.finetune_checkpoint(),
        _ => cfg.pretrain_checkpoint(),
    });
    let (mut model, _) = open_checkpoint(cfg, &ws, &path)?;
    if cfg.baseline == Baseline::Nattr {
        model = nattr_transform(&model, mix_seed(&[cfg.seed(), 14]))?;
    }
    let report = evaluate_model(cfg, &ws, &model, cfg.baseline.tag())?;
    write_report(&report, &cfg.out_dir, "report")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub ind_cf: f64,
    pub bleu1: f64,
    pub ind_cf_ratio: f64,
    pub bleu1_ratio: f64,
}

fn ratio(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        if x == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x / base
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,ind_cf,bleu1,ind_cf_ratio,bleu1_ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_sig(r.lambda),
            fmt_sig(r.ind_cf),
            fmt_sig(r.bleu1),
            fmt_sig(r.ind_cf_ratio),
            fmt_sig(r.bleu1_ratio)
        );
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let ws = Workspace::open(cfg)?;
    let source = cfg.checkpoint.clone().unwrap_or_else(|| cfg.pretrain_checkpoint());
    let mut raw = Vec::new();
    for lambda in cfg.sweep_grid() {
        let train_cfg = TrainConfig {
            lambda,
            ..cfg.train.clone()
        };
        let (model, _, _) = finetune_from(cfg, &ws, &source, &train_cfg)?;
        let report = evaluate_model(cfg, &ws, &model, &format!("coffee-l{}", fmt_sig(lambda)))?;
        let ind_cf = report
            .fairness_for(cfg.train.quality)
            .map(|f| f.ind_cf)
            .ok_or_else(|| Error::Contract("missing fairness row".into()))?;
        raw.push((lambda, ind_cf, report.generation.bleu1));
    }
    let (_, base_cf, base_bleu) = raw[0];
    let rows: Vec<SweepRow> = raw
        .into_iter()
        .map(|(lambda, ind_cf, bleu1)| SweepRow {
            lambda,
            ind_cf,
            bleu1,
            ind_cf_ratio: ratio(ind_cf, base_cf),
            bleu1_ratio: ratio(bleu1, base_bleu),
        })
        .collect();
    write_atomic(&cfg.out_dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}
