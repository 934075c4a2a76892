use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::Baseline;
use crate::coffee::TrainConfig;
use crate::corpus::{AttributeSpace, SynthesisSpec};
use crate::disentangle::{AlternationSchedule, Granularity};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::quality::QualityKind;

/// Everything a subcommand needs, resolved from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub baseline: Baseline,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub vocab_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub schedule: AlternationSchedule,
    pub disc_hidden: usize,
    pub disc_lr: f64,
    pub norm_threshold: f64,
    pub sweep_lambdas: Vec<f64>,
    pub synthesis: SynthesisSpec,
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::full_transformer(),
            baseline: Baseline::Coffee,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            lexicon: None,
            checkpoint: None,
            resume: None,
            vocab_size: 20_000,
            max_epochs: 100,
            patience: 5,
            schedule: AlternationSchedule::default(),
            disc_hidden: 64,
            disc_lr: 1e-3,
            norm_threshold: 0.1,
            sweep_lambdas: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            synthesis: SynthesisSpec::gender_default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

/// Recognized keys, in the order they are documented.
pub const KEYS: &[&str] = &[
    "architecture",
    "model_preset",
    "emb_dim",
    "ffn_dim",
    "layers",
    "heads",
    "hidden_dim",
    "attr_dim",
    "dropout",
    "max_len",
    "init_scale",
    "baseline",
    "quality",
    "seed",
    "lambda",
    "eta",
    "samples_per_world",
    "lambda_d",
    "pretrain_lr",
    "finetune_lr",
    "batch_size",
    "top_k",
    "max_decode_len",
    "finetune_epochs",
    "max_epochs",
    "patience",
    "generator_units",
    "discriminator_units",
    "alternation",
    "disc_hidden",
    "disc_lr",
    "norm_threshold",
    "sweep_lambdas",
    "vocab_size",
    "data_dir",
    "out_dir",
    "lexicon",
    "checkpoint",
    "resume",
    "n_users",
    "n_items",
    "n_records",
    "attribute_name",
    "attribute_values",
    "attribute_probabilities",
    "mean_length",
    "mean_features",
    "rating_noise",
    "split",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// `key = value` pairs; `#` starts a comment; later keys override earlier ones.
pub fn parse_pairs(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_ascii_lowercase();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("unknown key {key:?}"),
            });
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_pairs(&parse_pairs(&text, path)?, base)
    }

    /// Builds a config from parsed pairs; relative paths resolve against `base`.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);

        let arch = get("architecture").map(Architecture::parse).transpose()?.unwrap_or(Architecture::Transformer);
        c.model = match get("model_preset").unwrap_or("full") {
            "full" => match arch {
                Architecture::Transformer => ModelConfig::full_transformer(),
                Architecture::Recurrent => ModelConfig::full_recurrent(),
            },
            "desk" => ModelConfig::desk(arch),
            other => return Err(Error::Config(format!("unknown model_preset {other:?}; expected full|desk"))),
        };
        let path = |raw: &str| {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        for (key, raw) in pairs {
            let raw = raw.as_str();
            let key = key.as_str();
            match key {
                "architecture" | "model_preset" => {}
                "emb_dim" => c.model.emb_dim = parse_value(key, raw)?,
                "ffn_dim" => c.model.ffn_dim = parse_value(key, raw)?,
                "layers" => c.model.layers = parse_value(key, raw)?,
                "heads" => c.model.heads = parse_value(key, raw)?,
                "hidden_dim" => c.model.hidden_dim = parse_value(key, raw)?,
                "attr_dim" => c.model.attr_dim = parse_value(key, raw)?,
                "dropout" => c.model.dropout = parse_value(key, raw)?,
                "max_len" => {
                    c.model.max_len = parse_value(key, raw)?;
                    c.train.max_decode_len = c.model.max_len;
                    c.synthesis.max_len = c.model.max_len;
                }
                "init_scale" => c.model.init_scale = parse_value(key, raw)?,
                "baseline" => c.baseline = Baseline::parse(raw)?,
                "quality" => c.train.quality = QualityKind::parse(raw)?,
                "seed" => c.train.seed = parse_value(key, raw)?,
                "lambda" => c.train.lambda = parse_value(key, raw)?,
                "eta" => c.train.eta = parse_value(key, raw)?,
                "samples_per_world" => c.train.samples_per_world = parse_value(key, raw)?,
                "lambda_d" => c.train.lambda_d = parse_value(key, raw)?,
                "pretrain_lr" => c.train.pretrain_lr = parse_value(key, raw)?,
                "finetune_lr" => c.train.finetune_lr = parse_value(key, raw)?,
                "batch_size" => c.train.batch_size = parse_value(key, raw)?,
                "top_k" => c.train.top_k = parse_value(key, raw)?,
                "finetune_epochs" => c.train.finetune_epochs = parse_value(key, raw)?,
                "max_decode_len" => {}
                "max_epochs" => c.max_epochs = parse_value(key, raw)?,
                "patience" => c.patience = parse_value(key, raw)?,
                "generator_units" => c.schedule.generator_units = parse_value(key, raw)?,
                "discriminator_units" => c.schedule.discriminator_units = parse_value(key, raw)?,
                "alternation" => {
                    c.schedule.granularity = match raw {
                        "batch" => Granularity::Batch,
                        "epoch" => Granularity::Epoch,
                        _ => return Err(Error::Config(format!("alternation must be batch|epoch, got {raw:?}"))),
                    }
                }
                "disc_hidden" => c.disc_hidden = parse_value(key, raw)?,
                "disc_lr" => c.disc_lr = parse_value(key, raw)?,
                "norm_threshold" => c.norm_threshold = parse_value(key, raw)?,
                "sweep_lambdas" => c.sweep_lambdas = parse_list(key, raw)?,
                "vocab_size" => c.vocab_size = parse_value(key, raw)?,
                "data_dir" => c.data_dir = path(raw),
                "out_dir" => c.out_dir = path(raw),
                "lexicon" => c.lexicon = Some(path(raw)),
                "checkpoint" => c.checkpoint = Some(path(raw)),
                "resume" => c.resume = Some(path(raw)),
                "n_users" => c.synthesis.n_users = parse_value(key, raw)?,
                "n_items" => c.synthesis.n_items = parse_value(key, raw)?,
                "n_records" => c.synthesis.n_records = parse_value(key, raw)?,
                "attribute_name" => c.synthesis.attribute_space.name = raw.to_string(),
                "attribute_values" => {
                    let values = parse_list::<String>(key, raw)?;
                    c.synthesis.attribute_space = AttributeSpace::new(c.synthesis.attribute_space.name.clone(), values)?;
                }
                "attribute_probabilities" => c.synthesis.probabilities = parse_list(key, raw)?,
                "mean_length" => c.synthesis.mean_length = parse_list(key, raw)?,
                "mean_features" => c.synthesis.mean_features = parse_list(key, raw)?,
                "rating_noise" => c.synthesis.rating_noise = parse_value(key, raw)?,
                "split" => {
                    let v: Vec<f64> = parse_list(key, raw)?;
                    c.split = v
                        .try_into()
                        .map_err(|_| Error::Config("split needs three comma-separated ratios".into()))?;
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        if let Some(raw) = get("max_decode_len") {
            c.train.max_decode_len = parse_value("max_decode_len", raw)?;
        }
        if !pairs.contains_key("data_dir") {
            c.data_dir = base.join("data");
        }
        if !pairs.contains_key("out_dir") {
            c.out_dir = base.join("out");
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        if self.vocab_size <= 4 {
            return Err(Error::Config("vocab_size must exceed the 4 reserved tokens".into()));
        }
        if self.disc_hidden == 0 || !(self.disc_lr > 0.0) {
            return Err(Error::Config("discriminator needs a positive width and learning rate".into()));
        }
        if !(self.norm_threshold > 0.0 && self.norm_threshold < 1.0) {
            return Err(Error::Config("norm_threshold must be in (0, 1)".into()));
        }
        if self.sweep_lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("sweep_lambdas must be finite and >= 0".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split ratios must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn attribute_space(&self) -> &AttributeSpace {
        &self.synthesis.attribute_space
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.out_dir.join("pretrain.ckpt")
    }

    pub fn finetune_checkpoint(&self) -> PathBuf {
        self.out_dir.join("finetune.ckpt")
    }

    /// Swept λ values, sorted, deduplicated and always including 0.
    pub fn sweep_grid(&self) -> Vec<f64> {
        let mut grid = self.sweep_lambdas.clone();
        grid.push(0.0);
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<RunConfig> {
        RunConfig::from_pairs(&parse_pairs(text, Path::new("t.cfg"))?, Path::new("/base"))
    }

    #[test]
    fn defaults_match_reference_values() {
        let c = load("").unwrap();
        assert_eq!(c.vocab_size, 20_000);
        assert_eq!(c.model.max_len, 128);
        assert_eq!((c.train.top_k, c.train.batch_size, c.train.samples_per_world), (5, 16, 3));
        assert_eq!((c.train.pretrain_lr, c.train.finetune_lr), (1e-4, 1e-5));
        assert_eq!((c.train.lambda_d, c.train.lambda, c.train.eta), (0.5, 0.2, 0.6));
        assert_eq!(c.train.finetune_epochs, 1);
        assert_eq!(c.data_dir, PathBuf::from("/base/data"));
        assert_eq!(c.sweep_grid(), vec![0.0, 1.0, 2.0, 5.0, 10.0]);
    }

    #[test]
    fn overrides_and_comments() {
        let c = load("# desk run\narchitecture = recurrent\nmodel_preset = desk  # small\nemb_dim=16\nbaseline = adv\nquality = LF\nsweep_lambdas = 2, 0, 2, 1\n").unwrap();
        assert_eq!(c.model.architecture, Architecture::Recurrent);
        assert_eq!(c.model.emb_dim, 16);
        assert_eq!(c.baseline, Baseline::Adv);
        assert_eq!(c.train.quality, QualityKind::Composite);
        assert_eq!(c.sweep_grid(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(matches!(load("nonsense"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(load("colour = red"), Err(Error::Parse { .. })));
        assert!(matches!(load("eta = 2"), Err(Error::Config(_))));
        assert!(matches!(load("baseline = bt"), Err(Error::Config(_))));
        assert!(matches!(load("split = 0.5,0.5,0.5"), Err(Error::Config(_))));
        assert!(matches!(load("batch_size = many"), Err(Error::Config(_))));
    }
}
