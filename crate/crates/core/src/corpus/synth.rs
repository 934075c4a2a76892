use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{AttributeSpace, Dataset, Record};
use crate::error::{Error, Result};

const FEATURES: &[&str] = &[
    "graphics", "story", "controller", "sound", "price", "gameplay", "music", "characters",
    "levels", "multiplayer", "battery", "design",
];
const POSITIVE: &[&str] = &["great", "sharp", "amazing", "smooth", "fun"];
const NEUTRAL: &[&str] = &["okay", "decent", "average"];
const NEGATIVE: &[&str] = &["poor", "dull", "clunky", "bad"];
const FILLERS: &[&[&str]] = &[
    &["i", "played", "it", "every", "day"],
    &["my", "kids", "love", "it", "too"],
    &["it", "arrived", "on", "time"],
    &["worth", "every", "penny"],
    &["would", "recommend", "it", "to", "friends"],
    &["overall", "a", "solid", "purchase"],
    &["it", "kept", "me", "busy", "for", "weeks"],
    &["i", "bought", "it", "as", "a", "gift"],
    &["nothing", "more", "to", "say"],
    &["it", "does", "the", "job"],
];
const FEATURES_PER_ITEM: usize = 4;
const CLAUSE_LEN: usize = 4;

/// Parameters of the bias-controlled synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_records: usize,
    pub attribute_space: AttributeSpace,
    /// Probability of each attribute value, in attribute-space order.
    pub probabilities: Vec<f64>,
    /// Mean explanation length in tokens per attribute value.
    pub mean_length: Vec<f64>,
    /// Mean number of feature clauses per attribute value.
    pub mean_features: Vec<f64>,
    pub max_len: usize,
    /// Standard deviation of the rating noise before rounding.
    pub rating_noise: f64,
}

impl SynthesisSpec {
    /// Two-valued gender corpus with long explanations for `male` and short
    /// ones for `female`.
    pub fn gender_default() -> Self {
        Self {
            n_users: 200,
            n_items: 60,
            n_records: 2000,
            attribute_space: AttributeSpace::new("gender", vec!["male".into(), "female".into()])
                .expect("two distinct values"),
            probabilities: vec![0.5, 0.5],
            mean_length: vec![20.0, 8.0],
            mean_features: vec![2.0, 1.0],
            max_len: 128,
            rating_noise: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.attribute_space.len();
        if self.probabilities.len() != k || self.mean_length.len() != k || self.mean_features.len() != k {
            return Err(Error::Config("per-value parameters must match the attribute space".into()));
        }
        if self.probabilities.iter().any(|p| *p < 0.0) || (self.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("attribute probabilities must be non-negative and sum to 1".into()));
        }
        for &mu in &self.mean_length {
            if mu < 3.0 || mu > self.max_len as f64 {
                return Err(Error::Config(format!(
                    "mean length {mu} outside [3, {}]",
                    self.max_len
                )));
            }
        }
        if self.mean_features.iter().any(|f| *f < 0.0 || !f.is_finite()) {
            return Err(Error::Config("mean feature counts must be >= 0".into()));
        }
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("need at least one user and one item".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        Ok(())
    }

    pub fn feature_lexicon() -> BTreeSet<String> {
        FEATURES.iter().map(|s| s.to_string()).collect()
    }
}

/// Generates a corpus whose per-group explanation length and feature count
/// follow the spec. All records land in the train split; call
/// [`Dataset::split`] afterwards.
pub fn synthesize(spec: &SynthesisSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = &spec.attribute_space.values;

    let user_attr: Vec<usize> = (0..spec.n_users)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in spec.probabilities.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            values.len() - 1
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let user_bias: Vec<f64> = (0..spec.n_users).map(|_| 0.5 * normal.sample(&mut rng)).collect();
    let item_quality: Vec<f64> = (0..spec.n_items).map(|_| normal.sample(&mut rng)).collect();
    let item_features: Vec<Vec<&str>> = (0..spec.n_items)
        .map(|_| {
            let mut f = FEATURES.to_vec();
            f.shuffle(&mut rng);
            f.truncate(FEATURES_PER_ITEM);
            f
        })
        .collect();
    let noise = Normal::new(0.0, spec.rating_noise.max(1e-12)).expect("valid");

    let mut records = Vec::with_capacity(spec.n_records);
    for r in 0..spec.n_records {
        let user = r % spec.n_users;
        let item = rng.random_range(0..spec.n_items);
        let a = user_attr[user];
        let raw = 3.0 + item_quality[item] + user_bias[user] + noise.sample(&mut rng);
        let rating = raw.round().clamp(1.0, 5.0);

        let mu = spec.mean_length[a];
        let length = (Poisson::new(mu).expect("mu >= 3").sample(&mut rng) as usize).clamp(3, spec.max_len);
        let n_feat = if spec.mean_features[a] > 0.0 {
            Poisson::new(spec.mean_features[a]).expect("positive").sample(&mut rng) as usize
        } else {
            0
        };
        let n_feat = n_feat.min(FEATURES_PER_ITEM).min(length / CLAUSE_LEN);

        let adjectives = match rating as u8 {
            4..=5 => POSITIVE,
            3 => NEUTRAL,
            _ => NEGATIVE,
        };
        let mut tokens: Vec<String> = Vec::with_capacity(length + 8);
        let mut feats = item_features[item].clone();
        feats.shuffle(&mut rng);
        for f in feats.into_iter().take(n_feat) {
            let adj = *adjectives.choose(&mut rng).expect("non-empty");
            tokens.extend(["the", f, "is", adj].iter().map(|s| s.to_string()));
        }
        while tokens.len() < length {
            let clause = FILLERS.choose(&mut rng).expect("non-empty");
            tokens.extend(clause.iter().map(|s| s.to_string()));
        }
        tokens.truncate(length);

        records.push(Record {
            user: format!("u{user:05}"),
            item: format!("i{item:05}"),
            attribute: values[a].clone(),
            rating,
            explanation: tokens,
        });
    }
    Dataset::new(records, spec.attribute_space.clone())
}
