//! Comparison methods: NORM training-data repair, NATTR inference-time
//! attribute removal, and the configuration-only baselines.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coffee::TrainConfig;
use crate::corpus::{AttributeSpace, Record};
use crate::error::{Error, Result};
use crate::models::{GeneratorModel, ModelConfig};
use crate::numerics::uniform;
use crate::quality::QualityOracle;

#[derive(Clone, Debug)]
pub struct NormSpec {
    pub oracle: QualityOracle,
    /// Stop once every group gap is at most this fraction of the original maximum gap.
    pub threshold: f64,
}

impl NormSpec {
    pub fn new(oracle: QualityOracle) -> Self {
        Self { oracle, threshold: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("NORM threshold must be in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormRemoval {
    /// Position in the input record list.
    pub index: usize,
    pub group: usize,
    pub quality: f64,
    /// Sizes of the repaired pair `(source, other)` just before removal.
    pub sizes: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormOutcome {
    pub records: Vec<Record>,
    pub removed: Vec<NormRemoval>,
    pub original_gap: f64,
    pub final_gap: f64,
}

impl NormOutcome {
    /// Removal manifest for auditing.
    pub fn manifest_csv(&self, input: &[Record]) -> String {
        let mut out = String::from("index,user,item,attribute,quality\n");
        for r in &self.removed {
            let rec = &input[r.index];
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.index,
                rec.user,
                rec.item,
                rec.attribute,
                crate::metrics::fmt_sig(r.quality)
            );
        }
        out
    }
}

fn group_mean(members: &[usize], q: &[f64]) -> f64 {
    members.iter().map(|&i| q[i]).sum::<f64>() / members.len() as f64
}

/// Largest pairwise gap between group means, with the pair realizing it.
fn max_gap(groups: &[Vec<usize>], q: &[f64]) -> (f64, usize, usize) {
    let mut best = (0.0, 0, 0);
    let live: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
    for (x, &i) in live.iter().enumerate() {
        for &j in &live[x + 1..] {
            let gap = (group_mean(&groups[i], q) - group_mean(&groups[j], q)).abs();
            if gap > best.0 {
                best = (gap, i, j);
            }
        }
    }
    best
}

/// Removes records from the larger group of the most different pair until
/// the maximum group-mean gap falls to `threshold` times its original value.
pub fn norm_preprocess(records: &[Record], space: &AttributeSpace, spec: &NormSpec) -> Result<NormOutcome> {
    spec.validate()?;
    let q: Vec<f64> = records.iter().map(|r| spec.oracle.score(&r.explanation)).collect();
    let mut groups = vec![Vec::new(); space.len()];
    for (i, r) in records.iter().enumerate() {
        let a = space
            .index_of(&r.attribute)
            .ok_or_else(|| Error::Domain(format!("record {i} has unknown attribute value {:?}", r.attribute)))?;
        groups[a].push(i);
    }
    if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::Domain("NORM needs at least two non-empty groups".into()));
    }

    let (original_gap, ..) = max_gap(&groups, &q);
    let target = spec.threshold * original_gap;
    let mut removed = Vec::new();
    loop {
        let (gap, i, j) = max_gap(&groups, &q);
        if gap <= target {
            break;
        }
        let (mi, mj) = (group_mean(&groups[i], &q), group_mean(&groups[j], &q));
        let (src, other) = match groups[i].len().cmp(&groups[j].len()) {
            std::cmp::Ordering::Greater => (i, j),
            std::cmp::Ordering::Less => (j, i),
            std::cmp::Ordering::Equal if mi <= mj => (i, j),
            std::cmp::Ordering::Equal => (j, i),
        };
        if groups[src].len() == 1 {
            return Err(Error::Domain(format!(
                "NORM would empty group {:?} with gap {gap} still above {target}",
                space.values[src]
            )));
        }
        let higher = group_mean(&groups[src], &q) > group_mean(&groups[other], &q);
        let members = &groups[src];
        let mut pos = 0;
        for (p, &idx) in members.iter().enumerate() {
            let better = if higher { q[idx] > q[members[pos]] } else { q[idx] < q[members[pos]] };
            if better {
                pos = p;
            }
        }
        let sizes = (groups[src].len(), groups[other].len());
        let index = groups[src].remove(pos);
        removed.push(NormRemoval {
            index,
            group: src,
            quality: q[index],
            sizes,
        });
    }

    let (final_gap, ..) = max_gap(&groups, &q);
    let mut dropped = vec![false; records.len()];
    for r in &removed {
        dropped[r.index] = true;
    }
    Ok(NormOutcome {
        records: records.iter().zip(&dropped).filter(|(_, &d)| !d).map(|(r, _)| r.clone()).collect(),
        removed,
        original_gap,
        final_gap,
    })
}

/// Inference-time copy that ignores the attribute: the transformer blocks
/// attention to the attribute position, the recurrent model gets fresh
/// uniform `[-1, 1]` attribute rows.
pub fn nattr_transform(model: &GeneratorModel, seed: u64) -> Result<GeneratorModel> {
    let table = model
        .attribute_table()
        .ok_or_else(|| Error::Contract("NATTR needs a model with an attribute table".into()))?;
    let mut view = model.clone();
    match model.config.architecture {
        crate::models::Architecture::Transformer => view.mask_attribute = true,
        crate::models::Architecture::Recurrent => {
            let shape = model.params.get(table).shape();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            view.params.set(table, uniform(shape[0], shape[1], 1.0, &mut rng))?;
        }
    }
    Ok(view)
}

/// Methods compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Baseline {
    Raw,
    Attr,
    Adv,
    Norm,
    Nattr,
    Coffee,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [Self::Raw, Self::Attr, Self::Adv, Self::Norm, Self::Nattr, Self::Coffee];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Attr => "attr",
            Self::Adv => "adv",
            Self::Norm => "norm",
            Self::Nattr => "nattr",
            Self::Coffee => "coffee",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}; expected raw|attr|adv|norm|nattr|coffee")))
    }

    /// Pipeline stages implied by the method.
    pub fn plan(self) -> BaselinePlan {
        let base = BaselinePlan {
            use_attribute_token: true,
            adversarial: false,
            fairness_finetune: false,
            norm: false,
            nattr: false,
        };
        match self {
            Self::Raw => BaselinePlan {
                use_attribute_token: false,
                ..base
            },
            Self::Attr => base,
            Self::Adv => BaselinePlan {
                use_attribute_token: false,
                adversarial: true,
                ..base
            },
            Self::Norm => BaselinePlan { norm: true, ..base },
            Self::Nattr => BaselinePlan { nattr: true, ..base },
            Self::Coffee => BaselinePlan {
                adversarial: true,
                fairness_finetune: true,
                ..base
            },
        }
    }

    /// Model and training configuration realizing the method.
    pub fn resolve(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let plan = self.plan();
        let model = ModelConfig {
            use_attribute_token: plan.use_attribute_token,
            ..model.clone()
        };
        let train = TrainConfig {
            lambda: if plan.fairness_finetune { train.lambda } else { 0.0 },
            lambda_d: if plan.adversarial { train.lambda_d } else { 0.0 },
            ..train.clone()
        };
        (model, train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselinePlan {
    pub use_attribute_token: bool,
    pub adversarial: bool,
    pub fairness_finetune: bool,
    pub norm: bool,
    pub nattr: bool,
}
