//! Fairness metrics over paired factual/counterfactual generations, text
//! overlap metrics and report assembly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coffee::{mix_seed, Decoding};
use crate::corpus::{Vocabulary, BOS_ID};
use crate::error::{Error, Result};
use crate::models::{sample_with_log_prob, Example, GeneratorModel, Sampled};
use crate::numerics::Tape;
use crate::quality::{QualityKind, QualityOracle};

/// Qualities of one pair's samples in the factual world and under each
/// counterfactual value.
#[derive(Clone, Debug, PartialEq)]
pub struct PairQualities {
    pub attribute: usize,
    pub factual: Vec<f64>,
    pub counterfactual: Vec<(usize, Vec<f64>)>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean over pairs (and over counterfactual values) of the absolute gap
/// between factual and counterfactual mean quality.
pub fn ind_cf(pairs: &[PairQualities]) -> f64 {
    let per_pair: Vec<f64> = pairs
        .iter()
        .filter(|p| !p.counterfactual.is_empty())
        .map(|p| {
            let f = mean(&p.factual);
            mean(&p.counterfactual.iter().map(|(_, q)| (f - mean(q)).abs()).collect::<Vec<_>>())
        })
        .collect();
    mean(&per_pair)
}

/// Group-level counterfactual effect, averaged over ordered value pairs
/// with a non-empty source group.
pub fn grp_cf(pairs: &[PairQualities], n_values: usize) -> f64 {
    let mut terms = Vec::new();
    for a in 0..n_values {
        let group: Vec<&PairQualities> = pairs.iter().filter(|p| p.attribute == a).collect();
        if group.is_empty() {
            warn!("attribute value {a} has no evaluation pairs; skipped in Grp-CF");
            continue;
        }
        for b in (0..n_values).filter(|&b| b != a) {
            let factual: f64 = group.iter().map(|p| mean(&p.factual)).sum();
            let counter: f64 = group
                .iter()
                .filter_map(|p| p.counterfactual.iter().find(|(v, _)| *v == b).map(|(_, q)| mean(q)))
                .sum();
            terms.push((factual - counter).abs() / group.len() as f64);
        }
    }
    mean(&terms)
}

/// Mean absolute gap of factual group means over unordered value pairs.
pub fn ddp(pairs: &[PairQualities], n_values: usize) -> Result<f64> {
    let means: Vec<f64> = (0..n_values)
        .filter_map(|a| {
            let vals: Vec<f64> = pairs.iter().filter(|p| p.attribute == a).map(|p| mean(&p.factual)).collect();
            (!vals.is_empty()).then(|| mean(&vals))
        })
        .collect();
    if means.len() < 2 {
        return Err(Error::Domain("demographic disparity needs at least two non-empty groups".into()));
    }
    let mut gaps = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            gaps.push((means[i] - means[j]).abs());
        }
    }
    Ok(mean(&gaps))
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
    }
    out
}

fn clipped_overlap<S: AsRef<str>>(cand: &[S], refr: &[S], n: usize) -> (usize, usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(refr, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (overlap, c.values().sum(), r.values().sum())
}

/// Corpus BLEU with orders `1..=n`, clipping and brevity penalty, no smoothing.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract("candidates and references must align".into()));
    }
    if n == 0 {
        return Err(Error::Contract("BLEU order must be >= 1".into()));
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut hit, mut total) = (0, 0);
        for (c, r) in candidates.iter().zip(references) {
            let (o, t, _) = clipped_overlap(c, r, order);
            hit += o;
            total += t;
        }
        if hit == 0 {
            return Ok(0.0);
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    Longest,
}

fn f1(overlap: f64, cand: f64, refr: f64) -> f64 {
    if overlap == 0.0 || cand == 0.0 || refr == 0.0 {
        return 0.0;
    }
    let (p, r) = (overlap / cand, overlap / refr);
    2.0 * p * r / (p + r)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1 of one candidate against one reference.
pub fn rouge<S: AsRef<str>>(candidate: &[S], reference: &[S], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (o, c, r) = clipped_overlap(candidate, reference, n);
            f1(o as f64, c as f64, r as f64)
        }
        RougeVariant::Longest => f1(
            lcs_len(candidate, reference) as f64,
            candidate.len() as f64,
            reference.len() as f64,
        ),
    }
}

pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    Ok(crate::models::rating_mse(predicted, truth)?.sqrt())
}

/// `x` with 9 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..=15).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    } else {
        format!("{x:.8e}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityFairness {
    pub quality: String,
    pub ind_cf: f64,
    pub grp_cf: f64,
    pub ddp: f64,
}

/// BLEU and ROUGE in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerationScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rmse: f64,
}

/// Generated lengths per group, world and length.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LengthHistogram {
    /// `(group, world, length) -> count` with world `"factual"` or `"counterfactual"`.
    pub counts: BTreeMap<(String, String, usize), usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessReport {
    pub model: String,
    pub dataset: String,
    pub samples_per_world: usize,
    pub seed: u64,
    pub fairness: Vec<QualityFairness>,
    pub generation: GenerationScores,
    pub bertscore: &'static str,
    #[serde(skip)]
    pub histogram: LengthHistogram,
    /// Mean factual quality per group, per quality measure.
    pub group_means: BTreeMap<String, Vec<f64>>,
}

pub const REPORT_HEADER: &str = "model,dataset,quality,ind_cf,grp_cf,ddp,bleu1,bleu4,rouge1,rouge2,rougeL,bertscore,rmse,n,seed";

impl FairnessReport {
    pub fn fairness_for(&self, kind: QualityKind) -> Option<&QualityFairness> {
        self.fairness.iter().find(|f| f.quality == kind.tag())
    }

    /// One row per quality measure; BLEU/ROUGE reported as percentages.
    pub fn to_csv(&self) -> String {
        let g = &self.generation;
        let mut out = format!("{REPORT_HEADER}\n");
        for f in &self.fairness {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.model,
                self.dataset,
                f.quality,
                fmt_sig(f.ind_cf),
                fmt_sig(f.grp_cf),
                fmt_sig(f.ddp),
                fmt_sig(100.0 * g.bleu1),
                fmt_sig(100.0 * g.bleu4),
                fmt_sig(100.0 * g.rouge1),
                fmt_sig(100.0 * g.rouge2),
                fmt_sig(100.0 * g.rouge_l),
                self.bertscore,
                fmt_sig(g.rmse),
                self.samples_per_world,
                self.seed
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("group,world,length,count\n");
        for ((group, world, len), count) in &self.histogram.counts {
            let _ = writeln!(out, "{group},{world},{len},{count}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub samples_per_world: usize,
    pub seed: u64,
    pub decoding: Decoding,
    pub model_tag: String,
    pub dataset_tag: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_world: 3,
            seed: 0,
            decoding: Decoding::default(),
            model_tag: "model".into(),
            dataset_tag: "dataset".into(),
        }
    }
}

/// Samples of one pair: factual world plus every counterfactual value.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGenerations {
    pub attribute: usize,
    pub factual: Vec<Sampled>,
    pub counterfactual: Vec<(usize, Vec<Sampled>)>,
}

/// Paired-seed generations for every test pair. Pair `p`, sample `i` uses
/// the same stream in every world.
pub fn generate_pairs(model: &GeneratorModel, test: &[Example], n: usize, seed: u64, decoding: Decoding) -> Result<Vec<PairGenerations>> {
    if n == 0 {
        return Err(Error::Config("samples per world must be >= 1".into()));
    }
    test.par_iter()
        .enumerate()
        .map(|(p, ex)| {
            let ctx = ex.context;
            let world = |attr: usize| -> Result<Vec<Sampled>> {
                (0..n)
                    .map(|i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, p as u64, i as u64]));
                        sample_with_log_prob(model, ctx.with_attribute(attr), decoding.top_k, decoding.max_len, &mut rng)
                    })
                    .collect()
            };
            let counterfactual = if model.has_attribute_token() {
                (0..model.n_attributes)
                    .filter(|&b| b != ctx.attribute)
                    .map(|b| Ok((b, world(b)?)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(PairGenerations {
                attribute: ctx.attribute,
                factual: world(ctx.attribute)?,
                counterfactual,
            })
        })
        .collect()
}

/// Without an attribute token the counterfactual world is the factual one.
fn qualities(gens: &[PairGenerations], oracle: &QualityOracle, vocab: &Vocabulary, n_values: usize) -> Vec<PairQualities> {
    let score = |s: &[Sampled]| s.iter().map(|x| oracle.score(&vocab.decode(&x.tokens))).collect::<Vec<_>>();
    gens.iter()
        .map(|g| {
            let factual = score(&g.factual);
            let counterfactual = if g.counterfactual.is_empty() {
                (0..n_values).filter(|&b| b != g.attribute).map(|b| (b, factual.clone())).collect()
            } else {
                g.counterfactual.iter().map(|(b, s)| (*b, score(s))).collect()
            };
            PairQualities {
                attribute: g.attribute,
                factual,
                counterfactual,
            }
        })
        .collect()
}

pub fn predict_ratings(model: &GeneratorModel, test: &[Example]) -> Result<Vec<f64>> {
    test.iter()
        .map(|ex| {
            let tape = Tape::inference();
            model.forward(&tape, ex.context, &[BOS_ID], None)?.rating.item()
        })
        .collect()
}

/// Full evaluation protocol: paired top-k generations, fairness for every
/// oracle, overlap metrics of the first factual sample, and rating RMSE.
pub fn evaluate(
    model: &GeneratorModel,
    test: &[Example],
    vocab: &Vocabulary,
    attribute_values: &[String],
    oracles: &[(QualityKind, QualityOracle)],
    config: &EvalConfig,
) -> Result<FairnessReport> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test split".into()));
    }
    let n_values = attribute_values.len();
    let gens = generate_pairs(model, test, config.samples_per_world, config.seed, config.decoding)?;

    let mut fairness = Vec::with_capacity(oracles.len());
    let mut group_means = BTreeMap::new();
    for (kind, oracle) in oracles {
        let q = qualities(&gens, oracle, vocab, n_values);
        fairness.push(QualityFairness {
            quality: kind.tag().to_string(),
            ind_cf: ind_cf(&q),
            grp_cf: grp_cf(&q, n_values),
            ddp: ddp(&q, n_values)?,
        });
        group_means.insert(
            kind.tag().to_string(),
            (0..n_values)
                .map(|a| mean(&q.iter().filter(|p| p.attribute == a).map(|p| mean(&p.factual)).collect::<Vec<_>>()))
                .collect(),
        );
    }

    // Every factual sample is scored against its record's reference.
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for (g, e) in gens.iter().zip(test) {
        let reference = vocab.decode(&e.words);
        for s in &g.factual {
            candidates.push(vocab.decode(&s.tokens));
            references.push(reference.clone());
        }
    }
    let avg_rouge = |v| mean(&candidates.iter().zip(&references).map(|(c, r)| rouge(c, r, v)).collect::<Vec<_>>());
    let predicted = predict_ratings(model, test)?;
    let truth: Vec<f64> = test.iter().map(|e| e.rating).collect();
    let generation = GenerationScores {
        bleu1: bleu(&candidates, &references, 1)?,
        bleu4: bleu(&candidates, &references, 4)?,
        rouge1: avg_rouge(RougeVariant::One),
        rouge2: avg_rouge(RougeVariant::Two),
        rouge_l: avg_rouge(RougeVariant::Longest),
        rmse: rmse(&predicted, &truth)?,
    };

    let mut histogram = LengthHistogram::default();
    for g in &gens {
        let group = attribute_values[g.attribute].clone();
        for s in &g.factual {
            *histogram.counts.entry((group.clone(), "factual".into(), s.tokens.len())).or_default() += 1;
        }
        for (_, samples) in &g.counterfactual {
            for s in samples {
                *histogram
                    .counts
                    .entry((group.clone(), "counterfactual".into(), s.tokens.len()))
                    .or_default() += 1;
            }
        }
    }

    Ok(FairnessReport {
        model: config.model_tag.clone(),
        dataset: config.dataset_tag.clone(),
        samples_per_world: config.samples_per_world,
        seed: config.seed,
        fairness,
        generation,
        bertscore: "not_computed",
        histogram,
        group_means,
    })
}
