//! Counterfactual-fairness fine-tuning.
//!
//! For each user-item pair, `N` explanations are sampled in the factual world
//! and `N` in a counterfactual world whose attribute token is swapped. The
//! mean-quality gap `Δ` turns into per-sample rewards, which are reweighted
//! toward the lower-quality world, centered per world, and used as
//! REINFORCE coefficients on the sequence log-probabilities.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::models::{
    batch_losses, sample_with_log_prob, Context, Example, GeneratorModel, LossWeights, Sampled,
};
use crate::numerics::{AdamConfig, AdamState, Tape, Var};
use crate::quality::{QualityKind, QualityOracle};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Fairness weight `λ`.
    pub lambda: f64,
    /// Quality promotion weight `η`.
    pub eta: f64,
    /// Samples per world `N`.
    pub samples_per_world: usize,
    pub lambda_d: f64,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub max_decode_len: usize,
    pub top_k: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub quality: QualityKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            eta: 0.6,
            samples_per_world: 3,
            lambda_d: 0.5,
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            batch_size: 16,
            max_decode_len: 128,
            top_k: 5,
            finetune_epochs: 1,
            seed: 0,
            quality: QualityKind::Length,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if self.samples_per_world == 0 {
            return Err(Error::Config("samples_per_world must be >= 1".into()));
        }
        if self.lambda_d < 0.0 {
            return Err(Error::Config("lambda_d must be >= 0".into()));
        }
        if self.batch_size == 0 || self.top_k == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("batch_size, top_k and max_decode_len must be positive".into()));
        }
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `sgn` with `sgn(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `Δ = mean(real) − mean(counterfactual)` and its sign.
pub fn compute_delta(real: &[f64], counterfactual: &[f64]) -> Result<(f64, f64)> {
    if real.len() != counterfactual.len() || real.is_empty() {
        return Err(Error::Contract("both worlds need the same positive sample count".into()));
    }
    let delta = mean(real) - mean(counterfactual);
    Ok((delta, sign(delta)))
}

/// Factual `−sgn·Q/N` and counterfactual `+sgn·Q/N` rewards.
pub fn rewards_unweighted(real: &[f64], counterfactual: &[f64], sgn: f64) -> (Vec<f64>, Vec<f64>) {
    let n = real.len() as f64;
    (
        real.iter().map(|q| -sgn * q / n).collect(),
        counterfactual.iter().map(|q| sgn * q / n).collect(),
    )
}

/// Factual-world weight `w`; the counterfactual world gets `1 − w`.
pub fn world_weight(sgn: f64, eta: f64) -> f64 {
    let s = (sgn + 1.0) / 2.0;
    s * (1.0 - eta) + (1.0 - s) * eta
}

pub fn rewards_weighted(real: &[f64], counterfactual: &[f64], sgn: f64, eta: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let w = world_weight(sgn, eta);
    (
        real.iter().map(|r| r * w).collect(),
        counterfactual.iter().map(|r| r * (1.0 - w)).collect(),
        w,
    )
}

/// Rewards minus their world mean.
pub fn rewards_advantage(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let m = mean(rewards);
    rewards.iter().map(|r| r - m).collect()
}

/// Per-world reward fields. Index 0 is the factual world, 1 the
/// counterfactual one.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBatch {
    pub factual_attribute: usize,
    pub counterfactual_attribute: usize,
    pub quality: [Vec<f64>; 2],
    pub delta: f64,
    pub sign: f64,
    /// Factual-world weight `w(Δ)`.
    pub weight: f64,
    pub unweighted: [Vec<f64>; 2],
    pub weighted: [Vec<f64>; 2],
    pub world_means: [f64; 2],
    pub advantage: [Vec<f64>; 2],
}

impl RewardBatch {
    pub fn from_qualities(
        factual_attribute: usize,
        counterfactual_attribute: usize,
        real: &[f64],
        counterfactual: &[f64],
        eta: f64,
    ) -> Result<Self> {
        let (delta, sgn) = compute_delta(real, counterfactual)?;
        let (rf, rc) = rewards_unweighted(real, counterfactual, sgn);
        let (wf, wc, weight) = rewards_weighted(&rf, &rc, sgn, eta);
        let world_means = [mean(&wf), mean(&wc)];
        Ok(Self {
            factual_attribute,
            counterfactual_attribute,
            quality: [real.to_vec(), counterfactual.to_vec()],
            delta,
            sign: sgn,
            weight,
            advantage: [rewards_advantage(&wf), rewards_advantage(&wc)],
            unweighted: [rf, rc],
            weighted: [wf, wc],
            world_means,
        })
    }

    /// Sampled fairness loss `|Δ|`.
    pub fn fairness_loss(&self) -> f64 {
        self.delta.abs()
    }

    /// Weight applied to the lower-quality world (`None` when `Δ = 0`).
    pub fn lower_world_weight(&self) -> Option<f64> {
        match self.sign {
            s if s > 0.0 => Some(1.0 - self.weight),
            s if s < 0.0 => Some(self.weight),
            _ => None,
        }
    }

    pub fn is_inert(&self) -> bool {
        self.advantage.iter().flatten().all(|&r| r == 0.0)
    }
}

/// Surrogate `Σ_k −log G(y_k) · r_k` over both worlds, with the rewards as
/// constants. Its gradient is the REINFORCE estimate.
pub fn reinforce_surrogate<'t>(tape: &'t Tape, log_probs: [&[Var<'t>]; 2], rewards: [&[f64]; 2]) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for world in 0..2 {
        if log_probs[world].len() != rewards[world].len() {
            return Err(Error::Contract("one log-probability per sample".into()));
        }
        for (lp, &r) in log_probs[world].iter().zip(rewards[world]) {
            if r != 0.0 {
                terms.push(lp.scale(-r));
            }
        }
    }
    crate::models::sum_scalars(tape, &terms)
}

/// [`reinforce_surrogate`] with the advantage rewards of `rewards`.
pub fn fairness_surrogate<'t>(tape: &'t Tape, rewards: &RewardBatch, log_probs: [&[Var<'t>]; 2]) -> Result<Var<'t>> {
    reinforce_surrogate(tape, log_probs, [&rewards.advantage[0], &rewards.advantage[1]])
}

/// splitmix64 finalizer used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Decoding settings shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoding {
    pub top_k: usize,
    pub max_len: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { top_k: 5, max_len: 128 }
    }
}

/// `N` factual and `N` counterfactual samples. Sample `i` of both worlds
/// draws from the same stream seeded by `(seed, i)`.
pub fn sample_two_worlds(
    model: &GeneratorModel,
    ctx: Context,
    counterfactual: usize,
    n: usize,
    seed: u64,
    decoding: Decoding,
) -> Result<(Vec<Sampled>, Vec<Sampled>)> {
    if model.n_attributes < 2 {
        return Err(Error::Domain("counterfactuals need at least two attribute values".into()));
    }
    if counterfactual >= model.n_attributes || counterfactual == ctx.attribute {
        return Err(Error::Domain(format!(
            "counterfactual value {counterfactual} must differ from {} and lie in the space",
            ctx.attribute
        )));
    }
    let cf_ctx = ctx.with_attribute(counterfactual);
    let mut factual = Vec::with_capacity(n);
    let mut cf = Vec::with_capacity(n);
    for i in 0..n {
        let stream = mix_seed(&[seed, i as u64]);
        factual.push(sample_with_log_prob(model, ctx, decoding.top_k, decoding.max_len, &mut ChaCha8Rng::seed_from_u64(stream))?);
        cf.push(sample_with_log_prob(model, cf_ctx, decoding.top_k, decoding.max_len, &mut ChaCha8Rng::seed_from_u64(stream))?);
    }
    Ok((factual, cf))
}

/// Uniform draw from the attribute values other than `a`.
pub fn pick_counterfactual(a: usize, n_values: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_values < 2 {
        return Err(Error::Domain("attribute space is a singleton".into()));
    }
    let k = rng.random_range(0..n_values - 1);
    Ok(if k >= a { k + 1 } else { k })
}

pub fn score_samples(samples: &[Sampled], oracle: &QualityOracle, vocab: &Vocabulary) -> Vec<f64> {
    samples.iter().map(|s| oracle.score(&vocab.decode(&s.tokens))).collect()
}

/// Sampled worlds and rewards for one pair.
#[derive(Clone, Debug)]
pub struct PairRollout {
    pub example: usize,
    pub context: Context,
    pub samples: [Vec<Sampled>; 2],
    pub rewards: RewardBatch,
}

/// Teacher-forced `Σ_t log p(y_t)` of `sample` in context `ctx`.
pub fn sequence_log_prob<'t>(model: &GeneratorModel, tape: &'t Tape, ctx: Context, sample: &Sampled) -> Result<Option<Var<'t>>> {
    let targets = sample.targets();
    if targets.is_empty() {
        return Ok(None);
    }
    let out = model.forward(tape, ctx, &sample.input(), None)?;
    let idx: Vec<(usize, usize)> = targets.into_iter().enumerate().collect();
    Ok(Some(out.log_probs.pick(&idx)?.sum()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub l_gen: f64,
    pub l_fair: f64,
    pub grad_norm: f64,
}

/// One optimizer step on `L_gen + λ · mean_pairs(surrogate)`.
pub fn fairness_gradient_step(
    model: &mut GeneratorModel,
    batch: &[&Example],
    rollouts: &[PairRollout],
    lambda: f64,
    adam: &mut AdamState,
) -> Result<StepStats> {
    if !model.embeddings_frozen() {
        return Err(Error::Contract("user, item and attribute embeddings must be frozen during fine-tuning".into()));
    }
    let tape = Tape::new();
    let gen = batch_losses(model, &tape, batch, LossWeights::text_only(), None)?;
    let mut loss = gen.total;
    let l_fair = if rollouts.is_empty() {
        0.0
    } else {
        rollouts.iter().map(|r| r.rewards.fairness_loss()).sum::<f64>() / rollouts.len() as f64
    };
    if lambda != 0.0 && !rollouts.is_empty() {
        let mut surrogates = Vec::with_capacity(rollouts.len());
        for r in rollouts.iter().filter(|r| !r.rewards.is_inert()) {
            let ctx = r.context;
            let mut lps: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
            for (world, attr) in [(0, r.rewards.factual_attribute), (1, r.rewards.counterfactual_attribute)] {
                for s in &r.samples[world] {
                    let lp = sequence_log_prob(model, &tape, ctx.with_attribute(attr), s)?;
                    lps[world].push(lp.unwrap_or_else(|| tape.constant(crate::numerics::Tensor::scalar(0.0))));
                }
            }
            surrogates.push(fairness_surrogate(&tape, &r.rewards, [&lps[0], &lps[1]])?);
        }
        if !surrogates.is_empty() {
            let fair = crate::models::sum_scalars(&tape, &surrogates)?.scale(lambda / rollouts.len() as f64);
            loss = loss.add(fair)?;
        }
    }
    let l_gen = gen.total.item()?;
    if !loss.item()?.is_finite() {
        return Err(Error::Numeric(format!("fine-tuning loss diverged (L_gen {l_gen})")));
    }
    let grads = tape.backward(loss)?;
    let grad_norm = grads.norm();
    adam.step(&mut model.params, &grads)?;
    Ok(StepStats { l_gen, l_fair, grad_norm })
}

/// One CSV row per pair per step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogRow {
    pub step: u64,
    pub pair: usize,
    pub delta: f64,
    pub l_gen: f64,
    pub l_fair: f64,
    pub grad_norm: f64,
}

pub const STEP_LOG_HEADER: &str = "step,pair,delta,l_gen,l_fair,grad_norm";

pub fn write_step_log(rows: &[StepLogRow], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "{STEP_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.pair,
            crate::metrics::fmt_sig(r.delta),
            crate::metrics::fmt_sig(r.l_gen),
            crate::metrics::fmt_sig(r.l_fair),
            crate::metrics::fmt_sig(r.grad_norm)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: u64,
    pub log: Vec<StepLogRow>,
    /// Mean `|Δ|` over each epoch's pairs.
    pub epoch_fairness: Vec<f64>,
}

/// Fairness fine-tuning with frozen embeddings and the text-only generation
/// loss on the same batches.
pub fn finetune(
    model: &mut GeneratorModel,
    train: &[Example],
    oracle: &QualityOracle,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    if !model.has_attribute_token() {
        return Err(Error::Contract("fine-tuning needs a model with an attribute table".into()));
    }
    model.set_embeddings_frozen(true);
    let decoding = Decoding {
        top_k: config.top_k,
        max_len: config.max_decode_len,
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(config.finetune_lr));
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1]));
    let mut cf_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 2]));
    let mut report = FinetuneReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.finetune_epochs {
        order.shuffle(&mut order_rng);
        let mut fairness = Vec::with_capacity(train.len());
        for chunk in order.chunks(config.batch_size) {
            let step = adam.step_count() + 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rollouts = Vec::with_capacity(chunk.len());
            if config.lambda != 0.0 {
                for &i in chunk {
                    let ctx = train[i].context;
                    let cf = pick_counterfactual(ctx.attribute, model.n_attributes, &mut cf_rng)?;
                    let seed = mix_seed(&[config.seed, epoch as u64, i as u64]);
                    let (f, c) = sample_two_worlds(model, ctx, cf, config.samples_per_world, seed, decoding)?;
                    let rewards = RewardBatch::from_qualities(
                        ctx.attribute,
                        cf,
                        &score_samples(&f, oracle, vocab),
                        &score_samples(&c, oracle, vocab),
                        config.eta,
                    )?;
                    rollouts.push(PairRollout {
                        example: i,
                        context: ctx,
                        samples: [f, c],
                        rewards,
                    });
                }
            }
            let stats = fairness_gradient_step(model, &batch, &rollouts, config.lambda, &mut adam)?;
            if rollouts.is_empty() {
                report.log.push(StepLogRow {
                    step,
                    pair: chunk[0],
                    delta: 0.0,
                    l_gen: stats.l_gen,
                    l_fair: 0.0,
                    grad_norm: stats.grad_norm,
                });
            }
            for r in &rollouts {
                fairness.push(r.rewards.fairness_loss());
                report.log.push(StepLogRow {
                    step,
                    pair: r.example,
                    delta: r.rewards.delta,
                    l_gen: stats.l_gen,
                    l_fair: r.rewards.fairness_loss(),
                    grad_norm: stats.grad_norm,
                });
            }
        }
        report
            .epoch_fairness
            .push(if fairness.is_empty() { 0.0 } else { mean(&fairness) });
    }
    report.steps = adam.step_count();
    Ok(report)
}
