use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{batch_losses, LossBreakdown, LossWeights};
use super::{Example, GeneratorModel};
use crate::disentangle::{Adversary, Granularity};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tape};

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const ADVERSARY_STREAM: u64 = 0x6164_7665_7273_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            patience: 5,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of per-batch training losses.
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    /// Mean discriminator cross-entropy over the epoch's discriminator updates.
    pub discriminator: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub curve: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial weights).
    pub best_epoch: usize,
    pub best_valid: f64,
    pub steps: u64,
}

/// Mean losses over `examples` without dropout.
pub fn evaluate_losses(model: &GeneratorModel, examples: &[Example], weights: LossWeights, batch: usize) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let mut seen = 0.0;
    for chunk in examples.chunks(batch.max(1)) {
        let tape = Tape::inference();
        let refs: Vec<&Example> = chunk.iter().collect();
        let b = batch_losses(model, &tape, &refs, weights, None)?.breakdown()?;
        let n = chunk.len() as f64;
        acc.nll += b.nll * n;
        acc.context += b.context * n;
        acc.rating_mse += b.rating_mse * n;
        acc.total += b.total * n;
        seen += n;
    }
    if seen > 0.0 {
        acc.nll /= seen;
        acc.context /= seen;
        acc.rating_mse /= seen;
        acc.total /= seen;
    }
    Ok(acc)
}

/// Pretraining without the fairness term; keeps the parameters of the best
/// validation epoch.
pub fn pretrain(
    model: &mut GeneratorModel,
    train: &[Example],
    valid: &[Example],
    options: &PretrainOptions,
) -> Result<PretrainReport> {
    fit(model, train, valid, options, None)
}

struct Running {
    sum: LossBreakdown,
    n: usize,
}

impl Running {
    fn new() -> Self {
        Self {
            sum: LossBreakdown::default(),
            n: 0,
        }
    }

    fn push(&mut self, b: LossBreakdown) {
        self.sum.nll += b.nll;
        self.sum.context += b.context;
        self.sum.rating_mse += b.rating_mse;
        self.sum.total += b.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            nll: self.sum.nll / n,
            context: self.sum.context / n,
            rating_mse: self.sum.rating_mse / n,
            total: self.sum.total / n,
        }
    }
}

fn generator_step(
    model: &mut GeneratorModel,
    batch: &[&Example],
    options: &PretrainOptions,
    adam: &mut AdamState,
    noise: &mut ChaCha8Rng,
    adversary: Option<&Adversary>,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let losses = batch_losses(model, &tape, batch, options.weights, Some(noise))?;
    let mut objective = losses.total;
    if let Some(adv) = adversary.filter(|a| a.lambda != 0.0) {
        let labels: Vec<usize> = batch.iter().map(|e| e.context.attribute).collect();
        let users = tape.concat_rows(&losses.user_embeddings)?;
        objective = objective.add(adv.discriminator.adversarial_loss(&tape, users, &labels, adv.lambda)?)?;
    }
    let breakdown = losses.breakdown()?;
    let value = objective.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("generator loss diverged ({value})")));
    }
    let grads = tape.backward(objective)?;
    adam.step(&mut model.params, &grads)?;
    Ok(breakdown)
}

pub(crate) fn fit(
    model: &mut GeneratorModel,
    train: &[Example],
    valid: &[Example],
    options: &PretrainOptions,
    mut adversary: Option<&mut Adversary>,
) -> Result<PretrainReport> {
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if valid.is_empty() && options.max_epochs > 0 {
        return Err(Error::Contract("pretraining needs a non-empty validation split".into()));
    }
    if let Some(adv) = adversary.as_deref() {
        adv.schedule.validate()?;
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(options.seed ^ NOISE_STREAM);
    let mut adv_rng = ChaCha8Rng::seed_from_u64(options.seed ^ ADVERSARY_STREAM);
    let mut adam = AdamState::new(AdamConfig::with_lr(options.lr));

    let mut curve = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut best_valid = if options.max_epochs > 0 {
        evaluate_losses(model, valid, options.weights, options.batch_size)?.total
    } else {
        f64::INFINITY
    };
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=options.max_epochs {
        order.shuffle(&mut order_rng);
        let mut running = Running::new();
        let mut disc_loss = Vec::new();
        let batches: Vec<Vec<&Example>> = order
            .chunks(options.batch_size)
            .map(|c| c.iter().map(|&i| &train[i]).collect())
            .collect();
        let batch_mode = adversary
            .as_deref()
            .map(|a| a.schedule.granularity == Granularity::Batch)
            .unwrap_or(false);
        for (b, batch) in batches.iter().enumerate() {
            if batch_mode {
                let adv = adversary.as_deref_mut().expect("batch mode implies adversary");
                let round = adv.schedule.generator_units + adv.schedule.discriminator_units;
                if b % round >= adv.schedule.generator_units {
                    disc_loss.push(adv.discriminator_step(model, batch)?);
                    continue;
                }
            }
            let b = generator_step(model, batch, options, &mut adam, &mut noise_rng, adversary.as_deref())?;
            running.push(b);
        }

        if let Some(adv) = adversary.as_deref_mut() {
            let s = &adv.schedule;
            if s.granularity == Granularity::Epoch && epoch % s.generator_units == 0 {
                for _ in 0..s.discriminator_units {
                    disc_loss.push(adv.discriminator_epoch(model, train, options.batch_size, &mut adv_rng)?);
                }
            }
        }

        let v = evaluate_losses(model, valid, options.weights, options.batch_size)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged at epoch {epoch}")));
        }
        let discriminator = (!disc_loss.is_empty()).then(|| disc_loss.iter().sum::<f64>() / disc_loss.len() as f64);
        debug!("epoch {epoch}: train {:.4} valid {:.4}", running.mean().total, v.total);
        curve.push(EpochRecord {
            epoch,
            train: running.mean(),
            valid: v,
            discriminator,
        });
        if v.total < best_valid {
            best_valid = v.total;
            best_epoch = epoch;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= options.patience {
                info!("early stop after epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    model.params = best_params;
    Ok(PretrainReport {
        curve,
        best_epoch,
        best_valid,
        steps: adam.step_count(),
    })
}
