use rand_chacha::ChaCha8Rng;

use super::{Example, GeneratorModel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Multipliers on the three generator losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub nll: f64,
    pub context: f64,
    pub rating: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 1.0,
            context: 1.0,
            rating: 1.0,
        }
    }
}

impl LossWeights {
    /// Text-only objective used during fairness fine-tuning.
    pub fn text_only() -> Self {
        Self {
            rating: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub context: f64,
    pub rating_mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.context.is_finite() && self.rating_mse.is_finite() && self.total.is_finite()
    }
}

/// Loss nodes of one batch on a shared tape.
pub struct BatchLoss<'t> {
    pub nll: Var<'t>,
    pub context: Var<'t>,
    pub rating_mse: Var<'t>,
    pub total: Var<'t>,
    /// One `1 × d` input user embedding per example.
    pub user_embeddings: Vec<Var<'t>>,
}

impl BatchLoss<'_> {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            nll: self.nll.item()?,
            context: self.context.item()?,
            rating_mse: self.rating_mse.item()?,
            total: self.total.item()?,
        })
    }
}

/// Mean of `−log p(target_t)` over the rows of `log_probs`.
pub fn nll_from_log_probs<'t>(log_probs: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    if targets.len() != log_probs.shape()[0] {
        return Err(Error::Contract(format!(
            "{} targets for {} positions",
            targets.len(),
            log_probs.shape()[0]
        )));
    }
    let idx: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    Ok(log_probs.pick(&idx)?.mean()?.scale(-1.0))
}

/// Mean squared error between predicted and true ratings.
pub fn rating_mse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Contract("rating vectors must be non-empty and aligned".into()));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predicted.len() as f64)
}

pub(crate) fn sum_scalars<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(tape.concat_cols(parts)?.sum())
}

/// Teacher-forced losses over `examples`: token-mean NLL, token-mean context
/// loss and mean squared rating error, combined with `weights`.
pub fn batch_losses<'t>(
    model: &GeneratorModel,
    tape: &'t Tape,
    examples: &[&Example],
    weights: LossWeights,
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss<'t>> {
    if examples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut token_terms = Vec::with_capacity(examples.len());
    let mut context_terms = Vec::with_capacity(examples.len());
    let mut rating_terms = Vec::with_capacity(examples.len());
    let mut user_embeddings = Vec::with_capacity(examples.len());
    let (mut n_tokens, mut n_context) = (0usize, 0usize);
    for ex in examples {
        let out = model.forward(tape, ex.context, &ex.input(), noise.as_deref_mut())?;
        let targets = ex.targets();
        let idx: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        token_terms.push(out.log_probs.pick(&idx)?.sum());
        n_tokens += idx.len();
        if !ex.words.is_empty() {
            let cidx: Vec<(usize, usize)> = ex.words.iter().map(|&w| (0, w)).collect();
            context_terms.push(out.context_log_probs.pick(&cidx)?.sum());
            n_context += cidx.len();
        }
        let err = out.rating.affine(1.0, -ex.rating);
        rating_terms.push(err.mul(err)?);
        user_embeddings.push(out.user_embedding);
    }
    let nll = sum_scalars(tape, &token_terms)?.scale(-1.0 / n_tokens as f64);
    let context = sum_scalars(tape, &context_terms)?.scale(-1.0 / n_context.max(1) as f64);
    let rating_mse = sum_scalars(tape, &rating_terms)?.scale(1.0 / examples.len() as f64);
    let mut total = nll.scale(weights.nll);
    if weights.context != 0.0 {
        total = total.add(context.scale(weights.context))?;
    }
    if weights.rating != 0.0 {
        total = total.add(rating_mse.scale(weights.rating))?;
    }
    Ok(BatchLoss {
        nll,
        context,
        rating_mse,
        total,
        user_embeddings,
    })
}
