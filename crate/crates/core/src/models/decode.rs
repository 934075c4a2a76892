use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{recurrent, transformer, Context, GeneratorModel};
use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::numerics::rows;

pub(crate) enum Decoder<'m> {
    Transformer(transformer::Incremental<'m>),
    Recurrent(recurrent::Incremental<'m>),
}

impl Decoder<'_> {
    pub(crate) fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        match self {
            Decoder::Transformer(d) => d.step(token),
            Decoder::Recurrent(d) => d.step(token),
        }
    }
}

/// A decoded explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    /// Word ids without markers.
    pub tokens: Vec<usize>,
    /// Whether decoding stopped at the end marker rather than the length cap.
    pub ended: bool,
    /// `Σ_t log p(token_t)` under the full model distribution, including the
    /// end marker when emitted.
    pub log_prob: f64,
}

impl Sampled {
    /// Next-token targets for a teacher-forced replay.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.ended {
            t.push(EOS_ID);
        }
        t
    }

    /// Decoder input for a teacher-forced replay, aligned with [`Self::targets`].
    pub fn input(&self) -> Vec<usize> {
        let mut v = vec![BOS_ID];
        let n = if self.ended { self.tokens.len() } else { self.tokens.len().saturating_sub(1) };
        v.extend_from_slice(&self.tokens[..n]);
        v
    }
}

/// Picks among the `k` highest logits (ties to the lower id) using one
/// uniform draw `u ∈ [0, 1)` against their renormalized probabilities.
pub fn top_k_pick(logits: &[f64], k: usize, u: f64) -> Result<usize> {
    if k == 0 {
        return Err(Error::Contract("top-k sampling needs k >= 1".into()));
    }
    if logits.is_empty() || logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("logits empty or NaN".into()));
    }
    let k = k.min(logits.len());
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in logits.iter().enumerate() {
        let pos = best.iter().position(|&j| v > logits[j]).unwrap_or(best.len());
        if pos < k {
            best.insert(pos, i);
            best.truncate(k);
        }
    }
    let max = logits[best[0]];
    let weights: Vec<f64> = best.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (&i, w) in best.iter().zip(&weights) {
        acc += w / total;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*best.last().expect("k >= 1"))
}

/// Top-k sampling; consumes exactly one uniform draw per emitted token.
pub fn sample_with_log_prob(
    model: &GeneratorModel,
    ctx: Context,
    k: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sampled> {
    let max_len = max_len.min(model.config.max_len);
    let mut decoder = model.decoder(ctx)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = BOS_ID;
    let mut ended = false;
    while tokens.len() < max_len {
        let logits = decoder.step(prev)?;
        let tok = top_k_pick(&logits, k, rng.random::<f64>())?;
        log_prob += rows::log_softmax(&logits)[tok];
        if tok == EOS_ID {
            ended = true;
            break;
        }
        tokens.push(tok);
        prev = tok;
    }
    Ok(Sampled {
        tokens,
        ended,
        log_prob,
    })
}

pub fn sample(model: &GeneratorModel, ctx: Context, k: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    Ok(sample_with_log_prob(model, ctx, k, max_len, rng)?.tokens)
}
