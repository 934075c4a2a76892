use rand_chacha::ChaCha8Rng;

use super::{special_rows, Context, GeneratorModel, ModelConfig, Outputs};
use crate::error::Result;
use crate::numerics::{dropout, rows, uniform, Axis, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub(crate) struct RecurrentWeights {
    init_w: ParamId,
    init_b: ParamId,
    /// `d × 3H` input projections for the update, reset and candidate parts.
    input_w: ParamId,
    input_b: ParamId,
    /// `H × 2H` recurrent projections for the update and reset gates.
    gates_u: ParamId,
    cand_u: ParamId,
    word_w: ParamId,
    word_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    rate_w1: ParamId,
    rate_b1: ParamId,
    rate_w2: ParamId,
    rate_b2: ParamId,
}

fn concat_width(cfg: &ModelConfig) -> usize {
    2 * cfg.emb_dim + if cfg.use_attribute_token { cfg.attr_dim } else { 0 }
}

impl RecurrentWeights {
    pub(crate) fn build(cfg: &ModelConfig, vocab: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, s) = (cfg.emb_dim, cfg.hidden_dim, cfg.init_scale);
        let c = concat_width(cfg);
        let mut u = |name: &str, r: usize, cols: usize| params.insert(name, uniform(r, cols, s, rng));
        let init_w = u("rnn.init", c, h);
        let input_w = u("rnn.input", d, 3 * h);
        let gates_u = u("rnn.recur_gates", h, 2 * h);
        let cand_u = u("rnn.recur_cand", h, h);
        let word_w = u("head.word", h, vocab);
        let ctx_w = u("head.context", h, vocab);
        let rate_w1 = u("head.rating.hidden", c, cfg.ffn_dim);
        let rate_w2 = u("head.rating.out", cfg.ffn_dim, 1);
        let mut z = |name: &str, cols: usize| params.insert(name, Tensor::zeros(1, cols));
        Self {
            init_w,
            init_b: z("rnn.init_bias", h),
            input_w,
            input_b: z("rnn.input_bias", 3 * h),
            gates_u,
            cand_u,
            word_w,
            word_b: z("head.word_bias", vocab),
            ctx_w,
            ctx_b: z("head.context_bias", vocab),
            rate_w1,
            rate_b1: z("head.rating.hidden_bias", cfg.ffn_dim),
            rate_w2,
            rate_b2: z("head.rating.out_bias", 1),
        }
    }
}

fn user_concat<'t>(model: &GeneratorModel, tape: &'t Tape, ctx: Context) -> Result<(Var<'t>, Var<'t>)> {
    let (attr, user, item) = special_rows(model, tape, ctx)?;
    let mut parts = Vec::with_capacity(3);
    parts.extend(attr);
    parts.extend([user, item]);
    Ok((tape.concat_cols(&parts)?, user))
}

pub(crate) fn forward<'t>(
    model: &GeneratorModel,
    w: &RecurrentWeights,
    tape: &'t Tape,
    ctx: Context,
    input: &[usize],
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<Outputs<'t>> {
    let cfg = &model.config;
    let hd = cfg.hidden_dim;
    let p = |id| tape.param(&model.params, id);
    let (joint, user) = user_concat(model, tape, ctx)?;

    let rating = joint
        .matmul(p(w.rate_w1))?
        .add_row(p(w.rate_b1))?
        .tanh()
        .matmul(p(w.rate_w2))?
        .add_row(p(w.rate_b2))?;
    let h0 = joint.matmul(p(w.init_w))?.add_row(p(w.init_b))?.tanh();
    let context_log_probs = h0.matmul(p(w.ctx_w))?.add_row(p(w.ctx_b))?.log_softmax(Axis::Cols)?;

    let words = tape.gather(p(model.emb.word), input)?;
    let words = dropout(words, cfg.dropout, noise.as_deref_mut())?;
    let projected = words.matmul(p(w.input_w))?.add_row(p(w.input_b))?;
    let (gates_u, cand_u) = (p(w.gates_u), p(w.cand_u));
    let mut h = h0;
    let mut states = Vec::with_capacity(input.len());
    for t in 0..input.len() {
        let xt = projected.slice_rows(t, 1)?;
        let hg = h.matmul(gates_u)?;
        let z = xt.slice_cols(0, hd)?.add(hg.slice_cols(0, hd)?)?.sigmoid();
        let r = xt.slice_cols(hd, hd)?.add(hg.slice_cols(hd, hd)?)?.sigmoid();
        let n = xt.slice_cols(2 * hd, hd)?.add(r.mul(h)?.matmul(cand_u)?)?.tanh();
        h = n.add(z.mul(h.sub(n)?)?)?;
        states.push(h);
    }
    let hidden = dropout(tape.concat_rows(&states)?, cfg.dropout, noise)?;
    let logits = hidden.matmul(p(w.word_w))?.add_row(p(w.word_b))?;
    let log_probs = logits.log_softmax(Axis::Cols)?;
    Ok(Outputs {
        log_probs,
        logits,
        context_log_probs,
        rating,
        user_embedding: user,
    })
}

pub(crate) struct Incremental<'m> {
    model: &'m GeneratorModel,
    w: &'m RecurrentWeights,
    h: Vec<f64>,
    steps: usize,
}

impl<'m> Incremental<'m> {
    pub(crate) fn new(model: &'m GeneratorModel, w: &'m RecurrentWeights, ctx: Context) -> Result<Self> {
        let tape = Tape::inference();
        let (joint, _) = user_concat(model, &tape, ctx)?;
        let h0 = joint
            .matmul(tape.param(&model.params, w.init_w))?
            .add_row(tape.param(&model.params, w.init_b))?
            .tanh();
        Ok(Self {
            model,
            w,
            h: h0.value().data().to_vec(),
            steps: 0,
        })
    }

    pub(crate) fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        if self.steps > self.model.config.max_len {
            return Err(crate::Error::Contract("decoder exceeded max_len".into()));
        }
        let g = |id| self.model.params.get(id);
        let hd = self.model.config.hidden_dim;
        let x = g(self.model.emb.word).row_slice(token);
        let mut xt = rows::vec_mat(x, g(self.w.input_w));
        rows::add_assign(&mut xt, g(self.w.input_b).data());
        let hg = rows::vec_mat(&self.h, g(self.w.gates_u));
        let sigmoid = |v: f64| 0.5 * (0.5 * v).tanh() + 0.5;
        let z: Vec<f64> = (0..hd).map(|j| sigmoid(xt[j] + hg[j])).collect();
        let rh: Vec<f64> = (0..hd).map(|j| sigmoid(xt[hd + j] + hg[hd + j]) * self.h[j]).collect();
        let cand = rows::vec_mat(&rh, g(self.w.cand_u));
        for j in 0..hd {
            let n = (xt[2 * hd + j] + cand[j]).tanh();
            self.h[j] = n + z[j] * (self.h[j] - n);
        }
        self.steps += 1;
        let mut logits = rows::vec_mat(&self.h, g(self.w.word_w));
        rows::add_assign(&mut logits, g(self.w.word_b).data());
        Ok(logits)
    }
}
