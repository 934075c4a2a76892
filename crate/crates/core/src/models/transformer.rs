use rand_chacha::ChaCha8Rng;

use super::{special_rows, Context, GeneratorModel, ModelConfig, Outputs};
use crate::error::Result;
use crate::numerics::{dropout, rows, uniform, Axis, ParamId, ParamStore, Tape, Tensor};

const MASKED: f64 = -1e9;
/// Position-table rows reserved for the attr, user and item tokens.
const SPECIAL_SLOTS: usize = 3;

/// Boolean attention mask: `allowed(r, c)` means row `r` may attend to `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> Vec<u8> {
        (0..self.n).map(|c| self.allowed(row, c) as u8).collect()
    }

    /// Blocks attention to `col` from every row except `col` itself.
    pub fn block_column(&mut self, col: usize) {
        for r in 0..self.n {
            if r != col {
                self.allowed[r * self.n + col] = false;
            }
        }
    }

    fn additive(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASKED }).collect();
        Tensor::new(self.n, self.n, data).expect("square")
    }
}

/// Specials see each other; word `t` sees every special and words `≤ t`.
pub fn prefix_mask(n_special: usize, n_words: usize) -> AttentionMask {
    let n = n_special + n_words;
    let mut allowed = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            allowed[r * n + c] = if r < n_special {
                c < n_special
            } else {
                c < n_special || c <= r
            };
        }
    }
    AttentionMask { n, allowed }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerWeights {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerWeights {
    pos: ParamId,
    layers: Vec<LayerWeights>,
    word_w: ParamId,
    word_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    rate_w1: ParamId,
    rate_b1: ParamId,
    rate_w2: ParamId,
    rate_b2: ParamId,
}

impl TransformerWeights {
    pub(crate) fn build(cfg: &ModelConfig, vocab: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (d, f, s) = (cfg.emb_dim, cfg.ffn_dim, cfg.init_scale);
        let pos = params.insert("pos", uniform(SPECIAL_SLOTS + cfg.max_len + 1, d, s, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut w = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
                    params.insert(format!("layer{l}.{name}"), uniform(r, c, s, rng))
                };
                let wq = w("attn.q", d, d, rng);
                let wk = w("attn.k", d, d, rng);
                let wv = w("attn.v", d, d, rng);
                let wo = w("attn.out", d, d, rng);
                let w1 = w("ffn.in", d, f, rng);
                let w2 = w("ffn.out", f, d, rng);
                let mut c = |name: &str, cols: usize, v: f64| {
                    params.insert(format!("layer{l}.{name}"), Tensor::filled(1, cols, v))
                };
                LayerWeights {
                    wq,
                    wk,
                    wv,
                    wo,
                    bo: c("attn.out_bias", d, 0.0),
                    ln1_g: c("norm1.gain", d, 1.0),
                    ln1_b: c("norm1.bias", d, 0.0),
                    w1,
                    b1: c("ffn.in_bias", f, 0.0),
                    w2,
                    b2: c("ffn.out_bias", d, 0.0),
                    ln2_g: c("norm2.gain", d, 1.0),
                    ln2_b: c("norm2.bias", d, 0.0),
                }
            })
            .collect();
        Self {
            pos,
            layers,
            word_w: params.insert("head.word", uniform(d, vocab, s, rng)),
            word_b: params.insert("head.word_bias", Tensor::zeros(1, vocab)),
            ctx_w: params.insert("head.context", uniform(d, vocab, s, rng)),
            ctx_b: params.insert("head.context_bias", Tensor::zeros(1, vocab)),
            rate_w1: params.insert("head.rating.hidden", uniform(d, d, s, rng)),
            rate_b1: params.insert("head.rating.hidden_bias", Tensor::zeros(1, d)),
            rate_w2: params.insert("head.rating.out", uniform(d, 1, s, rng)),
            rate_b2: params.insert("head.rating.out_bias", Tensor::zeros(1, 1)),
        }
    }
}

/// Position-table rows for the special slots actually present.
fn special_slots(has_attr: bool) -> Vec<usize> {
    if has_attr {
        vec![0, 1, 2]
    } else {
        vec![1, 2]
    }
}

pub(crate) fn mask_for(model: &GeneratorModel, n_words: usize) -> AttentionMask {
    let n_special = if model.has_attribute_token() { 3 } else { 2 };
    let mut mask = prefix_mask(n_special, n_words);
    if model.attribute_masked() && model.has_attribute_token() {
        mask.block_column(0);
    }
    mask
}

pub(crate) fn forward<'t>(
    model: &GeneratorModel,
    w: &TransformerWeights,
    tape: &'t Tape,
    ctx: Context,
    input: &[usize],
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<Outputs<'t>> {
    let cfg = &model.config;
    let p = |id| tape.param(&model.params, id);
    let (attr, user, item) = special_rows(model, tape, ctx)?;
    let words = tape.gather(p(model.emb.word), input)?;

    let mut slots = special_slots(attr.is_some());
    let n_special = slots.len();
    let user_row = n_special - 2;
    let item_row = n_special - 1;
    slots.extend((0..input.len()).map(|t| SPECIAL_SLOTS + t));
    let mut parts = Vec::with_capacity(4);
    parts.extend(attr);
    parts.extend([user, item, words]);
    let x = tape.concat_rows(&parts)?.add(tape.gather(p(w.pos), &slots)?)?;
    let mut x = dropout(x, cfg.dropout, noise.as_deref_mut())?;

    let mask = tape.constant(mask_for(model, input.len()).additive());
    let dh = cfg.emb_dim / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for lw in &w.layers {
        let q = x.matmul(p(lw.wq))?;
        let k = x.matmul(p(lw.wk))?;
        let v = x.matmul(p(lw.wv))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qh, kh, vh) = (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?);
            let scores = qh.matmul_t(kh)?.scale(inv_sqrt).add(mask)?;
            heads.push(scores.softmax(Axis::Cols)?.matmul(vh)?);
        }
        let att = tape.concat_cols(&heads)?.matmul(p(lw.wo))?.add_row(p(lw.bo))?;
        let att = dropout(att, cfg.dropout, noise.as_deref_mut())?;
        x = x.add(att)?.layer_norm(p(lw.ln1_g), p(lw.ln1_b))?;
        let hidden = x.matmul(p(lw.w1))?.add_row(p(lw.b1))?.relu();
        let hidden = dropout(hidden, cfg.dropout, noise.as_deref_mut())?;
        let ff = hidden.matmul(p(lw.w2))?.add_row(p(lw.b2))?;
        let ff = dropout(ff, cfg.dropout, noise.as_deref_mut())?;
        x = x.add(ff)?.layer_norm(p(lw.ln2_g), p(lw.ln2_b))?;
    }

    let word_h = x.slice_rows(n_special, input.len())?;
    let logits = word_h.matmul(p(w.word_w))?.add_row(p(w.word_b))?;
    let log_probs = logits.log_softmax(Axis::Cols)?;
    let context_log_probs = x
        .slice_rows(item_row, 1)?
        .matmul(p(w.ctx_w))?
        .add_row(p(w.ctx_b))?
        .log_softmax(Axis::Cols)?;
    let rating = x
        .slice_rows(user_row, 1)?
        .matmul(p(w.rate_w1))?
        .add_row(p(w.rate_b1))?
        .tanh()
        .matmul(p(w.rate_w2))?
        .add_row(p(w.rate_b2))?;
    Ok(Outputs {
        log_probs,
        logits,
        context_log_probs,
        rating,
        user_embedding: user,
    })
}

/// Key/value cache decoder. Special rows never attend to words, so their
/// per-layer keys and values are computed once; each new word adds one row.
pub(crate) struct Incremental<'m> {
    model: &'m GeneratorModel,
    w: &'m TransformerWeights,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    /// Cache rows a word may attend to besides the earlier words.
    visible_specials: Vec<usize>,
    n_special: usize,
    n_words: usize,
}

impl<'m> Incremental<'m> {
    pub(crate) fn new(model: &'m GeneratorModel, w: &'m TransformerWeights, ctx: Context) -> Result<Self> {
        let tape = Tape::inference();
        let (attr, user, item) = special_rows(model, &tape, ctx)?;
        let slots = special_slots(attr.is_some());
        let n_special = slots.len();
        let mut parts = Vec::new();
        parts.extend(attr);
        parts.extend([user, item]);
        let pos = tape.gather(tape.param(&model.params, w.pos), &slots)?;
        let x0 = tape.concat_rows(&parts)?.add(pos)?.value();
        let mut x: Vec<Vec<f64>> = (0..n_special).map(|r| x0.row_slice(r).to_vec()).collect();

        let mask = mask_for(model, 0);
        let mut keys = Vec::with_capacity(w.layers.len());
        let mut values = Vec::with_capacity(w.layers.len());
        for lw in &w.layers {
            let (k, v): (Vec<_>, Vec<_>) = x
                .iter()
                .map(|row| (rows::vec_mat(row, model.params.get(lw.wk)), rows::vec_mat(row, model.params.get(lw.wv))))
                .unzip();
            let next = x
                .iter()
                .enumerate()
                .map(|(r, row)| {
                    let visible: Vec<usize> = (0..n_special).filter(|&c| mask.allowed(r, c)).collect();
                    layer_row(model, lw, row, &k, &v, &visible)
                })
                .collect();
            keys.push(k);
            values.push(v);
            x = next;
        }
        let word_mask = mask_for(model, 1);
        let visible_specials = (0..n_special).filter(|&c| word_mask.allowed(n_special, c)).collect();
        Ok(Self {
            model,
            w,
            keys,
            values,
            visible_specials,
            n_special,
            n_words: 0,
        })
    }

    /// Feeds `token` at the next word position; returns next-token logits.
    pub(crate) fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let t = self.n_words;
        if t > model.config.max_len {
            return Err(crate::Error::Contract("decoder exceeded max_len".into()));
        }
        let mut x = model.params.get(model.emb.word).row_slice(token).to_vec();
        rows::add_assign(&mut x, model.params.get(self.w.pos).row_slice(SPECIAL_SLOTS + t));
        let mut visible = self.visible_specials.clone();
        visible.extend(self.n_special..self.n_special + t + 1);
        for (l, lw) in self.w.layers.iter().enumerate() {
            self.keys[l].push(rows::vec_mat(&x, model.params.get(lw.wk)));
            self.values[l].push(rows::vec_mat(&x, model.params.get(lw.wv)));
            x = layer_row(model, lw, &x, &self.keys[l], &self.values[l], &visible);
        }
        self.n_words += 1;
        let mut logits = rows::vec_mat(&x, model.params.get(self.w.word_w));
        rows::add_assign(&mut logits, model.params.get(self.w.word_b).data());
        Ok(logits)
    }
}

/// One post-norm encoder layer applied to a single row.
fn layer_row(
    model: &GeneratorModel,
    lw: &LayerWeights,
    x: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    visible: &[usize],
) -> Vec<f64> {
    let cfg = &model.config;
    let g = |id| model.params.get(id);
    let d = cfg.emb_dim;
    let dh = d / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q = rows::vec_mat(x, g(lw.wq));
    let mut heads = vec![0.0; d];
    for h in 0..cfg.heads {
        let span = h * dh..(h + 1) * dh;
        let mut scores: Vec<f64> = visible
            .iter()
            .map(|&c| rows::dot(&q[span.clone()], &keys[c][span.clone()]) * inv_sqrt)
            .collect();
        rows::softmax(&mut scores);
        for (&c, wgt) in visible.iter().zip(&scores) {
            for (o, v) in heads[span.clone()].iter_mut().zip(&values[c][span.clone()]) {
                *o += wgt * v;
            }
        }
    }
    let mut att = rows::vec_mat(&heads, g(lw.wo));
    rows::add_assign(&mut att, g(lw.bo).data());
    rows::add_assign(&mut att, x);
    rows::layer_norm(&mut att, g(lw.ln1_g).data(), g(lw.ln1_b).data());
    let mut hidden = rows::vec_mat(&att, g(lw.w1));
    rows::add_assign(&mut hidden, g(lw.b1).data());
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = rows::vec_mat(&hidden, g(lw.w2));
    rows::add_assign(&mut out, g(lw.b2).data());
    rows::add_assign(&mut out, &att);
    rows::layer_norm(&mut out, g(lw.ln2_g).data(), g(lw.ln2_b).data());
    out
}
