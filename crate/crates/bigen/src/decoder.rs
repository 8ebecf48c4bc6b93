//! Multi-modal report decoder: masked self-attention over generated
//! tokens, cross-attention to the fused encoder memory, greedy and beam
//! generation.
//!
//! The same decoder serves both memory shapes: the two-token fused
//! representation of the full model and the M-token sequence of the
//! self-attention baseline.

use crate::encoder::{attention_block, ffn_block, make_attn_params, make_ffn_params, AttnMemory, AttnParams, FfnParams};
use crate::error::Error;
use crate::tensor::{Graph, LeafCache, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub layers: Vec<DecoderLayer>,
    pub embed: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub bos: u32,
    pub eos: u32,
}

impl DecoderModel {
    pub fn build<T: Scalar>(
        layers: usize,
        heads: usize,
        dim: usize,
        ffn_mult: usize,
        vocab_size: usize,
        bos: u32,
        eos: u32,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> crate::Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Usage(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        if vocab_size == 0 || layers == 0 {
            return Err(Error::Usage("decoder needs a vocabulary and at least 1 layer".into()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let hidden = dim * ffn_mult;
        let layers = (0..layers)
            .map(|l| DecoderLayer {
                self_attn: make_attn_params(store, &format!("dec.{l}.self"), dim, rng),
                cross_attn: make_attn_params(store, &format!("dec.{l}.cross"), dim, rng),
                ffn: make_ffn_params(store, &format!("dec.{l}.ffn"), dim, hidden, rng),
            })
            .collect();
        Ok(DecoderModel {
            layers,
            embed: store.add_uniform("dec.embed", vec![vocab_size, dim], bound, rng),
            out_w: store.add_uniform("dec.out_proj.w", vec![dim, vocab_size], bound, rng),
            out_b: store.add_zeros("dec.out_proj.b", vec![1, vocab_size]),
            final_ln_g: store.add_ones("dec.final_ln_g", vec![1, dim]),
            final_ln_b: store.add_zeros("dec.final_ln_b", vec![1, dim]),
            dim,
            heads,
            vocab_size,
            bos,
            eos,
        })
    }
}

/// Sinusoidal position encodings for `n` positions of width `d`. Report
/// word order matters even though patches are unordered, so the decoder
/// adds these to its token embeddings.
fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64(v));
        }
    }
    Tensor::new(vec![n, d], data).expect("positional encoding shape")
}

fn causal_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            mask[i * n + j] = true;
        }
    }
    mask
}

/// Decoder stack over an explicit input sequence; row i of the output
/// logits scores the token following `seq[i]`.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &DecoderModel,
    memory: Var,
    seq: &[u32],
) -> crate::Result<Var> {
    if seq.is_empty() {
        return Err(Error::Data("decoder input sequence is empty".into()));
    }
    let n = seq.len();
    let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
    let embed = cache.leaf(g, store, model.embed);
    let tok = g.embedding(embed, &ids)?;
    let pos = g.constant(positional_encoding::<T>(n, model.dim));
    let mut x = g.add(tok, pos)?;

    let mask = causal_mask(n);
    for layer in &model.layers {
        let (s_out, _) = attention_block(
            g,
            cache,
            store,
            &layer.self_attn,
            model.heads,
            x,
            AttnMemory::SelfAttend,
            Some(&mask),
        )?;
        x = g.add(x, s_out)?;
        let (c_out, _) = attention_block(
            g,
            cache,
            store,
            &layer.cross_attn,
            model.heads,
            x,
            AttnMemory::Cross(memory),
            None,
        )?;
        x = g.add(x, c_out)?;
        let f = ffn_block(g, cache, store, &layer.ffn, x)?;
        x = g.add(x, f)?;
    }
    let ln_g = cache.leaf(g, store, model.final_ln_g);
    let ln_b = cache.leaf(g, store, model.final_ln_b);
    let x = g.layer_norm(x, ln_g, ln_b)?;
    let ow = cache.leaf(g, store, model.out_w);
    let ob = cache.leaf(g, store, model.out_b);
    let logits = g.matmul(x, ow)?;
    Ok(g.add_row(logits, ob)?)
}

/// Teacher-forced logits for a full target sequence `[BOS, w_1..w_k, EOS]`.
/// Returns `len - 1` rows; row i scores target position i + 1, computed
/// from strictly earlier target tokens.
pub fn decode_teacher_forced<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &DecoderModel,
    memory: Var,
    target: &[u32],
) -> crate::Result<Var> {
    if target.len() < 2 {
        return Err(Error::Data(format!(
            "teacher forcing needs BOS plus at least one target token, got {} tokens",
            target.len()
        )));
    }
    if target[0] != model.bos {
        return Err(Error::Data("target must begin with BOS".into()));
    }
    decoder_forward(g, cache, store, model, memory, &target[..target.len() - 1])
}

fn last_row_log_probs<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
) -> crate::Result<Vec<f64>> {
    let lp = g.log_softmax(logits)?;
    let t = g.value(lp);
    let (n, v) = t.rows_cols();
    Ok(t.data()[(n - 1) * v..].iter().map(|&x| x.to_f64()).collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values[best];
    best
}

/// Greedy decoding: argmax token per step (ties toward the lower id),
/// stopping at EOS or after `max_len` generated tokens. The returned
/// sequence excludes BOS and includes EOS when produced.
pub fn generate_greedy<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &DecoderModel,
    memory: Var,
    max_len: usize,
) -> crate::Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let mut seq = vec![model.bos];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = decoder_forward(g, cache, store, model, memory, &seq)?;
        let lp = last_row_log_probs(g, logits)?;
        let token = argmax(&lp) as u32;
        seq.push(token);
        out.push(token);
        if token == model.eos {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Cumulative log-prob divided by generated token count.
    fn normalized(&self) -> f64 {
        self.log_prob / self.generated().max(1) as f64
    }
}

/// Beam search with length-normalized final ranking. `beam = 1` matches
/// greedy decoding token for token.
pub fn generate_beam<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &DecoderModel,
    memory: Var,
    beam: usize,
    max_len: usize,
) -> crate::Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: vec![model.bos],
        log_prob: 0.0,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (total log-prob, parent index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * 8);
        for (idx, hyp) in live.iter().enumerate() {
            let logits = decoder_forward(g, cache, store, model, memory, &hyp.tokens)?;
            let lp = last_row_log_probs(g, logits)?;
            for (token, &tok_lp) in lp.iter().enumerate() {
                candidates.push((hyp.log_prob + tok_lp, idx, token as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.2.cmp(&b.2))
                .then_with(|| a.1.cmp(&b.1))
        });
        // Top `beam` expansions; an EOS expansion consumes its slot and
        // retires to the completed set.
        let mut next_live = Vec::with_capacity(beam);
        for &(score, parent, token) in candidates.iter().take(beam) {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(token);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
            };
            if token == model.eos {
                completed.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }
    completed.extend(live);
    let mut best: Option<&Hypothesis> = None;
    for h in &completed {
        if best.map_or(true, |b| h.normalized() > b.normalized()) {
            best = Some(h);
        }
    }
    let best =
        best.ok_or_else(|| Error::Numeric("beam search produced no hypotheses".into()))?;
    Ok(best.tokens[1..].to_vec())
}

/// Per-token log-probabilities of `tokens` (BOS excluded) under the model.
pub fn score_sequence<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &DecoderModel,
    memory: Var,
    tokens: &[u32],
) -> crate::Result<Vec<f64>> {
    let mut full = vec![model.bos];
    full.extend_from_slice(tokens);
    let logits = decoder_forward(g, cache, store, model, memory, &full[..full.len() - 1])?;
    let lp = g.log_softmax(logits)?;
    let t = g.value(lp);
    let (_, v) = t.rows_cols();
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| t.data()[i * v + tok as usize].to_f64())
        .collect())
}
