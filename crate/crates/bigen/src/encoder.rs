//! Bi-modal concurrent learning encoder.
//!
//! The visual branch refines a single learnable token over all patch
//! features through L cross-attention layers (VTCA). Layer-1 attention
//! drives knowledge retrieval; the knowledge branch refines a learnable
//! textual token over the retrieved features for L-1 layers (TTCA).
//! Weight sharing is identity-based: with WS the TTCA layer references the
//! VTCA layer's parameter slots, with WSL all layers of a branch reference
//! one slot set, so a shared parameter is one storage cell, one optimizer
//! slot, and one graph leaf per pass.

use crate::bank::KnowledgeBank;
use crate::corpus::Case;
use crate::error::Error;
use crate::retrieval::{retrieve_all, RetrievalConfig, RetrievedKnowledge};
use crate::tensor::{Graph, LeafCache, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Encoder depth L; TTCA runs L-1 layers.
    pub layers: usize,
    pub heads: usize,
    /// Model width d.
    pub dim: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Weight sharing between the visual and knowledge branches.
    pub ws: bool,
    /// Weight sharing across layers within each branch.
    pub wsl: bool,
    pub vtca: bool,
    pub kr: bool,
    pub ttca: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            heads: 4,
            dim: 512,
            ffn_mult: 2,
            ws: true,
            wsl: true,
            vtca: true,
            kr: true,
            ttca: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Usage("dim, heads, and ffn_mult must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Usage(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.ttca && !self.kr {
            return Err(Error::Usage("ttca requires kr".into()));
        }
        if self.kr && !self.vtca {
            return Err(Error::Usage(
                "kr requires vtca (selection needs layer-1 attention)".into(),
            ));
        }
        if self.vtca && self.layers == 0 {
            return Err(Error::Usage("vtca requires at least 1 layer".into()));
        }
        if self.ttca && self.layers < 2 {
            return Err(Error::Usage(
                "ttca requires at least 2 layers (it runs L-1 of them)".into(),
            ));
        }
        Ok(())
    }
}

// ── shared transformer building blocks ───────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttnLayer {
    pub attn: AttnParams,
    pub ffn: FfnParams,
}

pub fn make_attn_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    rng: &mut impl Rng,
) -> AttnParams {
    let bound = 1.0 / (dim as f64).sqrt();
    AttnParams {
        wq: store.add_uniform(format!("{prefix}.wq"), vec![dim, dim], bound, rng),
        wk: store.add_uniform(format!("{prefix}.wk"), vec![dim, dim], bound, rng),
        wv: store.add_uniform(format!("{prefix}.wv"), vec![dim, dim], bound, rng),
        wo: store.add_uniform(format!("{prefix}.wo"), vec![dim, dim], bound, rng),
        bo: store.add_zeros(format!("{prefix}.bo"), vec![1, dim]),
        ln_g: store.add_ones(format!("{prefix}.ln_g"), vec![1, dim]),
        ln_b: store.add_zeros(format!("{prefix}.ln_b"), vec![1, dim]),
    }
}

pub fn make_ffn_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> FfnParams {
    let bound = 1.0 / (dim as f64).sqrt();
    FfnParams {
        w1: store.add_uniform(format!("{prefix}.w1"), vec![dim, hidden], bound, rng),
        b1: store.add_zeros(format!("{prefix}.b1"), vec![1, hidden]),
        w2: store.add_uniform(format!("{prefix}.w2"), vec![hidden, dim], bound, rng),
        b2: store.add_zeros(format!("{prefix}.b2"), vec![1, dim]),
        ln_g: store.add_ones(format!("{prefix}.ln_g"), vec![1, dim]),
        ln_b: store.add_zeros(format!("{prefix}.ln_b"), vec![1, dim]),
    }
}

pub fn make_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    ffn_hidden: usize,
    rng: &mut impl Rng,
) -> CrossAttnLayer {
    CrossAttnLayer {
        attn: make_attn_params(store, &format!("{prefix}.attn"), dim, rng),
        ffn: make_ffn_params(store, &format!("{prefix}.ffn"), dim, ffn_hidden, rng),
    }
}

/// Attention memory source: the block's own (normalized) input, or an
/// external sequence.
#[derive(Clone, Copy)]
pub enum AttnMemory {
    SelfAttend,
    Cross(Var),
}

/// Pre-norm multi-head attention. Normalizes the query stream, projects
/// q/k/v, runs scaled dot-product attention per head, and projects the
/// concatenated heads. Returns the block output (residual not added) and
/// the head-averaged attention weights `(nq, nk)`.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    p: &AttnParams,
    heads: usize,
    query_raw: Var,
    memory: AttnMemory,
    mask: Option<&[bool]>,
) -> crate::Result<(Var, Var)> {
    let ln_g = cache.leaf(g, store, p.ln_g);
    let ln_b = cache.leaf(g, store, p.ln_b);
    let qn = g.layer_norm(query_raw, ln_g, ln_b)?;
    let mem = match memory {
        AttnMemory::SelfAttend => qn,
        AttnMemory::Cross(m) => m,
    };
    let wq = cache.leaf(g, store, p.wq);
    let wk = cache.leaf(g, store, p.wk);
    let wv = cache.leaf(g, store, p.wv);
    let q_full = g.matmul(qn, wq)?;
    let k_full = g.matmul(mem, wk)?;
    let v_full = g.matmul(mem, wv)?;

    let d = g.value(q_full).rows_cols().1;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn_sum: Option<Var> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q_full, h * dh, dh)?;
        let kh = g.slice_cols(k_full, h * dh, dh)?;
        let vh = g.slice_cols(v_full, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = match mask {
            Some(m) => g.masked_fill_neg(scores, m)?,
            None => scores,
        };
        let attn = g.softmax(scores)?;
        attn_sum = Some(match attn_sum {
            Some(acc) => g.add(acc, attn)?,
            None => attn,
        });
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    let wo = cache.leaf(g, store, p.wo);
    let bo = cache.leaf(g, store, p.bo);
    let projected = g.matmul(concat, wo)?;
    let out = g.add_row(projected, bo)?;
    let attn_avg = g.scale(
        attn_sum.expect("at least one head"),
        T::from_f64(1.0 / heads as f64),
    )?;
    Ok((out, attn_avg))
}

/// Pre-norm feed-forward block (residual not added).
pub fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    p: &FfnParams,
    x: Var,
) -> crate::Result<Var> {
    let ln_g = cache.leaf(g, store, p.ln_g);
    let ln_b = cache.leaf(g, store, p.ln_b);
    let xn = g.layer_norm(x, ln_g, ln_b)?;
    let w1 = cache.leaf(g, store, p.w1);
    let b1 = cache.leaf(g, store, p.b1);
    let w2 = cache.leaf(g, store, p.w2);
    let b2 = cache.leaf(g, store, p.b2);
    let h = g.matmul(xn, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w2)?;
    Ok(g.add_row(out, b2)?)
}

/// One encoder layer: attention + residual, feed-forward + residual.
pub fn prenorm_layer<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    layer: &CrossAttnLayer,
    heads: usize,
    x: Var,
    memory: AttnMemory,
    mask: Option<&[bool]>,
) -> crate::Result<(Var, Var)> {
    let (attn_out, attn_avg) =
        attention_block(g, cache, store, &layer.attn, heads, x, memory, mask)?;
    let mid = g.add(x, attn_out)?;
    let f = ffn_block(g, cache, store, &layer.ffn, mid)?;
    let out = g.add(mid, f)?;
    Ok((out, attn_avg))
}

// ── encoder model ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub retrieval: RetrievalConfig,
    pub patch_proj_w: ParamId,
    pub patch_proj_b: ParamId,
    pub knowledge_proj: Option<(ParamId, ParamId)>,
    pub v0: Option<ParamId>,
    pub t0: Option<ParamId>,
    /// L entries when vtca; entries alias one slot set under WSL.
    pub vtca_layers: Vec<CrossAttnLayer>,
    /// L-1 entries when ttca; alias the VTCA entries under WS.
    pub ttca_layers: Vec<CrossAttnLayer>,
    /// L entries when vtca is off (vanilla self-attention stack).
    pub self_attn_layers: Vec<CrossAttnLayer>,
}

impl EncoderModel {
    pub fn build<T: Scalar>(
        cfg: EncoderConfig,
        retrieval: RetrievalConfig,
        d_in: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> crate::Result<Self> {
        cfg.validate()?;
        retrieval.validate()?;
        let d = cfg.dim;
        let hidden = d * cfg.ffn_mult;
        let bound = 1.0 / (d as f64).sqrt();

        let patch_proj_w = store.add_uniform("enc.patch_proj.w", vec![d_in, d], bound, rng);
        let patch_proj_b = store.add_zeros("enc.patch_proj.b", vec![1, d]);

        let mut model = EncoderModel {
            cfg,
            retrieval,
            patch_proj_w,
            patch_proj_b,
            knowledge_proj: None,
            v0: None,
            t0: None,
            vtca_layers: Vec::new(),
            ttca_layers: Vec::new(),
            self_attn_layers: Vec::new(),
        };

        if cfg.vtca {
            model.v0 = Some(store.add_uniform("enc.v0", vec![1, d], bound, rng));
            if cfg.wsl {
                let shared = make_layer(store, "enc.vtca.shared", d, hidden, rng);
                model.vtca_layers = vec![shared; cfg.layers];
            } else {
                model.vtca_layers = (0..cfg.layers)
                    .map(|l| make_layer(store, &format!("enc.vtca.{l}"), d, hidden, rng))
                    .collect();
            }
            if cfg.kr {
                model.knowledge_proj = Some((
                    store.add_uniform("enc.knowledge_proj.w", vec![d_in, d], bound, rng),
                    store.add_zeros("enc.knowledge_proj.b", vec![1, d]),
                ));
            }
            if cfg.ttca {
                model.t0 = Some(store.add_uniform("enc.t0", vec![1, d], bound, rng));
                model.ttca_layers = if cfg.ws {
                    model.vtca_layers[..cfg.layers - 1].to_vec()
                } else if cfg.wsl {
                    let shared = make_layer(store, "enc.ttca.shared", d, hidden, rng);
                    vec![shared; cfg.layers - 1]
                } else {
                    (0..cfg.layers - 1)
                        .map(|l| make_layer(store, &format!("enc.ttca.{l}"), d, hidden, rng))
                        .collect()
                };
            }
        } else {
            model.self_attn_layers = if cfg.wsl && cfg.layers > 0 {
                let shared = make_layer(store, "enc.self.shared", d, hidden, rng);
                vec![shared; cfg.layers]
            } else {
                (0..cfg.layers)
                    .map(|l| make_layer(store, &format!("enc.self.{l}"), d, hidden, rng))
                    .collect()
            };
        }
        Ok(model)
    }

    /// Distinct parameter slots referenced by the branch layer stacks.
    pub fn distinct_layer_slots(&self) -> HashSet<ParamId> {
        let mut ids = HashSet::new();
        for layer in self
            .vtca_layers
            .iter()
            .chain(&self.ttca_layers)
            .chain(&self.self_attn_layers)
        {
            for id in layer_param_ids(layer) {
                ids.insert(id);
            }
        }
        ids
    }

    /// Scalar count across the distinct branch-layer slots.
    pub fn distinct_layer_scalars<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.distinct_layer_slots()
            .iter()
            .map(|&id| store.get(id).numel())
            .sum()
    }
}

pub fn layer_param_ids(layer: &CrossAttnLayer) -> [ParamId; 13] {
    [
        layer.attn.wq,
        layer.attn.wk,
        layer.attn.wv,
        layer.attn.wo,
        layer.attn.bo,
        layer.attn.ln_g,
        layer.attn.ln_b,
        layer.ffn.w1,
        layer.ffn.b1,
        layer.ffn.w2,
        layer.ffn.b2,
        layer.ffn.ln_g,
        layer.ffn.ln_b,
    ]
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// Decoder memory: `[V_L; T_{L-1}]`, `[V_L; mean(R)]`, `[V_L]`, or the
    /// baseline's full patch sequence.
    pub memory: Var,
    pub v_final: Option<Var>,
    pub t_final: Option<Var>,
    /// Head-averaged layer-1 attention values (empty for the baseline).
    pub layer1_attention: Vec<f64>,
    /// One attention vector per VTCA layer.
    pub attention_history: Vec<Vec<f64>>,
    pub ttca_layers_run: usize,
    pub retrieved: Option<RetrievedKnowledge>,
}

pub fn rows_to_tensor<T: Scalar>(rows: &[Vec<f32>]) -> crate::Result<Tensor<T>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("cannot build a tensor from zero rows".into()));
    }
    let d = rows[0].len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        data.extend(r.iter().map(|&v| T::from_f32(v)));
    }
    Ok(Tensor::new(vec![n, d], data)?)
}

fn rows_f64_to_tensor<T: Scalar>(rows: &[Vec<f64>]) -> crate::Result<Tensor<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        data.extend(r.iter().map(|&v| T::from_f64(v)));
    }
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Full encoder pass for one case. Dispatches between the bi-modal path
/// and the self-attention baseline based on the config flags.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    store: &ParamStore<T>,
    model: &EncoderModel,
    case: &Case,
    bank: Option<&KnowledgeBank>,
) -> crate::Result<EncoderOutput> {
    if case.num_patches() == 0 {
        return Err(Error::Data(format!("case {} has no patches", case.case_id)));
    }
    let cfg = &model.cfg;
    let x_raw = g.constant(rows_to_tensor::<T>(&case.visual)?);
    let wp = cache.leaf(g, store, model.patch_proj_w);
    let bp = cache.leaf(g, store, model.patch_proj_b);
    let x = g.matmul(x_raw, wp)?;
    let x = g.add_row(x, bp)?;

    if !cfg.vtca {
        let mut seq = x;
        for layer in &model.self_attn_layers {
            let (next, _) = prenorm_layer(
                g,
                cache,
                store,
                layer,
                cfg.heads,
                seq,
                AttnMemory::SelfAttend,
                None,
            )?;
            seq = next;
        }
        return Ok(EncoderOutput {
            memory: seq,
            v_final: None,
            t_final: None,
            layer1_attention: Vec::new(),
            attention_history: Vec::new(),
            ttca_layers_run: 0,
            retrieved: None,
        });
    }

    let mut v = cache.leaf(g, store, model.v0.expect("vtca token"));
    let mut attention_history = Vec::with_capacity(cfg.layers);

    let (v1, attn1) = prenorm_layer(
        g,
        cache,
        store,
        &model.vtca_layers[0],
        cfg.heads,
        v,
        AttnMemory::Cross(x),
        None,
    )?;
    v = v1;
    let layer1_attention: Vec<f64> = g.value(attn1).data().iter().map(|&a| a.to_f64()).collect();
    attention_history.push(layer1_attention.clone());

    // Retrieval consumes layer-1 attention values; selection indices and
    // bank contents carry no gradient.
    let mut retrieved = None;
    let mut r_proj = None;
    if cfg.kr {
        let bank = bank.ok_or_else(|| {
            Error::Data("knowledge retrieval is enabled but no bank was provided".into())
        })?;
        let rk = retrieve_all(&case.retrieval, &layer1_attention, bank, &model.retrieval)?;
        let r_raw = g.constant(rows_f64_to_tensor::<T>(&rk.retrieved)?);
        let (kw, kb) = model.knowledge_proj.expect("kr projection");
        let kw = cache.leaf(g, store, kw);
        let kb = cache.leaf(g, store, kb);
        let r = g.matmul(r_raw, kw)?;
        r_proj = Some(g.add_row(r, kb)?);
        retrieved = Some(rk);
    }

    let mut t_final = None;
    let mut ttca_layers_run = 0;
    if cfg.ttca {
        let r = r_proj.expect("ttca requires kr");
        let mut t = cache.leaf(g, store, model.t0.expect("ttca token"));
        for layer in &model.ttca_layers {
            let (next, _) =
                prenorm_layer(g, cache, store, layer, cfg.heads, t, AttnMemory::Cross(r), None)?;
            t = next;
            ttca_layers_run += 1;
        }
        t_final = Some(t);
    }

    for layer in &model.vtca_layers[1..] {
        let (next, attn) =
            prenorm_layer(g, cache, store, layer, cfg.heads, v, AttnMemory::Cross(x), None)?;
        v = next;
        attention_history.push(g.value(attn).data().iter().map(|&a| a.to_f64()).collect());
    }

    let memory = if let Some(t) = t_final {
        g.concat_rows(&[v, t])?
    } else if let Some(r) = r_proj {
        // KR without TTCA: pool the retrieved rows next to the visual token.
        let pooled = g.mean_rows(r)?;
        g.concat_rows(&[v, pooled])?
    } else {
        v
    };

    Ok(EncoderOutput {
        memory,
        v_final: Some(v),
        t_final,
        layer1_attention,
        attention_history,
        ttca_layers_run,
        retrieved,
    })
}

/// Layer-1 attention rendered onto the case grid as binary 8-bit PGM,
/// scaled so the maximum weight maps to 255. Grid cells past the patch
/// count render as 0.
pub fn write_attention_pgm(
    attention: &[f64],
    grid: (usize, usize),
    path: &Path,
) -> crate::Result<()> {
    let (rows, cols) = grid;
    if rows * cols < attention.len() {
        return Err(Error::Data(format!(
            "grid {rows}x{cols} too small for {} attention values",
            attention.len()
        )));
    }
    let max = attention.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(rows * cols + 32);
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    for i in 0..rows * cols {
        let value = if i < attention.len() && max > 0.0 {
            (attention[i] / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(value);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
