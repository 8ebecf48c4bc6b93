//! Training and experiment orchestration: the NLL objective, the per-case
//! accumulation loop with Adam, validation-based model selection, split
//! evaluation, the ablation grid, and hyperparameter sweeps.

use crate::bank::KnowledgeBank;
use crate::corpus::{cases_for_split, Case, Corpus, SplitManifest, Vocab};
use crate::decoder::{
    decode_teacher_forced, generate_beam, generate_greedy, score_sequence, DecoderModel,
};
use crate::encoder::{encode, EncoderConfig, EncoderModel, EncoderOutput};
use crate::error::Error;
use crate::metrics::{bleu, entity_dictionary, MetricReport};
use crate::par;
use crate::retrieval::RetrievalConfig;
use crate::tensor::{
    checkpoint::{load_checkpoint, save_checkpoint},
    AdamState, Graph, LeafCache, ParamStore, Scalar, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cases accumulated per optimizer step.
    pub accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalConfig,
    /// Early-stop patience on validation BLEU-4.
    pub patience: usize,
    pub min_freq: usize,
    pub max_len: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            accum: 8,
            lr: 1e-4,
            weight_decay: 5e-5,
            seed: 1,
            encoder: EncoderConfig::default(),
            retrieval: RetrievalConfig::default(),
            patience: 10,
            min_freq: 1,
            max_len: 60,
            beam: 3,
        }
    }
}

impl TrainConfig {
    /// Flat key = value rendering of the resolved configuration.
    pub fn to_flat(&self) -> String {
        let e = &self.encoder;
        let r = &self.retrieval;
        format!(
            "dim = {}\nlayers = {}\nheads = {}\nffn_mult = {}\n\
             ws = {}\nwsl = {}\nvtca = {}\nkr = {}\nttca = {}\n\
             k = {}\nm = {}\nv = {}\n\
             lr = {}\nweight_decay = {}\nepochs = {}\naccum = {}\nseed = {}\n\
             patience = {}\nmin_freq = {}\nmax_len = {}\nbeam = {}\n",
            e.dim,
            e.layers,
            e.heads,
            e.ffn_mult,
            e.ws,
            e.wsl,
            e.vtca,
            e.kr,
            e.ttca,
            r.k,
            r.m,
            r.v,
            self.lr,
            self.weight_decay,
            self.epochs,
            self.accum,
            self.seed,
            self.patience,
            self.min_freq,
            self.max_len,
            self.beam
        )
    }

    pub fn apply_flat_entry(&mut self, key: &str, value: &str) -> crate::Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Data(format!("config entry {key} has invalid value {value:?}"))
            })
        }
        match key {
            "dim" => self.encoder.dim = parse(key, value)?,
            "layers" => self.encoder.layers = parse(key, value)?,
            "heads" => self.encoder.heads = parse(key, value)?,
            "ffn_mult" => self.encoder.ffn_mult = parse(key, value)?,
            "ws" => self.encoder.ws = parse(key, value)?,
            "wsl" => self.encoder.wsl = parse(key, value)?,
            "vtca" => self.encoder.vtca = parse(key, value)?,
            "kr" => self.encoder.kr = parse(key, value)?,
            "ttca" => self.encoder.ttca = parse(key, value)?,
            "k" => self.retrieval.k = parse(key, value)?,
            "m" => self.retrieval.m = parse(key, value)?,
            "v" => self.retrieval.v = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "accum" => self.accum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            other => {
                return Err(Error::Data(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parses flat key = value text on top of the defaults. Lines starting
    /// with '#' and blank lines are ignored.
    pub fn from_flat(text: &str) -> crate::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("config line {line:?} is not key = value"))
            })?;
            cfg.apply_flat_entry(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Usage("lr must be positive and weight_decay non-negative".into()));
        }
        if self.epochs == 0 || self.accum == 0 || self.max_len == 0 || self.beam == 0 {
            return Err(Error::Usage(
                "epochs, accum, max_len, and beam must be positive".into(),
            ));
        }
        self.encoder.validate()?;
        self.retrieval.validate()
    }
}

/// Complete trainable model: shared parameter store, encoder, decoder,
/// and the vocabulary the decoder emits.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: EncoderModel,
    pub decoder: DecoderModel,
    pub vocab: Vocab,
}

impl<T: Scalar> Model<T> {
    pub fn build(
        enc_cfg: EncoderConfig,
        retrieval: RetrievalConfig,
        d_in: usize,
        vocab: Vocab,
        seed: u64,
    ) -> crate::Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderModel::build(enc_cfg, retrieval, d_in, &mut store, &mut rng)?;
        let decoder = DecoderModel::build(
            enc_cfg.layers.max(1),
            enc_cfg.heads,
            enc_cfg.dim,
            enc_cfg.ffn_mult,
            vocab.len(),
            Vocab::BOS,
            Vocab::EOS,
            &mut store,
            &mut rng,
        )?;
        Ok(Model {
            store,
            encoder,
            decoder,
            vocab,
        })
    }

    /// Overwrites parameters from a loaded checkpoint store, matching by
    /// name and validating shapes.
    pub fn load_params(&mut self, loaded: &ParamStore<T>) -> crate::Result<()> {
        if loaded.len() != self.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters but the model expects {}",
                loaded.len(),
                self.store.len()
            )));
        }
        let ids: Vec<_> = self.store.iter().map(|(id, name, t)| {
            (id, name.to_string(), t.shape().to_vec())
        }).collect();
        for (id, name, shape) in ids {
            let src = loaded
                .id_by_name(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {name}")))?;
            let tensor = loaded.get(src);
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *self.store.get_mut(id) = tensor.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn load_from_checkpoint(&mut self, path: &Path) -> crate::Result<()> {
        let loaded: ParamStore<T> = load_checkpoint(path)?;
        self.load_params(&loaded)
    }
}

/// Sum over positions of negative log-softmax at the target ids, with PAD
/// positions masked out.
pub fn nll_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[u32],
    pad: u32,
) -> crate::Result<Var> {
    let (n, v) = g.value(logits).rows_cols();
    if targets.is_empty() {
        return Err(Error::Data("nll targets are empty".into()));
    }
    if targets.len() != n {
        return Err(Error::Data(format!(
            "nll shape mismatch: {} logit rows vs {} targets",
            n,
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Data(format!(
            "target id {bad} out of range for vocab {v}"
        )));
    }
    let logp = g.log_softmax(logits)?;
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.gather_per_row(logp, &ids)?;
    let keep: Vec<T> = targets
        .iter()
        .map(|&t| if t == pad { T::zero() } else { T::one() })
        .collect();
    let keep = g.constant(Tensor::new(vec![targets.len()], keep)?);
    let masked = g.mul(picked, keep)?;
    let total = g.sum_all(masked)?;
    Ok(g.scale(total, T::from_f64(-1.0))?)
}

/// Teacher-forced forward pass for one case: encode, decode, and return
/// the logits with their gold targets.
pub fn forward_case<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    model: &Model<T>,
    case: &Case,
    bank: Option<&KnowledgeBank>,
) -> crate::Result<(Var, Vec<u32>, EncoderOutput)> {
    let tokens = model.vocab.encode(&case.report);
    let enc = encode(g, cache, &model.store, &model.encoder, case, bank)?;
    let logits = decode_teacher_forced(g, cache, &model.store, &model.decoder, enc.memory, &tokens)?;
    Ok((logits, tokens[1..].to_vec(), enc))
}

/// Case loss as a graph node, ready for backward.
pub fn case_loss<T: Scalar>(
    g: &mut Graph<T>,
    cache: &mut LeafCache,
    model: &Model<T>,
    case: &Case,
    bank: Option<&KnowledgeBank>,
) -> crate::Result<Var> {
    let (logits, targets, _) = forward_case(g, cache, model, case, bank)?;
    nll_loss(g, logits, &targets, Vocab::PAD)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu4: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub best_val_bleu4: f64,
    pub best_epoch: usize,
}

/// Full training run: per-case gradient accumulation, AdamW updates,
/// greedy validation BLEU-4 each epoch, best-checkpoint retention, early
/// stopping. Deterministic given the config seed.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    splits: &SplitManifest,
    bank: Option<&KnowledgeBank>,
) -> crate::Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.encoder.kr && bank.is_none() {
        return Err(Error::Data(
            "knowledge retrieval is enabled but no bank was provided".into(),
        ));
    }
    let train_cases = cases_for_split(corpus, splits, "train")?;
    let val_cases = cases_for_split(corpus, splits, "val")?;
    if train_cases.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let reports: Vec<&str> = train_cases.iter().map(|c| c.report.as_str()).collect();
    let vocab = Vocab::build(&reports, cfg.min_freq);
    let mut model: Model<f32> = Model::build(
        cfg.encoder,
        cfg.retrieval,
        corpus.meta.dim,
        vocab,
        cfg.seed,
    )?;
    let mut adam = AdamState::new(&model.store, cfg.lr, cfg.weight_decay);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut accum: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
        let mut pending = 0usize;
        for (step, &case_idx) in order.iter().enumerate() {
            let case = train_cases[case_idx];
            let mut g = Graph::new();
            let mut cache = LeafCache::new(&model.store, true);
            let loss = case_loss(&mut g, &mut cache, &model, case, bank).map_err(|e| {
                Error::Numeric(format!("forward failed on case {}: {e}", case.case_id))
            })?;
            let loss_value = g.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on case {}",
                    case.case_id
                )));
            }
            epoch_loss += loss_value;
            g.backward(loss)?;
            for (slot, grad) in accum.iter_mut().zip(cache.grads(&g)) {
                match (slot.as_mut(), grad) {
                    (Some(acc), Some(gt)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                            *a += *b;
                        }
                    }
                    (None, Some(gt)) => *slot = Some(gt),
                    _ => {}
                }
            }
            pending += 1;
            if pending == cfg.accum || step + 1 == order.len() {
                let inv = 1.0 / pending as f32;
                for slot in accum.iter_mut() {
                    if let Some(t) = slot {
                        for x in t.data_mut() {
                            *x *= inv;
                        }
                    }
                }
                adam.step(&mut model.store, &accum)?;
                accum = vec![None; model.store.len()];
                pending = 0;
            }
        }
        let train_loss = epoch_loss / train_cases.len() as f64;

        let val_bleu4 = if val_cases.is_empty() {
            0.0
        } else {
            let candidates = generate_for_cases(&model, &val_cases, bank, 1, cfg.max_len)?;
            let texts: Vec<String> = candidates.into_iter().map(|r| r.text).collect();
            let refs: Vec<String> = val_cases.iter().map(|c| c.report.clone()).collect();
            bleu(&texts, &refs, 4)?
        };

        log.push(EpochLog {
            epoch,
            train_loss,
            val_bleu4,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_bleu4 > *b);
        if improved {
            best = Some((val_bleu4, epoch, model.store.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    let (best_val_bleu4, best_epoch, best_store) =
        best.expect("at least one epoch ran");
    model.store = best_store;
    Ok(TrainOutcome {
        model,
        log,
        best_val_bleu4,
        best_epoch,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRecord {
    pub case_id: String,
    pub text: String,
    pub token_logprobs: Vec<f64>,
}

/// Fraction of teacher-forced positions where the argmax logit equals the
/// gold token, over all cases.
pub fn teacher_forced_accuracy(
    model: &Model<f32>,
    cases: &[&Case],
    bank: Option<&KnowledgeBank>,
) -> crate::Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for case in cases {
        let mut g = Graph::new();
        let mut cache = LeafCache::new(&model.store, false);
        let (logits, targets, _) = forward_case(&mut g, &mut cache, model, case, bank)?;
        let t = g.value(logits);
        let (_, v) = t.rows_cols();
        for (row, &gold) in targets.iter().enumerate() {
            let row_data = &t.data()[row * v..(row + 1) * v];
            let mut best = 0;
            for (i, &x) in row_data.iter().enumerate() {
                if x > row_data[best] {
                    best = i;
                }
            }
            if best == gold as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Generation over frozen parameters, parallel across cases. `beam = 1`
/// decodes greedily.
pub fn generate_for_cases(
    model: &Model<f32>,
    cases: &[&Case],
    bank: Option<&KnowledgeBank>,
    beam: usize,
    max_len: usize,
) -> crate::Result<Vec<GenRecord>> {
    let results = par::map_slice(cases, |case| -> crate::Result<GenRecord> {
        let mut g = Graph::new();
        let mut cache = LeafCache::new(&model.store, false);
        let enc = encode(&mut g, &mut cache, &model.store, &model.encoder, case, bank)?;
        let tokens = if beam == 1 {
            generate_greedy(
                &mut g,
                &mut cache,
                &model.store,
                &model.decoder,
                enc.memory,
                max_len,
            )?
        } else {
            generate_beam(
                &mut g,
                &mut cache,
                &model.store,
                &model.decoder,
                enc.memory,
                beam,
                max_len,
            )?
        };
        let token_logprobs = score_sequence(
            &mut g,
            &mut cache,
            &model.store,
            &model.decoder,
            enc.memory,
            &tokens,
        )?;
        Ok(GenRecord {
            case_id: case.case_id.clone(),
            text: model.vocab.decode(&tokens)?,
            token_logprobs,
        })
    });
    results.into_iter().collect()
}

/// Generates on a split and scores every metric against the references.
pub fn evaluate_split(
    model: &Model<f32>,
    corpus: &Corpus,
    splits: &SplitManifest,
    split: &str,
    bank: Option<&KnowledgeBank>,
    beam: usize,
    max_len: usize,
) -> crate::Result<(Vec<GenRecord>, MetricReport)> {
    let cases = cases_for_split(corpus, splits, split)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let records = generate_for_cases(model, &cases, bank, beam, max_len)?;
    let candidates: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    let references: Vec<String> = cases.iter().map(|c| c.report.clone()).collect();
    let dictionary = entity_dictionary(&corpus.meta);
    let report = MetricReport::compute(&candidates, &references, &dictionary)?;
    Ok((records, report))
}

// ── ablation grid ────────────────────────────────────────────────────

/// Flag grid rows: (ws, wsl, vtca, kr, ttca).
pub const ABLATION_ROWS: [(bool, bool, bool, bool, bool); 6] = [
    (false, false, false, false, false),
    (false, false, true, false, false),
    (false, true, true, false, false),
    (false, true, true, true, false),
    (false, true, true, true, true),
    (true, true, true, true, true),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub ws: bool,
    pub wsl: bool,
    pub vtca: bool,
    pub kr: bool,
    pub ttca: bool,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor_simplified: f64,
    pub rouge_l: f64,
    pub fact_ent_simplified: f64,
    /// Mean relative improvement over the vanilla row across the seven
    /// NLP metrics; None for the vanilla row itself.
    pub avg_delta: Option<f64>,
}

fn mean_metrics(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mut sum = MetricReport {
        bleu1: 0.0,
        bleu2: 0.0,
        bleu3: 0.0,
        bleu4: 0.0,
        meteor_simplified: 0.0,
        rouge_l: 0.0,
        fact_ent_simplified: 0.0,
        her2_precision: 0.0,
        her2_recall: 0.0,
        her2_f1: 0.0,
    };
    for r in reports {
        sum.bleu1 += r.bleu1 / n;
        sum.bleu2 += r.bleu2 / n;
        sum.bleu3 += r.bleu3 / n;
        sum.bleu4 += r.bleu4 / n;
        sum.meteor_simplified += r.meteor_simplified / n;
        sum.rouge_l += r.rouge_l / n;
        sum.fact_ent_simplified += r.fact_ent_simplified / n;
        sum.her2_precision += r.her2_precision / n;
        sum.her2_recall += r.her2_recall / n;
        sum.her2_f1 += r.her2_f1 / n;
    }
    sum
}

/// Trains and evaluates the six-row flag grid, averaging metrics over the
/// given seeds, and reports each row's mean relative improvement over the
/// vanilla baseline.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Corpus,
    splits: &SplitManifest,
    bank: &KnowledgeBank,
    seeds: &[u64],
) -> crate::Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut means = Vec::with_capacity(ABLATION_ROWS.len());
    for &(ws, wsl, vtca, kr, ttca) in ABLATION_ROWS.iter() {
        let mut cfg = base.clone();
        cfg.encoder.ws = ws;
        cfg.encoder.wsl = wsl;
        cfg.encoder.vtca = vtca;
        cfg.encoder.kr = kr;
        cfg.encoder.ttca = ttca;
        cfg.encoder.validate()?;
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.seed = seed;
            let outcome = train(&cfg, corpus, splits, if kr { Some(bank) } else { None })?;
            let (_, report) = evaluate_split(
                &outcome.model,
                corpus,
                splits,
                "test",
                if kr { Some(bank) } else { None },
                cfg.beam,
                cfg.max_len,
            )?;
            reports.push(report);
        }
        means.push(mean_metrics(&reports));
    }

    let baseline = means[0].clone();
    Ok(ABLATION_ROWS
        .iter()
        .zip(means)
        .enumerate()
        .map(|(i, (&(ws, wsl, vtca, kr, ttca), m))| {
            let avg_delta = if i == 0 {
                None
            } else {
                let deltas: Vec<f64> = m
                    .nlp_values()
                    .iter()
                    .zip(baseline.nlp_values().iter())
                    .filter(|(_, (_, b))| *b > 0.0)
                    .map(|((_, v), (_, b))| (v - b) / b)
                    .collect();
                Some(deltas.iter().sum::<f64>() / deltas.len().max(1) as f64)
            };
            AblationRow {
                ws,
                wsl,
                vtca,
                kr,
                ttca,
                bleu1: m.bleu1,
                bleu2: m.bleu2,
                bleu3: m.bleu3,
                bleu4: m.bleu4,
                meteor_simplified: m.meteor_simplified,
                rouge_l: m.rouge_l,
                fact_ent_simplified: m.fact_ent_simplified,
                avg_delta,
            }
        })
        .collect())
}

// ── hyperparameter sweeps ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    V,
    M,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "k" => Ok(SweepParam::K),
            "v" => Ok(SweepParam::V),
            "m" => Ok(SweepParam::M),
            other => Err(Error::Usage(format!(
                "unknown sweep parameter {other:?}; expected k, v, or m"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_simplified: f64,
}

/// One train + test evaluation per sweep value at a fixed seed.
pub fn run_sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    corpus: &Corpus,
    splits: &SplitManifest,
    bank: &KnowledgeBank,
) -> crate::Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::K => cfg.retrieval.k = value,
            SweepParam::V => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Usage(format!("v must be a positive integer, got {value}")));
                }
                cfg.retrieval.v = value as usize;
            }
            SweepParam::M => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Usage(format!("m must be a positive integer, got {value}")));
                }
                cfg.retrieval.m = value as usize;
            }
        }
        cfg.retrieval.validate()?;
        let outcome = train(&cfg, corpus, splits, Some(bank))?;
        let (_, report) = evaluate_split(
            &outcome.model,
            corpus,
            splits,
            "test",
            Some(bank),
            cfg.beam,
            cfg.max_len,
        )?;
        points.push(SweepPoint {
            value,
            bleu4: report.bleu4,
            rouge_l: report.rouge_l,
            meteor_simplified: report.meteor_simplified,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_uniform_logits_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 4], vec![0.0f64; 4]).unwrap());
        let loss = nll_loss(&mut g, logits, &[2], Vocab::PAD).unwrap();
        let got = g.value(loss).data()[0];
        assert!((got - 4.0f64.ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn nll_confident_logits_is_near_zero() {
        let mut g = Graph::new();
        let mut data = vec![-50.0f64; 8];
        data[3] = 50.0;
        data[4 + 1] = 50.0;
        let logits = g.constant(Tensor::new(vec![2, 4], data).unwrap());
        let loss = nll_loss(&mut g, logits, &[3, 1], Vocab::PAD).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-9);
    }

    #[test]
    fn nll_matches_scalar_recomputation() {
        let mut g = Graph::new();
        let data = vec![0.3f64, -1.2, 0.8, 2.0, -0.5, 0.1, 0.0, 1.0];
        let logits = g.constant(Tensor::new(vec![2, 4], data.clone()).unwrap());
        let targets = [3u32, 1];
        let loss = nll_loss(&mut g, logits, &targets, Vocab::PAD).unwrap();

        // independent scalar recomputation
        let mut expected = 0.0f64;
        for (row, &t) in targets.iter().enumerate() {
            let row_data = &data[row * 4..(row + 1) * 4];
            let max = row_data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row_data.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            expected -= row_data[t as usize] - lse;
        }
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn nll_masks_pad_positions() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 4], vec![0.0f64; 8]).unwrap());
        let loss = nll_loss(&mut g, logits, &[2, Vocab::PAD], Vocab::PAD).unwrap();
        assert!((g.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_shape_mismatch_errors() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 4], vec![0.0f64; 8]).unwrap());
        assert!(nll_loss(&mut g, logits, &[1], Vocab::PAD).is_err());
        assert!(nll_loss(&mut g, logits, &[1, 9], Vocab::PAD).is_err());
    }

    #[test]
    fn sweep_param_parse() {
        assert_eq!("k".parse::<SweepParam>().unwrap(), SweepParam::K);
        assert!("x".parse::<SweepParam>().is_err());
    }

    #[test]
    fn flat_config_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.encoder.dim = 32;
        cfg.retrieval.k = 0.6;
        cfg.encoder.ttca = false;
        cfg.encoder.kr = false;
        let text = cfg.to_flat();
        let parsed = TrainConfig::from_flat(&text).unwrap();
        assert_eq!(parsed.to_flat(), text);
        assert_eq!(parsed.encoder.dim, 32);
        assert!(!parsed.encoder.ttca);
        assert!(TrainConfig::from_flat("nonsense = 1").is_err());
        assert!(TrainConfig::from_flat("dim").is_err());
    }
}
