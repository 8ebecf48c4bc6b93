//! Synthetic paired (patch features, report text) corpus.
//!
//! Patches and report sentences live in one shared latent space: every
//! tissue has a unit prototype vector, patch features and retrieval
//! embeddings are independent noisy views of the prototype, and sentence
//! embeddings are noisy views keyed by the tissue keyword in the sentence.
//! Image-text alignment therefore holds by construction, which is what
//! makes knowledge retrieval testable without a pretrained extractor.

use crate::error::Error;
use crate::par;
use crate::tensor::Tensor;
use crate::text;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Train/val/test proportions: 796 / 88 / 93.
pub const SPLIT_WEIGHTS: [usize; 3] = [796, 88, 93];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Her2Influence {
    Positive,
    Negative,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TissuePrototype {
    pub id: u32,
    /// Keyword present in every template of this tissue and in no other
    /// tissue's templates.
    pub name: String,
    pub prototype: Vec<f32>,
    /// Two report sentences: index 0 used when the tissue dominates the
    /// case, index 1 when it is a minor component.
    pub templates: Vec<String>,
    pub her2_influence: Her2Influence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub dim: usize,
    pub seed: u64,
    pub mention_threshold: f32,
    pub sentence_noise: f32,
    pub tissues: Vec<TissuePrototype>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub patient_id: String,
    /// Grid extents; patches are stored in row-major grid order and the
    /// last row may be partial.
    pub grid: (usize, usize),
    pub tissue_ids: Vec<u32>,
    pub visual: Vec<Vec<f32>>,
    pub retrieval: Vec<Vec<f32>>,
    pub report: String,
}

impl Case {
    pub fn num_patches(&self) -> usize {
        self.tissue_ids.len()
    }

    pub fn visual_matrix(&self) -> Tensor<f32> {
        Tensor::from_rows(&self.visual).expect("case visual rows")
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub cases: Vec<Case>,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_cases: usize,
    pub tissue_count: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub dim: usize,
    /// Fraction of patches a tissue needs before the report mentions it.
    pub mention_threshold: f32,
    /// Coordinate-relative noise scale for the two patch views.
    pub visual_noise: f32,
    pub retrieval_noise: f32,
    /// Noise scale for sentence embeddings.
    pub sentence_noise: f32,
    /// Probability that a grid cell ignores its region and draws a random
    /// tissue.
    pub flip_prob: f64,
    /// Probability that a case reuses the previous case's patient.
    pub multi_case_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            n_cases: 977,
            tissue_count: 6,
            patches_min: 64,
            patches_max: 256,
            dim: 32,
            mention_threshold: 0.10,
            visual_noise: 0.3,
            retrieval_noise: 0.3,
            sentence_noise: 0.2,
            flip_prob: 0.02,
            multi_case_fraction: 0.0,
        }
    }
}

/// Tissue vocabulary: (keyword, her2 influence, dominant template, minor
/// template). Templates mention exactly their own keyword.
const TISSUE_SPECS: &[(&str, Her2Influence, &str, &str)] = &[
    (
        "carcinoma",
        Her2Influence::Positive,
        "invasive ductal carcinoma present, m-8500/3.",
        "focal invasive carcinoma identified at the margin.",
    ),
    (
        "stroma",
        Her2Influence::Negative,
        "dense fibrous stroma with proliferating fibroblasts.",
        "scattered fibrous stroma noted.",
    ),
    (
        "lymphocytes",
        Her2Influence::None,
        "prominent lymphocytes infiltrate the specimen.",
        "few lymphocytes are identified.",
    ),
    (
        "adipose",
        Her2Influence::None,
        "adipose tissue dominates the sections.",
        "minor adipose tissue is included.",
    ),
    (
        "necrosis",
        Her2Influence::None,
        "extensive necrosis is evident.",
        "focal necrosis observed.",
    ),
    (
        "epithelium",
        Her2Influence::None,
        "benign ductal epithelium lines the ducts.",
        "small foci of benign epithelium remain.",
    ),
];

const HER2_POSITIVE_SENTENCE: &str = "her-2 status: positive.";
const HER2_NEGATIVE_SENTENCE: &str = "her-2 status: negative.";

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Unit vector with pseudo-normal coordinates drawn from `rng`, scaled so
/// the expected norm is ~1.
fn noise_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (g * scale) as f32
        })
        .collect()
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn make_tissues(cfg: &CorpusConfig) -> crate::Result<Vec<TissuePrototype>> {
    if cfg.tissue_count == 0 {
        return Err(Error::Usage("tissue_count must be at least 1".into()));
    }
    if cfg.tissue_count > TISSUE_SPECS.len() {
        return Err(Error::Usage(format!(
            "tissue_count {} exceeds the {} available tissue definitions",
            cfg.tissue_count,
            TISSUE_SPECS.len()
        )));
    }
    if cfg.dim < 4 {
        return Err(Error::Usage("dim must be at least 4".into()));
    }
    let mut rng = stream_rng(cfg.seed, 0xA11CE);
    let mut prototypes: Vec<Vec<f32>> = Vec::new();
    // Rejection sampling keeps prototypes distinguishable (pairwise cos < 0.5).
    while prototypes.len() < cfg.tissue_count {
        let mut cand = noise_vector(&mut rng, cfg.dim);
        normalize(&mut cand);
        if prototypes.iter().all(|p| cosine_f32(p, &cand) < 0.5) {
            prototypes.push(cand);
        }
    }
    Ok(TISSUE_SPECS[..cfg.tissue_count]
        .iter()
        .zip(prototypes)
        .enumerate()
        .map(|(i, ((name, her2, dom, minor), prototype))| TissuePrototype {
            id: i as u32,
            name: name.to_string(),
            prototype,
            templates: vec![dom.to_string(), minor.to_string()],
            her2_influence: *her2,
        })
        .collect())
}

/// Row-major grid extents for `m` patches, as square as possible.
pub fn grid_shape(m: usize) -> (usize, usize) {
    let rows = (m as f64).sqrt().ceil() as usize;
    let cols = m.div_ceil(rows);
    (rows, cols)
}

fn tissue_map(rng: &mut ChaCha8Rng, m: usize, grid: (usize, usize), n_tissues: usize, flip_prob: f64) -> Vec<u32> {
    let (rows, cols) = grid;
    // Voronoi regions: nearest seed wins, so spatial neighbors share tissue.
    let n_seeds = rng.gen_range(2..=(n_tissues + 2));
    let seeds: Vec<(f64, f64, u32)> = (0..n_seeds)
        .map(|_| {
            (
                rng.gen_range(0.0..rows as f64),
                rng.gen_range(0.0..cols as f64),
                rng.gen_range(0..n_tissues as u32),
            )
        })
        .collect();
    (0..m)
        .map(|idx| {
            let r = (idx / cols) as f64;
            let c = (idx % cols) as f64;
            let mut best = (f64::INFINITY, 0u32);
            for &(sr, sc, t) in &seeds {
                let d2 = (r - sr).powi(2) + (c - sc).powi(2);
                if d2 < best.0 {
                    best = (d2, t);
                }
            }
            if rng.gen_bool(flip_prob) {
                rng.gen_range(0..n_tissues as u32)
            } else {
                best.1
            }
        })
        .collect()
}

fn compose_report(tissues: &[TissuePrototype], tissue_ids: &[u32], mention_threshold: f32) -> String {
    let m = tissue_ids.len() as f32;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in tissue_ids {
        *counts.entry(t).or_default() += 1;
    }
    let mut sentences = Vec::new();
    let mut pos_frac = 0.0f32;
    let mut neg_frac = 0.0f32;
    for (&tid, &count) in &counts {
        let frac = count as f32 / m;
        let tissue = &tissues[tid as usize];
        match tissue.her2_influence {
            Her2Influence::Positive => pos_frac += frac,
            Her2Influence::Negative => neg_frac += frac,
            Her2Influence::None => {}
        }
        if frac >= mention_threshold {
            let variant = if frac >= 0.4 { 0 } else { 1 };
            sentences.push(tissue.templates[variant].clone());
        }
    }
    sentences.push(if pos_frac > neg_frac {
        HER2_POSITIVE_SENTENCE.to_string()
    } else {
        HER2_NEGATIVE_SENTENCE.to_string()
    });
    sentences.join(" ")
}

fn generate_case(cfg: &CorpusConfig, tissues: &[TissuePrototype], idx: usize, patient_id: &str) -> Case {
    let mut rng = stream_rng(cfg.seed, 0xC0DE_0000 + idx as u64);
    let m = rng.gen_range(cfg.patches_min..=cfg.patches_max);
    let grid = grid_shape(m);
    let tissue_ids = tissue_map(&mut rng, m, grid, tissues.len(), cfg.flip_prob);

    let mut visual = Vec::with_capacity(m);
    let mut retrieval = Vec::with_capacity(m);
    for &tid in &tissue_ids {
        let proto = &tissues[tid as usize].prototype;
        let nv = noise_vector(&mut rng, cfg.dim);
        let nr = noise_vector(&mut rng, cfg.dim);
        visual.push(
            proto
                .iter()
                .zip(&nv)
                .map(|(&p, &n)| p + cfg.visual_noise * n)
                .collect(),
        );
        retrieval.push(
            proto
                .iter()
                .zip(&nr)
                .map(|(&p, &n)| p + cfg.retrieval_noise * n)
                .collect(),
        );
    }
    let report = compose_report(tissues, &tissue_ids, cfg.mention_threshold);
    Case {
        case_id: format!("case-{idx:04}"),
        patient_id: patient_id.to_string(),
        grid,
        tissue_ids,
        visual,
        retrieval,
        report,
    }
}

/// Deterministic corpus generation; cases are independent given the seed
/// and generated in parallel.
pub fn generate_corpus(cfg: &CorpusConfig) -> crate::Result<Corpus> {
    if cfg.n_cases == 0 {
        return Err(Error::Usage("n_cases must be at least 1".into()));
    }
    if cfg.patches_min == 0 || cfg.patches_min > cfg.patches_max {
        return Err(Error::Usage(format!(
            "invalid patch range [{}, {}]",
            cfg.patches_min, cfg.patches_max
        )));
    }
    let tissues = make_tissues(cfg)?;

    let mut plan_rng = stream_rng(cfg.seed, 0x9A71E47);
    let mut patient_ids: Vec<String> = Vec::with_capacity(cfg.n_cases);
    let mut next_patient = 0usize;
    for i in 0..cfg.n_cases {
        if i > 0 && plan_rng.gen_bool(cfg.multi_case_fraction) {
            let prev = patient_ids[i - 1].clone();
            patient_ids.push(prev);
        } else {
            patient_ids.push(format!("pt-{next_patient:04}"));
            next_patient += 1;
        }
    }

    let cases = par::map_range(cfg.n_cases, |i| {
        generate_case(cfg, &tissues, i, &patient_ids[i])
    });

    Ok(Corpus {
        meta: CorpusMeta {
            version: CORPUS_FORMAT_VERSION,
            dim: cfg.dim,
            seed: cfg.seed,
            mention_threshold: cfg.mention_threshold,
            sentence_noise: cfg.sentence_noise,
            tissues,
        },
        cases,
    })
}

// ── sentence embedding ───────────────────────────────────────────────

/// Deterministic sentence embedder over the corpus latent space: a sentence
/// mentioning a tissue keyword embeds near that tissue's prototype; other
/// sentences get a stable hash-derived direction.
pub struct SentenceEmbedder<'a> {
    meta: &'a CorpusMeta,
}

impl<'a> SentenceEmbedder<'a> {
    pub fn new(meta: &'a CorpusMeta) -> Self {
        SentenceEmbedder { meta }
    }

    /// Tissue whose keyword appears in the sentence, if any.
    pub fn source_tissue(&self, sentence: &str) -> Option<u32> {
        let tokens = text::tokenize(sentence);
        self.meta
            .tissues
            .iter()
            .find(|t| tokens.iter().any(|tok| tok == &t.name))
            .map(|t| t.id)
    }

    pub fn embed(&self, sentence: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(sentence.as_bytes()));
        let noise = noise_vector(&mut rng, self.meta.dim);
        let mut v: Vec<f32> = match self.source_tissue(sentence) {
            Some(tid) => {
                let proto = &self.meta.tissues[tid as usize].prototype;
                proto
                    .iter()
                    .zip(&noise)
                    .map(|(&p, &n)| p + self.meta.sentence_noise * n)
                    .collect()
            }
            None => noise,
        };
        normalize(&mut v);
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ── persistence ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum CorpusRecord {
    Meta(CorpusMeta),
    Case(Case),
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> crate::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &CorpusRecord::Meta(corpus.meta.clone()))?;
    out.write_all(b"\n")?;
    for case in &corpus.cases {
        serde_json::to_writer(&mut out, &CorpusRecord::Case(case.clone()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> crate::Result<Corpus> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut meta = None;
    let mut cases = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusRecord>(&line)? {
            CorpusRecord::Meta(m) => {
                if m.version != CORPUS_FORMAT_VERSION {
                    return Err(Error::Data(format!(
                        "corpus version mismatch: expected {CORPUS_FORMAT_VERSION}, got {}",
                        m.version
                    )));
                }
                meta = Some(m);
            }
            CorpusRecord::Case(c) => cases.push(c),
        }
    }
    let meta = meta.ok_or_else(|| Error::Data("corpus file has no meta record".into()))?;
    if cases.is_empty() {
        return Err(Error::Data("corpus file has no cases".into()));
    }
    Ok(Corpus { meta, cases })
}

// ── splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn split_case_ids(&self, name: &str) -> crate::Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?}; expected train, val, or test"
            ))),
        }
    }
}

/// Patient-disjoint split with patient counts proportional to 796:88:93
/// (largest remainder, at least one patient per split).
pub fn split_dataset(corpus: &Corpus, seed: u64) -> crate::Result<SplitManifest> {
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for case in &corpus.cases {
        if seen.insert(case.patient_id.as_str()) {
            patients.push(&case.patient_id);
        }
    }
    if patients.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 patients to split, got {}",
            patients.len()
        )));
    }
    // Sorting before the seeded shuffle makes membership independent of
    // input order.
    patients.sort_unstable();
    let mut rng = stream_rng(seed, 0x5917);
    for i in (1..patients.len()).rev() {
        let j = rng.gen_range(0..=i);
        patients.swap(i, j);
    }

    let n = patients.len();
    let total: usize = SPLIT_WEIGHTS.iter().sum();
    let mut counts = [0usize; 3];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (i, &w) in SPLIT_WEIGHTS.iter().enumerate() {
        let exact = n as f64 * w as f64 / total as f64;
        counts[i] = exact.floor() as usize;
        remainders.push((exact - exact.floor(), i));
    }
    let mut assigned: usize = counts.iter().sum();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut k = 0;
    while assigned < n {
        counts[remainders[k % 3].1] += 1;
        assigned += 1;
        k += 1;
    }
    // Every split gets at least one patient, taken from the largest.
    for i in 0..3 {
        while counts[i] == 0 {
            let largest = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[largest] -= 1;
            counts[i] += 1;
        }
    }

    let mut membership: HashMap<&str, usize> = HashMap::new();
    let mut offset = 0;
    for (split_idx, &c) in counts.iter().enumerate() {
        for p in &patients[offset..offset + c] {
            membership.insert(p, split_idx);
        }
        offset += c;
    }

    let mut splits: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for case in &corpus.cases {
        let idx = membership[case.patient_id.as_str()];
        splits[idx].push(case.case_id.clone());
    }
    let [train, val, test] = splits;
    Ok(SplitManifest {
        seed,
        train,
        val,
        test,
    })
}

pub fn save_splits(splits: &SplitManifest, path: &Path) -> crate::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, splits)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_splits(path: &Path) -> crate::Result<SplitManifest> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

/// Cases of one split, in corpus order.
pub fn cases_for_split<'a>(
    corpus: &'a Corpus,
    splits: &SplitManifest,
    name: &str,
) -> crate::Result<Vec<&'a Case>> {
    let ids: HashSet<&str> = splits
        .split_case_ids(name)?
        .iter()
        .map(|s| s.as_str())
        .collect();
    Ok(corpus
        .cases
        .iter()
        .filter(|c| ids.contains(c.case_id.as_str()))
        .collect())
}

// ── vocabulary ───────────────────────────────────────────────────────

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;

    /// Vocabulary from train-split reports only: distinct tokens at or
    /// above `min_freq`, lexicographic id order after the four specials.
    pub fn build(train_reports: &[&str], min_freq: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for report in train_reports {
            for tok in text::tokenize(report) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = vec![
            PAD_TOKEN.into(),
            BOS_TOKEN.into(),
            EOS_TOKEN.into(),
            UNK_TOKEN.into(),
        ];
        tokens.extend(
            freq.into_iter()
                .filter(|(_, c)| *c >= min_freq)
                .map(|(t, _)| t),
        );
        let mut vocab = Vocab {
            tokens,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    /// BOS + token ids + EOS; out-of-vocabulary words map to UNK.
    pub fn encode(&self, textv: &str) -> Vec<u32> {
        let mut ids = vec![Self::BOS];
        ids.extend(text::tokenize(textv).iter().map(|t| self.token_id(t)));
        ids.push(Self::EOS);
        ids
    }

    /// Text from ids, skipping structural specials. Unknown ids are an error.
    pub fn decode(&self, ids: &[u32]) -> crate::Result<String> {
        let mut tokens = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::Data(format!(
                    "token id {id} out of range for vocab of {}",
                    self.tokens.len()
                )));
            }
            if id == Self::PAD || id == Self::BOS || id == Self::EOS {
                continue;
            }
            tokens.push(self.tokens[id as usize].clone());
        }
        Ok(text::detokenize(&tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_cases: 20,
            patches_min: 16,
            patches_max: 48,
            dim: 16,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_cfg()).unwrap();
        let b = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.cases).unwrap(),
            serde_json::to_string(&b.cases).unwrap()
        );
    }

    #[test]
    fn single_tissue_uses_only_its_templates() {
        let cfg = CorpusConfig {
            tissue_count: 1,
            flip_prob: 0.0,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for case in &corpus.cases {
            assert!(case.report.contains("carcinoma"), "{}", case.report);
            for other in &["stroma", "lymphocytes", "adipose", "necrosis", "epithelium"] {
                assert!(!case.report.contains(other));
            }
        }
    }

    #[test]
    fn zero_tissues_rejected() {
        let cfg = CorpusConfig {
            tissue_count: 0,
            ..small_cfg()
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn neighbor_agreement_beats_independence() {
        let cfg = CorpusConfig {
            n_cases: 100,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut same = 0usize;
        let mut pairs = 0usize;
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let mut total = 0usize;
        for case in &corpus.cases {
            let (_, cols) = case.grid;
            let m = case.num_patches();
            for i in 0..m {
                *counts.entry(case.tissue_ids[i]).or_default() += 1;
                total += 1;
                // right neighbor
                if (i % cols) + 1 < cols && i + 1 < m {
                    pairs += 1;
                    if case.tissue_ids[i] == case.tissue_ids[i + 1] {
                        same += 1;
                    }
                }
                // neighbor below
                if i + cols < m {
                    pairs += 1;
                    if case.tissue_ids[i] == case.tissue_ids[i + cols] {
                        same += 1;
                    }
                }
            }
        }
        let agreement = same as f64 / pairs as f64;
        let independence: f64 = counts
            .values()
            .map(|&c| (c as f64 / total as f64).powi(2))
            .sum();
        assert!(
            agreement > independence + 0.1,
            "agreement {agreement:.3} vs independence {independence:.3}"
        );
    }

    #[test]
    fn mentions_match_threshold() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for case in &corpus.cases {
            let m = case.num_patches() as f32;
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &t in &case.tissue_ids {
                *counts.entry(t).or_default() += 1;
            }
            for tissue in &corpus.meta.tissues {
                let frac = counts.get(&tissue.id).copied().unwrap_or(0) as f32 / m;
                let mentioned = case.report.contains(&tissue.name);
                assert_eq!(
                    mentioned,
                    frac >= corpus.meta.mention_threshold,
                    "tissue {} frac {frac} in case {}",
                    tissue.name,
                    case.case_id
                );
            }
        }
    }

    #[test]
    fn splits_exact_for_977_single_case_patients() {
        let cfg = CorpusConfig {
            n_cases: 977,
            patches_min: 1,
            patches_max: 2,
            dim: 4,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let splits = split_dataset(&corpus, 7).unwrap();
        assert_eq!(splits.train.len(), 796);
        assert_eq!(splits.val.len(), 88);
        assert_eq!(splits.test.len(), 93);
    }

    #[test]
    fn splits_are_patient_disjoint() {
        let cfg = CorpusConfig {
            multi_case_fraction: 0.3,
            n_cases: 60,
            patches_min: 4,
            patches_max: 8,
            dim: 8,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for seed in 0..5 {
            let splits = split_dataset(&corpus, seed).unwrap();
            let by_case: HashMap<&str, &str> = corpus
                .cases
                .iter()
                .map(|c| (c.case_id.as_str(), c.patient_id.as_str()))
                .collect();
            let pats = |ids: &[String]| -> HashSet<&str> {
                ids.iter().map(|i| by_case[i.as_str()]).collect()
            };
            let (tr, va, te) = (pats(&splits.train), pats(&splits.val), pats(&splits.test));
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        }
    }

    #[test]
    fn split_membership_ignores_case_order() {
        let cfg = CorpusConfig {
            n_cases: 40,
            patches_min: 4,
            patches_max: 8,
            dim: 8,
            ..CorpusConfig::default()
        };
        let mut corpus = generate_corpus(&cfg).unwrap();
        let a = split_dataset(&corpus, 3).unwrap();
        corpus.cases.reverse();
        let b = split_dataset(&corpus, 3).unwrap();
        let as_sets = |s: &SplitManifest| {
            (
                s.train.iter().cloned().collect::<HashSet<_>>(),
                s.val.iter().cloned().collect::<HashSet<_>>(),
                s.test.iter().cloned().collect::<HashSet<_>>(),
            )
        };
        assert_eq!(as_sets(&a), as_sets(&b));
    }

    #[test]
    fn too_few_patients_error() {
        let cfg = CorpusConfig {
            n_cases: 2,
            patches_min: 2,
            patches_max: 4,
            dim: 8,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert!(split_dataset(&corpus, 0).is_err());
    }

    #[test]
    fn vocab_roundtrip_and_unk() {
        let vocab = Vocab::build(
            &["invasive ductal carcinoma present.", "invasive margins clear."],
            1,
        );
        let textv = "invasive ductal carcinoma";
        let ids = vocab.encode(textv);
        assert_eq!(ids[0], Vocab::BOS);
        assert_eq!(*ids.last().unwrap(), Vocab::EOS);
        assert_eq!(vocab.decode(&ids).unwrap(), textv);
        // below min_freq maps to UNK
        let vocab2 = Vocab::build(
            &["invasive ductal carcinoma present.", "invasive margins clear."],
            2,
        );
        let ids2 = vocab2.encode("ductal");
        assert_eq!(ids2[1], Vocab::UNK);
    }

    #[test]
    fn vocab_size_is_distinct_words_plus_specials() {
        let reports = ["alpha beta gamma.", "beta gamma delta."];
        // direct count oracle over tokenized train text
        let mut distinct = HashSet::new();
        for r in &reports {
            for t in text::tokenize(r) {
                distinct.insert(t);
            }
        }
        let vocab = Vocab::build(&reports.iter().map(|s| &**s).collect::<Vec<_>>(), 1);
        assert_eq!(vocab.len(), distinct.len() + 4);
    }

    #[test]
    fn decode_unknown_id_errors() {
        let vocab = Vocab::build(&["a b."], 1);
        assert!(vocab.decode(&[999]).is_err());
    }

    #[test]
    fn alignment_same_prototype_beats_other() {
        let cfg = CorpusConfig {
            n_cases: 60,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let embedder = SentenceEmbedder::new(&corpus.meta);
        let mut same_sum = 0.0;
        let mut other_sum = 0.0;
        let mut count = 0usize;
        'outer: for case in &corpus.cases {
            for (i, &tid) in case.tissue_ids.iter().enumerate() {
                let tissue = &corpus.meta.tissues[tid as usize];
                let other = &corpus.meta.tissues[((tid + 1) as usize) % corpus.meta.tissues.len()];
                let se_same = embedder.embed(&tissue.templates[0]);
                let se_other = embedder.embed(&other.templates[0]);
                same_sum += cosine_f32(&case.retrieval[i], &se_same);
                other_sum += cosine_f32(&case.retrieval[i], &se_other);
                count += 1;
                if count >= 1000 {
                    break 'outer;
                }
            }
        }
        assert!(count >= 1000);
        assert!(
            same_sum / count as f64 > other_sum / count as f64,
            "same {same_sum} other {other_sum}"
        );
    }

    #[test]
    fn corpus_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&small_cfg()).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&corpus.cases).unwrap(),
            serde_json::to_string(&loaded.cases).unwrap()
        );
        assert_eq!(loaded.meta.dim, corpus.meta.dim);
    }
}
