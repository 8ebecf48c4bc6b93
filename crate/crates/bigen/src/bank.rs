//! Sentence-level knowledge bank built from train-split reports.
//!
//! Reports are split into sentences, each sentence is embedded into the
//! corpus latent space and stored unit-normalized, so top-v cosine
//! retrieval reduces to a dot-product scan. The bank is immutable once
//! built.

use crate::corpus::{cases_for_split, Corpus, SentenceEmbedder, SplitManifest};
use crate::error::Error;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const BANK_MAGIC: &[u8; 4] = b"BGKB";
pub const BANK_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct KnowledgeBank {
    /// T rows of width `dim`, unit-normalized, row i embeds `sentences[i]`.
    embeddings: Vec<Vec<f32>>,
    sentences: Vec<String>,
    dim: usize,
    /// Corpus hash + split id recorded at build time (leakage guard).
    pub provenance: Option<BankProvenance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankProvenance {
    pub corpus_hash: String,
    pub split: String,
}

impl KnowledgeBank {
    /// Bank from explicit rows; rows must be non-empty, same width, finite.
    pub fn from_parts(embeddings: Vec<Vec<f32>>, sentences: Vec<String>) -> crate::Result<Self> {
        if embeddings.is_empty() || embeddings.len() != sentences.len() {
            return Err(Error::Data(format!(
                "bank rows mismatch: {} embeddings vs {} sentences",
                embeddings.len(),
                sentences.len()
            )));
        }
        let dim = embeddings[0].len();
        for row in &embeddings {
            if row.len() != dim {
                return Err(Error::Data("bank embedding widths differ".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("bank embedding contains non-finite values".into()));
            }
        }
        Ok(KnowledgeBank {
            embeddings,
            sentences,
            dim,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i]
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    pub fn sentence(&self, i: usize) -> &str {
        &self.sentences[i]
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }
}

/// Splits a report into sentences on `.`, `;`, and newlines, keeping the
/// terminator attached. A period between two digits (decimal like "3.5")
/// does not terminate. Joining the result with single spaces reconstructs
/// corpus-style reports.
pub fn split_sentences(report: &str) -> Vec<String> {
    let chars: Vec<char> = report.chars().collect();
    let mut sentences = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '\n' => {
                push_sentence(&mut sentences, &mut current);
            }
            '.' => {
                let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
                let next_digit = i + 1 < chars.len() && chars[i + 1].is_ascii_digit();
                current.push(c);
                if !(prev_digit && next_digit) {
                    push_sentence(&mut sentences, &mut current);
                }
            }
            ';' => {
                current.push(c);
                push_sentence(&mut sentences, &mut current);
            }
            _ => current.push(c),
        }
    }
    push_sentence(&mut sentences, &mut current);
    sentences
}

fn push_sentence(sentences: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        sentences.push(trimmed.to_string());
    }
    current.clear();
}

/// Stable hash over case ids and reports, recorded as bank provenance.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    hasher.update(corpus.meta.seed.to_le_bytes());
    for case in &corpus.cases {
        hasher.update(case.case_id.as_bytes());
        hasher.update(case.report.as_bytes());
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the bank from the named split, which must be "train". Pointing
/// the builder at any other split is a leakage-contract error.
pub fn build_bank(
    corpus: &Corpus,
    splits: &SplitManifest,
    split_name: &str,
) -> crate::Result<KnowledgeBank> {
    if split_name != "train" {
        return Err(Error::Data(format!(
            "knowledge bank must be built from the train split, not {split_name:?}"
        )));
    }
    let cases = cases_for_split(corpus, splits, split_name)?;
    if cases.is_empty() {
        return Err(Error::Data("train split is empty; cannot build bank".into()));
    }
    let embedder = SentenceEmbedder::new(&corpus.meta);
    let mut embeddings = Vec::new();
    let mut sentences = Vec::new();
    for case in cases {
        for sentence in split_sentences(&case.report) {
            embeddings.push(embedder.embed(&sentence));
            sentences.push(sentence);
        }
    }
    Ok(KnowledgeBank {
        embeddings,
        sentences,
        dim: corpus.meta.dim,
        provenance: Some(BankProvenance {
            corpus_hash: corpus_hash(corpus),
            split: split_name.to_string(),
        }),
    })
}

// ── persistence ──────────────────────────────────────────────────────
//
// Layout (little-endian): magic "BGKB", version u16, d u32, T u32, then T
// records of (d * f32, text length u32, UTF-8 text).

pub fn save_bank(bank: &KnowledgeBank, path: &Path) -> crate::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    for (emb, sent) in bank.embeddings.iter().zip(&bank.sentences) {
        for &v in emb {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(sent.len() as u32).to_le_bytes());
        buf.extend_from_slice(sent.as_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> crate::Result<KnowledgeBank> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, field: &str| -> crate::Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!("bank file truncated while reading {field}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != BANK_MAGIC {
        return Err(Error::Data(format!(
            "bank magic mismatch: expected {BANK_MAGIC:?}, got {magic:?}"
        )));
    }
    let vb = take(&mut pos, 2, "version")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != BANK_VERSION {
        return Err(Error::Data(format!(
            "bank version mismatch: expected {BANK_VERSION}, got {version}"
        )));
    }
    let db = take(&mut pos, 4, "d")?;
    let dim = u32::from_le_bytes([db[0], db[1], db[2], db[3]]) as usize;
    if dim == 0 {
        return Err(Error::Data("bank field d is zero".into()));
    }
    let tb = take(&mut pos, 4, "T")?;
    let t = u32::from_le_bytes([tb[0], tb[1], tb[2], tb[3]]) as usize;

    let mut embeddings = Vec::with_capacity(t);
    let mut sentences = Vec::with_capacity(t);
    for _ in 0..t {
        let raw = take(&mut pos, dim * 4, "embedding")?;
        let emb: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("bank embedding contains non-finite values".into()));
        }
        let lb = take(&mut pos, 4, "text length")?;
        let len = u32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]) as usize;
        let text_bytes = take(&mut pos, len, "text")?;
        let sent = std::str::from_utf8(text_bytes)
            .map_err(|_| Error::Data("bank sentence is not valid UTF-8".into()))?
            .to_string();
        embeddings.push(emb);
        sentences.push(sent);
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!(
            "bank file has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(KnowledgeBank {
        embeddings,
        sentences,
        dim,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_dataset, CorpusConfig};

    fn test_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            n_cases: 24,
            patches_min: 16,
            patches_max: 32,
            dim: 16,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn two_period_split() {
        assert_eq!(
            split_sentences("Invasive carcinoma. Margins negative."),
            vec!["Invasive carcinoma.", "Margins negative."]
        );
    }

    #[test]
    fn codes_do_not_terminate() {
        assert_eq!(split_sentences("m-8500/3 noted."), vec!["m-8500/3 noted."]);
        assert_eq!(
            split_sentences("tumor size 3.5 cm seen."),
            vec!["tumor size 3.5 cm seen."]
        );
    }

    #[test]
    fn no_terminator_single_sentence() {
        assert_eq!(split_sentences("no terminator here"), vec!["no terminator here"]);
        assert!(split_sentences("").is_empty());
    }

    #[test]
    fn join_reconstructs_corpus_reports() {
        let corpus = test_corpus();
        for case in &corpus.cases {
            let sentences = split_sentences(&case.report);
            assert!(sentences.iter().all(|s| !s.is_empty()));
            assert_eq!(sentences.join(" "), case.report);
        }
    }

    #[test]
    fn bank_counts_all_train_sentences() {
        let corpus = test_corpus();
        let splits = split_dataset(&corpus, 1).unwrap();
        let bank = build_bank(&corpus, &splits, "train").unwrap();
        let expected: usize = cases_for_split(&corpus, &splits, "train")
            .unwrap()
            .iter()
            .map(|c| split_sentences(&c.report).len())
            .sum();
        assert_eq!(bank.len(), expected);
    }

    #[test]
    fn bank_rows_unit_norm_and_dot_equals_cosine() {
        let corpus = test_corpus();
        let splits = split_dataset(&corpus, 1).unwrap();
        let bank = build_bank(&corpus, &splits, "train").unwrap();
        let q = bank.embedding(0);
        for i in 0..bank.len().min(50) {
            let row = bank.embedding(i);
            let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {i} norm {norm}");
            let dot: f64 = q.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
            let cos = crate::corpus::cosine_f32(q, row);
            assert!((dot - cos).abs() < 1e-6);
        }
    }

    #[test]
    fn embedder_is_deterministic_and_aligned() {
        let corpus = test_corpus();
        let embedder = SentenceEmbedder::new(&corpus.meta);
        let s = &corpus.meta.tissues[0].templates[0];
        assert_eq!(embedder.embed(s), embedder.embed(s));
        let cos = crate::corpus::cosine_f32(&embedder.embed(s), &corpus.meta.tissues[0].prototype);
        assert!(cos >= 0.5, "cos {cos}");
    }

    #[test]
    fn non_train_split_rejected() {
        let corpus = test_corpus();
        let splits = split_dataset(&corpus, 1).unwrap();
        assert!(build_bank(&corpus, &splits, "test").is_err());
        assert!(build_bank(&corpus, &splits, "val").is_err());
    }

    #[test]
    fn bank_excludes_val_and_test_sentences() {
        let corpus = test_corpus();
        let splits = split_dataset(&corpus, 1).unwrap();
        let bank = build_bank(&corpus, &splits, "train").unwrap();
        let train_sentences: std::collections::HashSet<String> =
            cases_for_split(&corpus, &splits, "train")
                .unwrap()
                .iter()
                .flat_map(|c| split_sentences(&c.report))
                .collect();
        for s in bank.sentences() {
            assert!(train_sentences.contains(s));
        }
        assert_eq!(bank.provenance.as_ref().unwrap().split, "train");
        assert_eq!(
            bank.provenance.as_ref().unwrap().corpus_hash,
            corpus_hash(&corpus)
        );
    }

    #[test]
    fn bank_file_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = test_corpus();
        let splits = split_dataset(&corpus, 1).unwrap();
        let bank = build_bank(&corpus, &splits, "train").unwrap();
        let p1 = dir.path().join("bank.bgkb");
        save_bank(&bank, &p1).unwrap();
        let loaded = load_bank(&p1).unwrap();
        let p2 = dir.path().join("bank2.bgkb");
        save_bank(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.sentences(), bank.sentences());
    }

    #[test]
    fn bad_magic_and_truncation_errors_name_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bgkb");
        std::fs::write(&p, b"XXXX").unwrap();
        let e = load_bank(&p).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        std::fs::write(&p, b"BGKB\x01\x00").unwrap();
        let e = load_bank(&p).unwrap_err().to_string();
        assert!(e.contains("d") || e.contains("truncated"), "{e}");
    }
}
