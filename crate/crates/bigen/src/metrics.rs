//! Report-generation metrics: corpus BLEU-n, ROUGE-L, a simplified METEOR
//! (exact + stemmed matching, no synonym lookup), a dictionary-based
//! entity-overlap score, and Her-2 status classification.
//!
//! METEOR and the entity score are deliberate simplifications of the
//! metrics they imitate, and their names carry a `_simplified` marker in
//! all output so the numbers are never compared across toolkits.

use crate::corpus::CorpusMeta;
use crate::error::Error;
use crate::text::tokenize;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor_simplified: f64,
    pub rouge_l: f64,
    pub fact_ent_simplified: f64,
    pub her2_precision: f64,
    pub her2_recall: f64,
    pub her2_f1: f64,
}

impl MetricReport {
    pub fn compute(
        candidates: &[String],
        references: &[String],
        dictionary: &[String],
    ) -> crate::Result<MetricReport> {
        Ok(MetricReport {
            bleu1: bleu(candidates, references, 1)?,
            bleu2: bleu(candidates, references, 2)?,
            bleu3: bleu(candidates, references, 3)?,
            bleu4: bleu(candidates, references, 4)?,
            meteor_simplified: meteor_simplified(candidates, references)?,
            rouge_l: rouge_l(candidates, references)?,
            fact_ent_simplified: fact_ent(candidates, references, dictionary)?,
            her2_precision: her2_metrics(candidates, references)?.0,
            her2_recall: her2_metrics(candidates, references)?.1,
            her2_f1: her2_metrics(candidates, references)?.2,
        })
    }

    pub fn nlp_values(&self) -> [(&'static str, f64); 7] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("meteor_simplified", self.meteor_simplified),
            ("rouge_l", self.rouge_l),
            ("fact_ent_simplified", self.fact_ent_simplified),
        ]
    }

    /// Machine-readable key=value lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.nlp_values() {
            out.push_str(&format!("{k} = {v:.6}\n"));
        }
        out.push_str(&format!("her2_precision = {:.6}\n", self.her2_precision));
        out.push_str(&format!("her2_recall = {:.6}\n", self.her2_recall));
        out.push_str(&format!("her2_f1 = {:.6}\n", self.her2_f1));
        out
    }

    /// Human-readable one-line table row.
    pub fn table_row(&self) -> String {
        format!(
            "{:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.meteor_simplified,
            self.rouge_l,
            self.fact_ent_simplified,
            self.her2_precision,
            self.her2_recall,
            self.her2_f1
        )
    }

    pub fn table_header() -> &'static str {
        "BLEU-1 BLEU-2 BLEU-3 BLEU-4 METEOR* ROUGE-L FACT*  HER2-P HER2-R HER2-F1  (*simplified)"
    }
}

fn check_corpus(candidates: &[String], references: &[String]) -> crate::Result<()> {
    if candidates.is_empty() || references.is_empty() {
        return Err(Error::Data("metric corpus is empty".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "candidate/reference count mismatch: {} vs {}",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

// ── BLEU ─────────────────────────────────────────────────────────────

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with modified n-gram precision and brevity penalty;
/// geometric mean over orders 1..=n. Orders >= 2 get add-one smoothing
/// only when their corpus-level matched count is zero.
pub fn bleu(candidates: &[String], references: &[String], n: usize) -> crate::Result<f64> {
    check_corpus(candidates, references)?;
    if n == 0 || n > 8 {
        return Err(Error::Usage(format!("bleu order {n} out of range")));
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();

    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, r) in cand_tokens.iter().zip(&ref_tokens) {
        cand_len += c.len();
        ref_len += r.len();
    }

    let mut log_sum = 0.0f64;
    for order in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (c, r) in cand_tokens.iter().zip(&ref_tokens) {
            let cc = ngram_counts(c, order);
            let rc = ngram_counts(r, order);
            for (gram, &count) in &cc {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(order - 1);
        }
        let p = if matched == 0 && order >= 2 {
            (matched + 1) as f64 / (total + 1) as f64
        } else if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

// ── ROUGE-L ──────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with beta = 1.2, averaged over cases.
pub fn rouge_l(candidates: &[String], references: &[String]) -> crate::Result<f64> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0f64;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        if ct.is_empty() || rt.is_empty() {
            continue;
        }
        let lcs = lcs_len(&ct, &rt) as f64;
        let recall = lcs / rt.len() as f64;
        let precision = lcs / ct.len() as f64;
        let denom = recall + ROUGE_BETA * ROUGE_BETA * precision;
        if denom > 0.0 {
            sum += (1.0 + ROUGE_BETA * ROUGE_BETA) * recall * precision / denom;
        }
    }
    Ok(sum / candidates.len() as f64)
}

// ── METEOR (simplified) ──────────────────────────────────────────────

const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: f64 = 3.0;

/// Light suffix stemmer for the stemmed-match stage.
fn stem(token: &str) -> String {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if token.len() > suffix.len() + 2 && token.ends_with(suffix) {
            return token[..token.len() - suffix.len()].to_string();
        }
    }
    token.to_string()
}

/// Aligned (candidate, reference) position pairs: exact matches first,
/// then stemmed matches, each preferring the reference position that
/// continues the previous match, else the leftmost unmatched.
fn align_unigrams(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; cand.len()];

    for stage in 0..2 {
        let key = |t: &String| -> String {
            if stage == 0 {
                t.clone()
            } else {
                stem(t)
            }
        };
        let mut last_ref: Option<usize> = None;
        for (ci, ct) in cand.iter().enumerate() {
            if cand_match[ci].is_some() {
                last_ref = cand_match[ci];
                continue;
            }
            let ck = key(ct);
            let preferred = last_ref.map(|r| r + 1);
            let mut chosen = None;
            if let Some(p) = preferred {
                if p < reference.len() && !ref_used[p] && key(&reference[p]) == ck {
                    chosen = Some(p);
                }
            }
            if chosen.is_none() {
                chosen = reference
                    .iter()
                    .enumerate()
                    .find(|(ri, rt)| !ref_used[*ri] && key(rt) == ck)
                    .map(|(ri, _)| ri);
            }
            if let Some(ri) = chosen {
                ref_used[ri] = true;
                cand_match[ci] = Some(ri);
                last_ref = Some(ri);
            }
        }
    }
    cand_match
        .iter()
        .enumerate()
        .filter_map(|(ci, r)| r.map(|ri| (ci, ri)))
        .collect()
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(ci, ri) in pairs {
        match prev {
            Some((pc, pr)) if ci == pc + 1 && ri == pr + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((ci, ri));
    }
    chunks
}

/// Unigram METEOR with exact-then-stemmed alignment. A single contiguous
/// alignment counts as unfragmented (zero penalty), so identical texts
/// score exactly 1.
pub fn meteor_simplified(candidates: &[String], references: &[String]) -> crate::Result<f64> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0f64;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        if ct.is_empty() || rt.is_empty() {
            continue;
        }
        let pairs = align_unigrams(&ct, &rt);
        let m = pairs.len() as f64;
        if m == 0.0 {
            continue;
        }
        let precision = m / ct.len() as f64;
        let recall = m / rt.len() as f64;
        let f_mean =
            precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
        let chunks = count_chunks(&pairs);
        let penalty = if chunks <= 1 {
            0.0
        } else {
            METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA)
        };
        sum += f_mean * (1.0 - penalty);
    }
    Ok(sum / candidates.len() as f64)
}

// ── entity overlap (simplified Fact score) ───────────────────────────

/// Dictionary for entity extraction: tissue keywords, the her-2 marker,
/// and any morphology-style code tokens appearing in the templates.
pub fn entity_dictionary(meta: &CorpusMeta) -> Vec<String> {
    let mut dict: Vec<String> = Vec::new();
    for tissue in &meta.tissues {
        dict.push(tissue.name.clone());
        for template in &tissue.templates {
            for tok in tokenize(template) {
                if is_code_token(&tok) && !dict.contains(&tok) {
                    dict.push(tok);
                }
            }
        }
    }
    dict.push("her-2".to_string());
    dict.sort();
    dict.dedup();
    dict
}

fn is_code_token(tok: &str) -> bool {
    tok.chars().any(|c| c.is_ascii_digit()) && (tok.contains('-') || tok.contains('/'))
}

fn extract_entities(textv: &str, dictionary: &[String]) -> HashMap<String, usize> {
    let tokens = tokenize(textv);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in &tokens {
        if dictionary.iter().any(|d| d == tok) {
            *counts.entry(tok.clone()).or_default() += 1;
        }
    }
    counts
}

/// Micro-averaged F1 between entity multisets extracted from candidate
/// and reference text.
pub fn fact_ent(
    candidates: &[String],
    references: &[String],
    dictionary: &[String],
) -> crate::Result<f64> {
    check_corpus(candidates, references)?;
    if dictionary.is_empty() {
        return Err(Error::Data("entity dictionary is empty".into()));
    }
    let mut overlap = 0usize;
    let mut cand_total = 0usize;
    let mut ref_total = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        let ce = extract_entities(c, dictionary);
        let re = extract_entities(r, dictionary);
        for (entity, &count) in &ce {
            overlap += count.min(re.get(entity).copied().unwrap_or(0));
        }
        cand_total += ce.values().sum::<usize>();
        ref_total += re.values().sum::<usize>();
    }
    let precision = if cand_total == 0 {
        0.0
    } else {
        overlap as f64 / cand_total as f64
    };
    let recall = if ref_total == 0 {
        0.0
    } else {
        overlap as f64 / ref_total as f64
    };
    Ok(f1(precision, recall))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

// ── Her-2 classification ─────────────────────────────────────────────

/// Status parsed from a "her-2 ... positive/negative" sentence, if any.
pub fn parse_her2(textv: &str) -> Option<bool> {
    let tokens = tokenize(textv);
    let marker = tokens.iter().position(|t| t == "her-2")?;
    for tok in &tokens[marker + 1..] {
        match tok.as_str() {
            "positive" => return Some(true),
            "negative" => return Some(false),
            "." => return None,
            _ => {}
        }
    }
    None
}

/// Binary precision/recall/F1 for Her-2 status, positive as the positive
/// class. An unparseable candidate counts as a negative prediction; an
/// unparseable reference is a corpus-contract error.
pub fn her2_metrics(
    candidates: &[String],
    references: &[String],
) -> crate::Result<(f64, f64, f64)> {
    check_corpus(candidates, references)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        let truth = parse_her2(r).ok_or_else(|| {
            Error::Data(format!(
                "reference {i} has no parseable her-2 status sentence"
            ))
        })?;
        let pred = parse_her2(c).unwrap_or(false);
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok((precision, recall, f1(precision, recall)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_identical_is_one() {
        let texts = v(&["the cat sat on the mat", "margins are negative"]);
        for n in 1..=4 {
            assert!((bleu(&texts, &texts, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_disjoint_unigrams_is_zero() {
        let cands = v(&["alpha beta"]);
        let refs = v(&["gamma delta"]);
        assert_eq!(bleu(&cands, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_golden_cat_mat() {
        // Hand-evaluated: p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 smoothed = 1/4,
        // lengths equal so BP = 1.
        let cands = v(&["the cat sat on the mat"]);
        let refs = v(&["the cat is on the mat"]);
        let expect1 = 5.0 / 6.0;
        let expect2 = (0.5f64).sqrt();
        let expect3 = (0.125f64).powf(1.0 / 3.0);
        let expect4 = (0.03125f64).powf(0.25);
        assert!((bleu(&cands, &refs, 1).unwrap() - expect1).abs() < 1e-9);
        assert!((bleu(&cands, &refs, 2).unwrap() - expect2).abs() < 1e-9);
        assert!((bleu(&cands, &refs, 3).unwrap() - expect3).abs() < 1e-9);
        assert!((bleu(&cands, &refs, 4).unwrap() - expect4).abs() < 1e-9);
    }

    #[test]
    fn bleu_empty_corpus_errors() {
        assert!(bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn rouge_identical_and_disjoint() {
        let texts = v(&["focal necrosis observed"]);
        assert!((rouge_l(&texts, &texts).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&v(&["a b"]), &v(&["c d"])).unwrap(), 0.0);
    }

    #[test]
    fn rouge_golden_lcs3() {
        // LCS("a b c d", "a c b d") = 3; P = R = 3/4 so F = 3/4 for any beta.
        let score = rouge_l(&v(&["a b c d"]), &v(&["a c b d"])).unwrap();
        assert!((score - 0.75).abs() < 1e-9);
    }

    #[test]
    fn meteor_identical_is_one_and_zero_match_is_zero() {
        let texts = v(&["dense fibrous stroma noted"]);
        assert!((meteor_simplified(&texts, &texts).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            meteor_simplified(&v(&["alpha beta"]), &v(&["gamma delta"])).unwrap(),
            0.0
        );
    }

    #[test]
    fn meteor_golden_one_word_different() {
        // cand "the cat sat on the mat" vs ref "the cat is on the mat":
        // 5 matches in 2 chunks, P = R = 5/6,
        // Fmean = 5/6, penalty = 0.5 * (2/5)^3.
        let cands = v(&["the cat sat on the mat"]);
        let refs = v(&["the cat is on the mat"]);
        let expected = (5.0 / 6.0) * (1.0 - 0.5 * (2.0f64 / 5.0).powi(3));
        let got = meteor_simplified(&cands, &refs).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got} want {expected}");
    }

    #[test]
    fn meteor_stemmed_stage_matches() {
        // "noted" aligns with "noting" only through the stem stage.
        let s = meteor_simplified(&v(&["necrosis noted"]), &v(&["necrosis noting"])).unwrap();
        assert!(s > 0.9, "{s}");
    }

    #[test]
    fn fact_ent_analytic_example() {
        let dict = v(&["carcinoma", "her-2", "stroma"]);
        let cands = v(&["carcinoma and her-2 present"]);
        let refs = v(&["carcinoma only"]);
        // precision 1/2, recall 1/1 -> F1 = 2/3
        let got = fact_ent(&cands, &refs, &dict).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn fact_ent_edge_cases() {
        let dict = v(&["carcinoma"]);
        let same = v(&["carcinoma present"]);
        assert!((fact_ent(&same, &same, &dict).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            fact_ent(&v(&["nothing here"]), &v(&["carcinoma present"]), &dict).unwrap(),
            0.0
        );
        assert!(fact_ent(&same, &same, &[]).is_err());
    }

    #[test]
    fn her2_parsing_and_analytic_counts() {
        assert_eq!(parse_her2("her-2 status: positive."), Some(true));
        assert_eq!(parse_her2("her-2 status: negative. more text."), Some(false));
        assert_eq!(parse_her2("no status here."), None);
        // status must appear inside the her-2 sentence
        assert_eq!(parse_her2("her-2 status: unknown. positive."), None);

        // all-positive predictions, half-positive references
        let cands = v(&["her-2 status: positive.", "her-2 status: positive."]);
        let refs = v(&["her-2 status: positive.", "her-2 status: negative."]);
        let (p, r, f) = her2_metrics(&cands, &refs).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn her2_perfect_predictions() {
        let refs = v(&["her-2 status: positive.", "her-2 status: negative."]);
        let (p, r, f) = her2_metrics(&refs.clone(), &refs).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn her2_unparseable_reference_errors() {
        let cands = v(&["her-2 status: positive."]);
        let refs = v(&["no biomarker sentence."]);
        assert!(her2_metrics(&cands, &refs).is_err());
    }

    #[test]
    fn her2_confusion_counts_match_hand_tally() {
        // 20-case fixture: i % 4 == 0 -> (pred +, ref +); i % 4 == 1 ->
        // (pred +, ref -); i % 4 == 2 -> (pred -, ref +); else both -.
        // tp = 5, fp = 5, fn = 5 -> P = R = F1 = 0.5.
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for i in 0..20 {
            let (c, r) = match i % 4 {
                0 => (true, true),
                1 => (true, false),
                2 => (false, true),
                _ => (false, false),
            };
            cands.push(format!(
                "her-2 status: {}.",
                if c { "positive" } else { "negative" }
            ));
            refs.push(format!(
                "her-2 status: {}.",
                if r { "positive" } else { "negative" }
            ));
        }
        let (p, r, f) = her2_metrics(&cands, &refs).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entity_dictionary_includes_codes() {
        let corpus = crate::corpus::generate_corpus(&crate::corpus::CorpusConfig {
            n_cases: 2,
            patches_min: 4,
            patches_max: 8,
            dim: 8,
            ..Default::default()
        })
        .unwrap();
        let dict = entity_dictionary(&corpus.meta);
        assert!(dict.contains(&"carcinoma".to_string()));
        assert!(dict.contains(&"her-2".to_string()));
        assert!(dict.contains(&"m-8500/3".to_string()));
    }
}
