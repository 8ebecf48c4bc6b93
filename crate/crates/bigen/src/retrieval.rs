//! Attention-guided knowledge retrieval: select the top-k patches by
//! layer-1 attention score, pool them into spatial regions of size m, and
//! fetch the averaged top-v bank sentences per region by cosine similarity.
//!
//! Retrieval is frozen: no gradient flows through patch selection or the
//! bank. It runs inside every forward pass using that pass's attention.

use crate::bank::KnowledgeBank;
use crate::error::Error;
use crate::par;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct RetrievalConfig {
    /// Patch selection ratio in (0, 1].
    pub k: f64,
    /// Region size (patches pooled per region).
    pub m: usize,
    /// Neighbors retrieved per region.
    pub v: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 0.4, m: 20, v: 3 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Usage(format!("k must be in (0, 1], got {}", self.k)));
        }
        if self.m < 1 {
            return Err(Error::Usage("m must be at least 1".into()));
        }
        if self.v < 1 {
            return Err(Error::Usage("v must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RetrievedKnowledge {
    /// Patch indices that passed selection, in original spatial order.
    pub selected_patches: Vec<usize>,
    /// Mean retrieval embedding per region (`ceil(|P|/m)` rows).
    pub region_features: Vec<Vec<f64>>,
    /// Averaged top-v bank features per region, same row count.
    pub retrieved: Vec<Vec<f64>>,
    /// Bank row indices per region, sorted by similarity descending.
    pub region_indices: Vec<Vec<usize>>,
    /// Cosine similarities matching `region_indices`.
    pub region_similarities: Vec<Vec<f64>>,
}

impl RetrievedKnowledge {
    pub fn num_regions(&self) -> usize {
        self.retrieved.len()
    }
}

/// Indices of the `ceil(M * k)` largest attention scores, re-sorted into
/// original patch order. Ties break toward the lower index.
pub fn select_top_k(attention: &[f64], k: f64) -> crate::Result<Vec<usize>> {
    let m = attention.len();
    if m == 0 {
        return Err(Error::Data("attention vector is empty".into()));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Usage(format!("k must be in (0, 1], got {k}")));
    }
    let count = ((m as f64 * k).ceil() as usize).clamp(1, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        attention[b]
            .total_cmp(&attention[a])
            .then_with(|| a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Means of consecutive runs of `m` rows; the final region may be partial.
pub fn partition_regions(selected: &[&[f32]], m: usize) -> crate::Result<Vec<Vec<f64>>> {
    if m < 1 {
        return Err(Error::Usage("region size m must be at least 1".into()));
    }
    if selected.is_empty() {
        return Err(Error::Data("no selected embeddings to partition".into()));
    }
    let d = selected[0].len();
    let mut regions = Vec::with_capacity(selected.len().div_ceil(m));
    for chunk in selected.chunks(m) {
        let mut mean = vec![0.0f64; d];
        for row in chunk {
            for (acc, &v) in mean.iter_mut().zip(row.iter()) {
                *acc += v as f64;
            }
        }
        let inv = 1.0 / chunk.len() as f64;
        for v in mean.iter_mut() {
            *v *= inv;
        }
        regions.push(mean);
    }
    Ok(regions)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Top-v bank rows by cosine similarity (ties toward the lower bank index)
/// and their arithmetic mean. Bank rows are unit-norm, so the scan is a
/// dot product scaled by the query norm.
pub fn retrieve_region(
    region: &[f64],
    bank: &KnowledgeBank,
    v: usize,
) -> crate::Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let t = bank.len();
    if t == 0 {
        return Err(Error::Data("knowledge bank is empty".into()));
    }
    if v < 1 {
        return Err(Error::Usage("v must be at least 1".into()));
    }
    if v > t {
        return Err(Error::Usage(format!(
            "v = {v} exceeds bank size T = {t}"
        )));
    }
    let qn = norm(region);
    let mut sims: Vec<(f64, usize)> = (0..t)
        .map(|i| {
            let row = bank.embedding(i);
            let dot: f64 = region.iter().zip(row).map(|(&q, &b)| q * b as f64).sum();
            let sim = if qn == 0.0 { 0.0 } else { dot / qn };
            (sim, i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    sims.truncate(v);

    let d = region.len();
    let mut mean = vec![0.0f64; d];
    for &(_, idx) in &sims {
        for (acc, &b) in mean.iter_mut().zip(bank.embedding(idx)) {
            *acc += b as f64;
        }
    }
    let inv = 1.0 / v as f64;
    for x in mean.iter_mut() {
        *x *= inv;
    }
    let (similarities, indices): (Vec<f64>, Vec<usize>) = sims.into_iter().unzip();
    Ok((indices, similarities, mean))
}

/// Full retrieval for one case given its layer-1 attention distribution.
pub fn retrieve_all(
    retrieval_embeddings: &[Vec<f32>],
    attention: &[f64],
    bank: &KnowledgeBank,
    config: &RetrievalConfig,
) -> crate::Result<RetrievedKnowledge> {
    config.validate()?;
    if attention.len() != retrieval_embeddings.len() {
        return Err(Error::Data(format!(
            "attention length {} does not match patch count {}",
            attention.len(),
            retrieval_embeddings.len()
        )));
    }
    let sum: f64 = attention.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Numeric(format!(
            "attention does not sum to 1 (sum = {sum})"
        )));
    }
    let selected = select_top_k(attention, config.k)?;
    let rows: Vec<&[f32]> = selected
        .iter()
        .map(|&i| retrieval_embeddings[i].as_slice())
        .collect();
    let region_features = partition_regions(&rows, config.m)?;

    let results = par::map_slice(&region_features, |region| {
        retrieve_region(region, bank, config.v)
    });
    let mut retrieved = Vec::with_capacity(region_features.len());
    let mut region_indices = Vec::with_capacity(region_features.len());
    let mut region_similarities = Vec::with_capacity(region_features.len());
    for r in results {
        let (idx, sims, mean) = r?;
        region_indices.push(idx);
        region_similarities.push(sims);
        retrieved.push(mean);
    }
    Ok(RetrievedKnowledge {
        selected_patches: selected,
        region_features,
        retrieved,
        region_indices,
        region_similarities,
    })
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    case_id: &'a str,
    region: usize,
    sentences: Vec<&'a str>,
    similarities: &'a [f64],
}

/// Line-delimited JSON dump of retrieved sentences per region.
pub fn write_retrieval_dump(
    knowledge: &RetrievedKnowledge,
    bank: &KnowledgeBank,
    case_id: &str,
    path: &Path,
) -> crate::Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?,
    );
    for (region, (indices, sims)) in knowledge
        .region_indices
        .iter()
        .zip(&knowledge.region_similarities)
        .enumerate()
    {
        let record = DumpRecord {
            case_id,
            region,
            sentences: indices.iter().map(|&i| bank.sentence(i)).collect(),
            similarities: sims,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::KnowledgeBank;

    fn orthonormal_bank() -> KnowledgeBank {
        let embeddings = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let sentences = vec!["e1.".to_string(), "e2.".to_string(), "e3.".to_string()];
        KnowledgeBank::from_parts(embeddings, sentences).unwrap()
    }

    #[test]
    fn top_k_counts_and_order() {
        let attn = vec![0.05, 0.3, 0.1, 0.2, 0.05, 0.1, 0.1, 0.03, 0.04, 0.03];
        let idx = select_top_k(&attn, 0.4).unwrap();
        assert_eq!(idx.len(), 4);
        // re-sorted into original patch order
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(idx, vec![1, 2, 3, 5]);
    }

    #[test]
    fn top_k_full_ratio_returns_all() {
        let attn = vec![0.25, 0.25, 0.25, 0.25];
        assert_eq!(select_top_k(&attn, 1.0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn top_k_single_max() {
        let attn = vec![0.1, 0.5, 0.4];
        // ceil(3 * 0.3) = 1 patch: the single largest score
        assert_eq!(select_top_k(&attn, 0.3).unwrap(), vec![1]);
        // ceil(3 * 0.34) = 2 patches
        assert_eq!(select_top_k(&attn, 0.34).unwrap(), vec![1, 2]);
    }

    #[test]
    fn top_k_ties_take_lower_index() {
        let attn = vec![0.25, 0.25, 0.25, 0.25];
        assert_eq!(select_top_k(&attn, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn top_k_empty_errors() {
        assert!(select_top_k(&[], 0.4).is_err());
    }

    #[test]
    fn partition_means_and_partial_tail() {
        let rows: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32, 1.0]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let regions = partition_regions(&refs, 4).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0], vec![1.5, 1.0]);
        assert_eq!(regions[1], vec![5.5, 1.0]);

        let rows: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let regions = partition_regions(&refs, 20).unwrap();
        assert_eq!(regions.len(), 3);
        // last region averages the 10 leftover rows 40..49
        assert_eq!(regions[2], vec![44.5]);
    }

    #[test]
    fn partition_m1_is_identity() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let regions = partition_regions(&refs, 1).unwrap();
        assert_eq!(regions, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn retrieve_exact_match_on_orthonormal_bank() {
        let bank = orthonormal_bank();
        let (idx, sims, mean) = retrieve_region(&[1.0, 0.0, 0.0], &bank, 1).unwrap();
        assert_eq!(idx, vec![0]);
        assert!((sims[0] - 1.0).abs() < 1e-12);
        assert_eq!(mean, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn retrieve_v_equals_t_gives_column_mean() {
        let bank = orthonormal_bank();
        let (_, _, mean) = retrieve_region(&[1.0, 0.0, 0.0], &bank, 3).unwrap();
        let third = 1.0 / 3.0;
        for x in mean {
            assert!((x - third).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieve_v_larger_than_bank_errors() {
        let bank = orthonormal_bank();
        assert!(retrieve_region(&[1.0, 0.0, 0.0], &bank, 4).is_err());
    }

    #[test]
    fn similarities_sorted_non_increasing() {
        let bank = orthonormal_bank();
        let (_, sims, _) = retrieve_region(&[0.9, 0.4, 0.1], &bank, 3).unwrap();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn query_scale_invariance() {
        let bank = orthonormal_bank();
        let q = [0.3, 0.5, 0.2];
        let scaled: Vec<f64> = q.iter().map(|x| x * 7.5).collect();
        let (i1, _, m1) = retrieve_region(&q, &bank, 2).unwrap();
        let (i2, _, m2) = retrieve_region(&scaled, &bank, 2).unwrap();
        assert_eq!(i1, i2);
        for (a, b) in m1.iter().zip(&m2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_oracle_agreement() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = 100;
        let d = 16;
        let mut embeddings = Vec::new();
        for _ in 0..t {
            let mut row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            embeddings.push(row);
        }
        let sentences: Vec<String> = (0..t).map(|i| format!("s{i}.")).collect();
        let bank = KnowledgeBank::from_parts(embeddings.clone(), sentences).unwrap();

        for _ in 0..50 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (idx, _, mean) = retrieve_region(&q, &bank, 3).unwrap();

            // independent exhaustive scan
            let qn: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut scored: Vec<(f64, usize)> = embeddings
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let dot: f64 = q.iter().zip(row).map(|(&a, &b)| a * b as f64).sum();
                    let bn: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    (dot / (qn * bn), i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let want_idx: Vec<usize> = scored[..3].iter().map(|&(_, i)| i).collect();
            let mut want_mean = vec![0.0f64; d];
            for &(_, i) in &scored[..3] {
                for (acc, &b) in want_mean.iter_mut().zip(&embeddings[i]) {
                    *acc += b as f64 / 3.0;
                }
            }
            assert_eq!(idx, want_idx);
            for (a, b) in mean.iter().zip(&want_mean) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bank_row_permutation_keeps_features() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let mut embeddings: Vec<Vec<f32>> = Vec::new();
        for _ in 0..20 {
            let mut row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            embeddings.push(row);
        }
        let sentences: Vec<String> = (0..20).map(|i| format!("s{i}.")).collect();
        let bank = KnowledgeBank::from_parts(embeddings.clone(), sentences.clone()).unwrap();
        let mut perm: Vec<usize> = (0..20).collect();
        perm.reverse();
        let shuffled_emb: Vec<Vec<f32>> = perm.iter().map(|&i| embeddings[i].clone()).collect();
        let shuffled_sent: Vec<String> = perm.iter().map(|&i| sentences[i].clone()).collect();
        let bank2 = KnowledgeBank::from_parts(shuffled_emb, shuffled_sent).unwrap();

        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, _, m1) = retrieve_region(&q, &bank, 3).unwrap();
        let (_, _, m2) = retrieve_region(&q, &bank2, 3).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
