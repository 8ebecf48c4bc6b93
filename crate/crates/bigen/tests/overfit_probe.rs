// scratch probe: overfit timing and convergence
use bigen::corpus::{generate_corpus, CorpusConfig, SplitManifest};
use bigen::corpus::split_dataset;
use bigen::bank::build_bank;
use bigen::trainer::{train, teacher_forced_accuracy, generate_for_cases, TrainConfig};
use bigen::metrics::bleu;
use bigen::corpus::cases_for_split;
use bigen::encoder::EncoderConfig;
use bigen::retrieval::RetrievalConfig;

#[test]
fn probe_overfit() {
    let t0 = std::time::Instant::now();
    let corpus = generate_corpus(&CorpusConfig {
        n_cases: 4,
        patches_min: 48,
        patches_max: 96,
        dim: 32,
        seed: 5,
        multi_case_fraction: 0.0,
        ..CorpusConfig::default()
    }).unwrap();
    let ids: Vec<String> = corpus.cases.iter().map(|c| c.case_id.clone()).collect();
    let splits = SplitManifest { seed: 0, train: ids.clone(), val: ids.clone(), test: ids.clone() };
    let bank = build_bank(&corpus, &splits, "train").unwrap();
    for lr in [1e-4, 3e-4, 1e-3] {
        let cfg = TrainConfig {
            epochs: 75,   // 4 cases, accum 4 -> 1 step per epoch... let's use accum 1 -> 4 steps/epoch -> 300 steps
            accum: 1,
            lr,
            weight_decay: 5e-5,
            seed: 1,
            encoder: EncoderConfig { dim: 32, ..EncoderConfig::default() },
            retrieval: RetrievalConfig { k: 0.4, m: 20, v: 3 },
            patience: 10_000,
            min_freq: 1,
            max_len: 60,
            beam: 3,
        };
        let t1 = std::time::Instant::now();
        let out = train(&cfg, &corpus, &splits, Some(&bank)).unwrap();
        let train_cases = cases_for_split(&corpus, &splits, "train").unwrap();
        let acc = teacher_forced_accuracy(&out.model, &train_cases, Some(&bank)).unwrap();
        let gens = generate_for_cases(&out.model, &train_cases, Some(&bank), 1, 60).unwrap();
        let cands: Vec<String> = gens.iter().map(|g| g.text.clone()).collect();
        let refs: Vec<String> = train_cases.iter().map(|c| c.report.clone()).collect();
        let b4 = bleu(&cands, &refs, 4).unwrap();
        println!("lr={lr:.0e} secs={:.1} acc={acc:.3} bleu4={b4:.3} last_loss={:.4} best_val={:.3}",
            t1.elapsed().as_secs_f64(), out.log.last().unwrap().train_loss, out.best_val_bleu4);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
