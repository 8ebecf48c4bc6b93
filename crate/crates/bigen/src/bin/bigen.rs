//! Command-line entry point for the full pipeline: corpus generation,
//! bank construction, training, generation, evaluation, the ablation
//! grid, hyperparameter sweeps, and attention heatmap export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/contract error,
//! 3 numerical fault.

use bigen::bank::{build_bank, load_bank, save_bank};
use bigen::corpus::{
    cases_for_split, generate_corpus, load_corpus, load_splits, save_corpus, save_splits,
    split_dataset, CorpusConfig, Vocab,
};
use bigen::encoder::write_attention_pgm;
use bigen::error::Error;
use bigen::manifest::RunManifest;
use bigen::metrics::{entity_dictionary, MetricReport};
use bigen::retrieval::write_retrieval_dump;
use bigen::tensor::{Graph, LeafCache};
use bigen::trainer::{
    run_ablation, run_sweep, train, GenRecord, Model, SweepParam, TrainConfig,
};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "bigen",
    version,
    about = "Bi-modal report generation over patch features with knowledge retrieval"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic aligned corpus plus a patient-disjoint split manifest.
    GenCorpus(GenCorpusArgs),
    /// Build the sentence knowledge bank from the train split.
    BuildBank(BuildBankArgs),
    /// Train a model and retain the best-validation checkpoint.
    Train(TrainArgs),
    /// Generate reports for a split from a trained model.
    Generate(GenerateArgs),
    /// Score generated reports against their references.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the six-row component ablation grid.
    Ablate(AblateArgs),
    /// Sweep one retrieval hyperparameter (k, v, or m).
    Sweep(SweepArgs),
    /// Export layer-1 attention heatmaps as PGM images.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// RNG seed (default 1).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of cases (default 977, split 796/88/93).
    #[arg(long, default_value_t = 977)]
    cases: usize,
    /// Number of tissue types (default 6).
    #[arg(long, default_value_t = 6)]
    tissues: usize,
    /// Minimum patches per case (default 64).
    #[arg(long, default_value_t = 64)]
    patches_min: usize,
    /// Maximum patches per case (default 256).
    #[arg(long, default_value_t = 256)]
    patches_max: usize,
    /// Embedding width of the generated features (default 32).
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Fraction of cases that reuse the previous case's patient (default 0).
    #[arg(long, default_value_t = 0.0)]
    multi_case_fraction: f64,
    /// Output directory for corpus.jsonl, splits.json, manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    /// Corpus file (corpus.jsonl).
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest (splits.json).
    #[arg(long)]
    splits: PathBuf,
    /// Source split; the bank may only be built from "train" (default train).
    #[arg(long, default_value = "train")]
    split: String,
    /// Output bank file (.bgkb).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

/// Model and optimizer flags shared by train, ablate, and sweep. Values
/// left unset fall back to the config file, then to the built-in defaults.
#[derive(Args, Debug, Clone)]
struct HyperArgs {
    /// Flat key = value config file applied underneath explicit flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model width d (default 512).
    #[arg(long)]
    dim: Option<usize>,
    /// Encoder/decoder depth L (default 3).
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads (default 4).
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward hidden multiple of dim (default 2).
    #[arg(long)]
    ffn_mult: Option<usize>,
    /// Patch selection ratio k (default 0.4).
    #[arg(long)]
    k: Option<f64>,
    /// Region size m (default 20).
    #[arg(long)]
    m: Option<usize>,
    /// Retrieved neighbors v (default 3).
    #[arg(long)]
    v: Option<usize>,
    /// Weight sharing between branches (default true).
    #[arg(long)]
    ws: Option<bool>,
    /// Weight sharing across layers (default true).
    #[arg(long)]
    wsl: Option<bool>,
    /// Visual token cross-attention (default true).
    #[arg(long)]
    vtca: Option<bool>,
    /// Knowledge retrieval (default true).
    #[arg(long)]
    kr: Option<bool>,
    /// Textual token cross-attention (default true).
    #[arg(long)]
    ttca: Option<bool>,
    /// Adam learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay (default 5e-5).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Training epochs (default 30).
    #[arg(long)]
    epochs: Option<usize>,
    /// Cases accumulated per optimizer step (default 8).
    #[arg(long)]
    accum: Option<usize>,
    /// Run seed (default 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Early-stop patience on validation BLEU-4 (default 10).
    #[arg(long)]
    patience: Option<usize>,
    /// Vocabulary minimum frequency (default 1).
    #[arg(long)]
    min_freq: Option<usize>,
    /// Generation length cap (default 60).
    #[arg(long)]
    max_len: Option<usize>,
    /// Beam width for evaluation decoding (default 3).
    #[arg(long)]
    beam: Option<usize>,
}

impl HyperArgs {
    /// defaults < config file < explicit flags.
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                TrainConfig::from_flat(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.dim {
            cfg.encoder.dim = v;
        }
        if let Some(v) = self.layers {
            cfg.encoder.layers = v;
        }
        if let Some(v) = self.heads {
            cfg.encoder.heads = v;
        }
        if let Some(v) = self.ffn_mult {
            cfg.encoder.ffn_mult = v;
        }
        if let Some(v) = self.k {
            cfg.retrieval.k = v;
        }
        if let Some(v) = self.m {
            cfg.retrieval.m = v;
        }
        if let Some(v) = self.v {
            cfg.retrieval.v = v;
        }
        if let Some(v) = self.ws {
            cfg.encoder.ws = v;
        }
        if let Some(v) = self.wsl {
            cfg.encoder.wsl = v;
        }
        if let Some(v) = self.vtca {
            cfg.encoder.vtca = v;
        }
        if let Some(v) = self.kr {
            cfg.encoder.kr = v;
        }
        if let Some(v) = self.ttca {
            cfg.encoder.ttca = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.accum {
            cfg.accum = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.min_freq {
            cfg.min_freq = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.beam {
            cfg.beam = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest.
    #[arg(long)]
    splits: PathBuf,
    /// Knowledge bank file (required when kr is on).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Output directory for checkpoint.bgck, config.txt, train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Training output directory (checkpoint.bgck + config.txt).
    #[arg(long)]
    model_dir: PathBuf,
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest.
    #[arg(long)]
    splits: PathBuf,
    /// Split to generate for (default test).
    #[arg(long, default_value = "test")]
    split: String,
    /// Knowledge bank file (required when the model uses kr).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Beam width override; the trained config's beam is used by default.
    #[arg(long)]
    beam: Option<usize>,
    /// Generation length cap override.
    #[arg(long)]
    max_len: Option<usize>,
    /// Output file for line-delimited generation records.
    #[arg(long)]
    out: PathBuf,
    /// Also dump per-region retrieved sentences to this file.
    #[arg(long)]
    retrieval_dump: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Generation records from the generate subcommand.
    #[arg(long)]
    generated: PathBuf,
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest.
    #[arg(long)]
    splits: PathBuf,
    /// Split the records belong to (default test).
    #[arg(long, default_value = "test")]
    split: String,
    /// Output file for machine-readable metrics.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest.
    #[arg(long)]
    splits: PathBuf,
    /// Knowledge bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Comma-separated seeds to average over (default 1,2,3).
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Output directory for ablation.jsonl and ablation.txt.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Parameter to sweep: k, v, or m.
    #[arg(long)]
    param: String,
    /// Comma-separated values, e.g. 0.2,0.4,0.6,0.8,1.0.
    #[arg(long)]
    values: String,
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest.
    #[arg(long)]
    splits: PathBuf,
    /// Knowledge bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Output directory for sweep.jsonl and sweep.txt.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Training output directory (checkpoint.bgck + config.txt).
    #[arg(long)]
    model_dir: PathBuf,
    /// Corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest (used to rebuild the training vocabulary).
    #[arg(long)]
    splits: PathBuf,
    /// Knowledge bank file (required when the model uses kr).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Comma-separated case ids to render.
    #[arg(long)]
    cases: String,
    /// Output directory; one <case_id>.pgm per case.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

fn main() {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenCorpus(args) => cmd_gen_corpus(args),
        Cmd::BuildBank(args) => cmd_build_bank(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Heatmap(args) => cmd_heatmap(args),
    }
}

fn guard_output(path: &Path, force: bool) -> Result<(), Error> {
    if path.exists() && !force {
        return Err(Error::Data(format!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), Error> {
    ensure_dir(&args.out)?;
    let corpus_path = args.out.join("corpus.jsonl");
    let splits_path = args.out.join("splits.json");
    let manifest_path = args.out.join("manifest.json");
    guard_output(&corpus_path, args.force)?;
    guard_output(&splits_path, args.force)?;

    let cfg = CorpusConfig {
        seed: args.seed,
        n_cases: args.cases,
        tissue_count: args.tissues,
        patches_min: args.patches_min,
        patches_max: args.patches_max,
        dim: args.dim,
        multi_case_fraction: args.multi_case_fraction,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    let splits = split_dataset(&corpus, args.seed)?;
    save_corpus(&corpus, &corpus_path)?;
    save_splits(&splits, &splits_path)?;

    let mut manifest = RunManifest::new("gen-corpus", args.seed);
    manifest.config_entry("cases", args.cases);
    manifest.config_entry("tissues", args.tissues);
    manifest.config_entry("patches_min", args.patches_min);
    manifest.config_entry("patches_max", args.patches_max);
    manifest.config_entry("dim", args.dim);
    manifest.config_entry("multi_case_fraction", args.multi_case_fraction);
    manifest.output(&corpus_path)?;
    manifest.output(&splits_path)?;
    manifest.write(&manifest_path)?;

    println!(
        "wrote {} cases (train {} / val {} / test {}) to {}",
        corpus.cases.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_build_bank(args: BuildBankArgs) -> Result<(), Error> {
    guard_output(&args.out, args.force)?;
    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let bank = build_bank(&corpus, &splits, &args.split)?;
    save_bank(&bank, &args.out)?;

    let manifest_path = manifest_sibling(&args.out);
    let mut manifest = RunManifest::new("build-bank", splits.seed);
    manifest.config_entry("split", &args.split);
    manifest.input(&args.corpus);
    manifest.input(&args.splits);
    manifest.output(&args.out)?;
    manifest.write(&manifest_path)?;

    println!(
        "bank with {} sentences (d = {}) written to {}",
        bank.len(),
        bank.dim(),
        args.out.display()
    );
    Ok(())
}

fn manifest_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.json");
    path.with_file_name(name)
}

fn load_bank_if(path: &Option<PathBuf>, kr: bool) -> Result<Option<bigen::bank::KnowledgeBank>, Error> {
    match (path, kr) {
        (Some(p), _) => Ok(Some(load_bank(p)?)),
        (None, true) => Err(Error::Usage(
            "knowledge retrieval is enabled; pass --bank".into(),
        )),
        (None, false) => Ok(None),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = args.hyper.resolve()?;
    ensure_dir(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.bgck");
    let config_path = args.out.join("config.txt");
    let log_path = args.out.join("train_log.jsonl");
    let manifest_path = args.out.join("manifest.json");
    guard_output(&ckpt_path, args.force)?;

    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let bank = load_bank_if(&args.bank, cfg.encoder.kr)?;

    let outcome = train(&cfg, &corpus, &splits, bank.as_ref())?;
    outcome.model.save(&ckpt_path)?;
    std::fs::write(&config_path, cfg.to_flat())?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for entry in &outcome.log {
        serde_json::to_writer(&mut log_file, entry)?;
        log_file.write_all(b"\n")?;
    }
    log_file.flush()?;

    let mut manifest = RunManifest::new("train", cfg.seed);
    for line in cfg.to_flat().lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.config_entry(k.trim(), v.trim());
        }
    }
    manifest.input(&args.corpus);
    manifest.input(&args.splits);
    if let Some(b) = &args.bank {
        manifest.input(b);
    }
    manifest.output(&ckpt_path)?;
    manifest.output(&config_path)?;
    manifest.output(&log_path)?;
    manifest.write(&manifest_path)?;

    println!(
        "trained {} epochs; best validation BLEU-4 {:.4} at epoch {}; checkpoint at {}",
        outcome.log.len(),
        outcome.best_val_bleu4,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

/// Rebuilds the trained model from a training output directory: resolved
/// config, deterministic vocabulary from the train split, checkpoint
/// parameters.
fn restore_model(
    model_dir: &Path,
    corpus: &bigen::corpus::Corpus,
    splits: &bigen::corpus::SplitManifest,
) -> Result<(Model<f32>, TrainConfig), Error> {
    let config_text = std::fs::read_to_string(model_dir.join("config.txt"))?;
    let cfg = TrainConfig::from_flat(&config_text)?;
    let train_cases = cases_for_split(corpus, splits, "train")?;
    let reports: Vec<&str> = train_cases.iter().map(|c| c.report.as_str()).collect();
    let vocab = Vocab::build(&reports, cfg.min_freq);
    let mut model: Model<f32> = Model::build(
        cfg.encoder,
        cfg.retrieval,
        corpus.meta.dim,
        vocab,
        cfg.seed,
    )?;
    model.load_from_checkpoint(&model_dir.join("checkpoint.bgck"))?;
    Ok((model, cfg))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    guard_output(&args.out, args.force)?;
    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let (model, cfg) = restore_model(&args.model_dir, &corpus, &splits)?;
    let bank = load_bank_if(&args.bank, cfg.encoder.kr)?;
    let beam = args.beam.unwrap_or(cfg.beam);
    let max_len = args.max_len.unwrap_or(cfg.max_len);

    let cases = cases_for_split(&corpus, &splits, &args.split)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("split {} is empty", args.split)));
    }
    let records =
        bigen::trainer::generate_for_cases(&model, &cases, bank.as_ref(), beam, max_len)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for record in &records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    if let Some(dump_path) = &args.retrieval_dump {
        guard_output(dump_path, args.force)?;
        if dump_path.exists() {
            std::fs::remove_file(dump_path)?;
        }
        let bank_ref = bank.as_ref().ok_or_else(|| {
            Error::Usage("--retrieval-dump needs a model with kr and --bank".into())
        })?;
        for case in &cases {
            let mut g = Graph::<f32>::new();
            let mut cache = LeafCache::new(&model.store, false);
            let enc = bigen::encoder::encode(
                &mut g,
                &mut cache,
                &model.store,
                &model.encoder,
                case,
                Some(bank_ref),
            )?;
            if let Some(rk) = enc.retrieved {
                write_retrieval_dump(&rk, bank_ref, &case.case_id, dump_path)?;
            }
        }
    }

    let manifest_path = manifest_sibling(&args.out);
    let mut manifest = RunManifest::new("generate", cfg.seed);
    manifest.config_entry("split", &args.split);
    manifest.config_entry("beam", beam);
    manifest.config_entry("max_len", max_len);
    manifest.input(&args.corpus);
    manifest.input(&args.splits);
    manifest.output(&args.out)?;
    manifest.write(&manifest_path)?;

    println!("generated {} reports to {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    guard_output(&args.out, args.force)?;
    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let cases = cases_for_split(&corpus, &splits, &args.split)?;

    let text = std::fs::read_to_string(&args.generated)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str::<GenRecord>(line)?);
    }
    if records.len() != cases.len() {
        return Err(Error::Data(format!(
            "{} generated records but split {} has {} cases",
            records.len(),
            args.split,
            cases.len()
        )));
    }
    let by_id: std::collections::HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.case_id.as_str(), r.text.as_str()))
        .collect();
    let mut candidates = Vec::with_capacity(cases.len());
    let mut references = Vec::with_capacity(cases.len());
    for case in &cases {
        let cand = by_id.get(case.case_id.as_str()).ok_or_else(|| {
            Error::Data(format!("no generated record for case {}", case.case_id))
        })?;
        candidates.push(cand.to_string());
        references.push(case.report.clone());
    }
    let dictionary = entity_dictionary(&corpus.meta);
    let report = MetricReport::compute(&candidates, &references, &dictionary)?;

    println!("{}", MetricReport::table_header());
    println!("{}", report.table_row());
    std::fs::write(&args.out, report.to_key_values())?;

    let manifest_path = manifest_sibling(&args.out);
    let mut manifest = RunManifest::new("evaluate", splits.seed);
    manifest.config_entry("split", &args.split);
    manifest.input(&args.generated);
    manifest.input(&args.corpus);
    manifest.output(&args.out)?;
    manifest.write(&manifest_path)?;
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Usage(format!("invalid seed {s:?}")))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let cfg = args.hyper.resolve()?;
    let seeds = parse_seeds(&args.seeds)?;
    ensure_dir(&args.out)?;
    let rows_path = args.out.join("ablation.jsonl");
    let table_path = args.out.join("ablation.txt");
    guard_output(&rows_path, args.force)?;

    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let bank = load_bank(&args.bank)?;

    let rows = run_ablation(&cfg, &corpus, &splits, &bank, &seeds)?;

    let mut table = String::new();
    table.push_str(
        "WS   WSL  VTCA KR   TTCA | BLEU-1 BLEU-2 BLEU-3 BLEU-4 METEOR* ROUGE-L FACT*  | AVG-DELTA\n",
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for row in &rows {
        table.push_str(&format!(
            "{:<4} {:<4} {:<4} {:<4} {:<4} | {:.3}  {:.3}  {:.3}  {:.3}  {:.3}   {:.3}   {:.3} | {}\n",
            mark(row.ws),
            mark(row.wsl),
            mark(row.vtca),
            mark(row.kr),
            mark(row.ttca),
            row.bleu1,
            row.bleu2,
            row.bleu3,
            row.bleu4,
            row.meteor_simplified,
            row.rouge_l,
            row.fact_ent_simplified,
            row.avg_delta
                .map_or("--".to_string(), |d| format!("{:+.1}%", d * 100.0)),
        ));
    }
    print!("{table}");
    std::fs::write(&table_path, &table)?;
    let mut rows_file = std::io::BufWriter::new(std::fs::File::create(&rows_path)?);
    for row in &rows {
        serde_json::to_writer(&mut rows_file, row)?;
        rows_file.write_all(b"\n")?;
    }
    rows_file.flush()?;

    let mut manifest = RunManifest::new("ablate", cfg.seed);
    manifest.config_entry("seeds", &args.seeds);
    manifest.config_entry("epochs", cfg.epochs);
    manifest.input(&args.corpus);
    manifest.input(&args.splits);
    manifest.input(&args.bank);
    manifest.output(&rows_path)?;
    manifest.output(&table_path)?;
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let cfg = args.hyper.resolve()?;
    let param: SweepParam = args.param.parse()?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("invalid sweep value {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    ensure_dir(&args.out)?;
    let points_path = args.out.join("sweep.jsonl");
    let table_path = args.out.join("sweep.txt");
    guard_output(&points_path, args.force)?;

    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let bank = load_bank(&args.bank)?;

    let points = run_sweep(&cfg, param, &values, &corpus, &splits, &bank)?;

    let mut table = format!("{:<10} BLEU-4  ROUGE-L METEOR*\n", args.param);
    for p in &points {
        table.push_str(&format!(
            "{:<10} {:.4}  {:.4}  {:.4}\n",
            p.value, p.bleu4, p.rouge_l, p.meteor_simplified
        ));
    }
    print!("{table}");
    std::fs::write(&table_path, &table)?;
    let mut points_file = std::io::BufWriter::new(std::fs::File::create(&points_path)?);
    for p in &points {
        serde_json::to_writer(&mut points_file, p)?;
        points_file.write_all(b"\n")?;
    }
    points_file.flush()?;

    let mut manifest = RunManifest::new("sweep", cfg.seed);
    manifest.config_entry("param", &args.param);
    manifest.config_entry("values", &args.values);
    manifest.input(&args.corpus);
    manifest.input(&args.splits);
    manifest.input(&args.bank);
    manifest.output(&points_path)?;
    manifest.output(&table_path)?;
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<(), Error> {
    ensure_dir(&args.out)?;
    let corpus = load_corpus(&args.corpus)?;
    let splits = load_splits(&args.splits)?;
    let (model, cfg) = restore_model(&args.model_dir, &corpus, &splits)?;
    if !cfg.encoder.vtca {
        return Err(Error::Data(
            "heatmaps need a model with vtca enabled (layer-1 attention)".into(),
        ));
    }
    let bank = load_bank_if(&args.bank, cfg.encoder.kr)?;

    let requested: Vec<&str> = args.cases.split(',').map(|s| s.trim()).collect();
    let mut written = Vec::new();
    for case_id in requested {
        let case = corpus
            .cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| Error::Data(format!("case {case_id} not found in corpus")))?;
        let pgm_path = args.out.join(format!("{case_id}.pgm"));
        guard_output(&pgm_path, args.force)?;
        let mut g = Graph::<f32>::new();
        let mut cache = LeafCache::new(&model.store, false);
        let enc = bigen::encoder::encode(
            &mut g,
            &mut cache,
            &model.store,
            &model.encoder,
            case,
            bank.as_ref(),
        )?;
        write_attention_pgm(&enc.layer1_attention, case.grid, &pgm_path)?;
        written.push(pgm_path);
    }

    let mut manifest = RunManifest::new("heatmap", cfg.seed);
    manifest.config_entry("cases", &args.cases);
    manifest.input(&args.corpus);
    for p in &written {
        manifest.output(p)?;
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {} heatmaps to {}", written.len(), args.out.display());
    Ok(())
}
