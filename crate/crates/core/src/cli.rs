//! Command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::binio::atomic_write;
use crate::data::coqa::{load_corpus_with, LoadOptions};
use crate::data::examples::{corpus_stats, read_examples, write_examples, CorpusStats};
use crate::data::synthetic::corpus_texts;
use crate::data::{build_examples, ExampleConfig, HistoryAnswer, Tokenizer, Vocab, WordTokenizer};
use crate::encoder::EncoderConfig;
use crate::ensemble::{
    brute_force_search, ga_search, mask_to_indices, write_trace, CandidatePool,
    ExampleMeta, GaConfig, ModelLogits, PoolFitness, DEFAULT_BRUTE_FORCE_BUDGET,
};
use crate::error::{Error, Result};
use crate::evalmetric::{upper_bound, CorpusScore, WordVectorStore, DEFAULT_MAX_SPAN_WORDS};
use crate::pipeline::{evaluate, predict, read_predictions, write_predictions};
use crate::qa_model::{QaModel, DEFAULT_MAX_ANSWER_LEN};
use crate::regularizers::{Mode, TeacherLabelSet};
use crate::trainer::{
    generate_teacher_labels, parse_config_text, set_encoder_field, train, Checkpoint,
    OptimizerState, TrainConfig, LOG_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "convqa", version, about = "Extractive conversational QA toolkit")]
pub struct Cli {
    /// Flat `key = value` file overriding training, model and search settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for model initialization, shuffling, perturbations and search.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (file for distill-labels).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build model inputs from a CoQA file.
    Preprocess(PreprocessArgs),
    /// Train a teacher or a distilled student.
    Train(TrainArgs),
    /// Average teacher distributions into a label cache.
    DistillLabels(DistillArgs),
    /// Decode answers and dump logits for ensembling.
    Predict(PredictArgs),
    /// Score predictions against a CoQA file.
    Eval(EvalArgs),
    /// Search for the best model subset over logit pools.
    EnsembleSearch(EnsembleArgs),
    /// Best F1 reachable by any passage span.
    UpperBound(UpperBoundArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub coqa: PathBuf,
    /// Vocabulary file; built from the corpus and written here when missing.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Vocabulary size cap (with specials) when building.
    #[arg(long, default_value_t = 2048)]
    pub max_vocab: usize,
    /// Repair span_text/story mismatches instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Example file or the directory preprocess wrote.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, value_enum, default_value = "teacher")]
    pub mode: ModeArg,
    #[arg(long)]
    pub teacher_labels: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint; repeat for several teachers.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub examples: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    /// Map answers of "X or Y" questions onto the closest option.
    #[arg(long)]
    pub post_process: bool,
    /// Word vectors ("word v1 v2 ..." lines); defaults to the model's own
    /// token embeddings.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    pub max_answer_len: usize,
    /// Name recorded in the logit pool file.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub coqa: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Directory holding `*.bin` logit pools, or one predict output
    /// directory per model.
    #[arg(long)]
    pub pools: PathBuf,
    /// Examples the pools were computed on [default: <pools>/examples.jsonl].
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub max_size: usize,
    #[arg(long, default_value_t = 200)]
    pub generations: usize,
    #[arg(long, default_value_t = 50)]
    pub population: usize,
    /// Also run the exhaustive search for comparison.
    #[arg(long)]
    pub brute_force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RefsArg {
    #[value(name = "1")]
    First,
    All,
}

#[derive(Debug, Args)]
pub struct UpperBoundArgs {
    #[arg(long)]
    pub coqa: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub refs: RefsArg,
    #[arg(long, default_value_t = DEFAULT_MAX_SPAN_WORDS)]
    pub max_span_words: usize,
}

/// Every setting a config file may override.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub examples: ExampleConfig,
    pub ga: GaConfig,
    pub lowercase: bool,
}

impl Settings {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut s = Settings {
            lowercase: true,
            ..Default::default()
        };
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            for (k, v) in parse_config_text(&text)? {
                s.set(&k, &v)?;
            }
        }
        if let Some(seed) = seed {
            s.train.seed = seed;
            s.ga.seed = seed;
        }
        s.examples.max_seq_len = s.encoder.max_seq_len;
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::parse(format!("config key {key}"), format!("bad value {value:?}"));
        if self.train.set(key, value)? || set_encoder_field(&mut self.encoder, key, value)? {
            return Ok(());
        }
        match key {
            "max_question_tokens" => self.examples.max_question_tokens = value.parse().map_err(|_| bad())?,
            "history" => {
                self.examples.history = match value {
                    "free_form" => HistoryAnswer::FreeForm,
                    "span_text" => HistoryAnswer::SpanText,
                    _ => return Err(bad()),
                }
            }
            "lowercase" => self.lowercase = value.parse().map_err(|_| bad())?,
            "population_size" => self.ga.population_size = value.parse().map_err(|_| bad())?,
            "max_generations" => self.ga.max_generations = value.parse().map_err(|_| bad())?,
            "tournament_size" => self.ga.tournament_size = value.parse().map_err(|_| bad())?,
            "mutation_rate" => self.ga.mutation_rate = Some(value.parse().map_err(|_| bad())?),
            "elitism" => self.ga.elitism = value.parse().map_err(|_| bad())?,
            "max_ensemble_size" => self.ga.max_ensemble_size = value.parse().map_err(|_| bad())?,
            "stagnation_limit" => self.ga.stagnation_limit = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::parse("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

fn out_dir(out: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::file(path, e))
}

fn examples_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("examples.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn load_examples(path: &Path) -> Result<(Vec<crate::data::ReformulatedExample>, String)> {
    read_examples(BufReader::new(open(&examples_file(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Provenance written next to training and prediction outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    vocab_hash: &'a str,
    config_hash: String,
    mode: Mode,
    step: u64,
    seed: u64,
    encoder: &'a EncoderConfig,
    train: &'a TrainConfig,
}

fn write_manifest(dir: &Path, command: &str, ck: &Checkpoint) -> Result<()> {
    let config = serde_json::to_string(&(ck.model.config(), &ck.train_config))?;
    let m = Manifest {
        command,
        vocab_hash: &ck.vocab_hash,
        config_hash: format!("{:x}", Sha256::digest(config.as_bytes())),
        mode: ck.mode,
        step: ck.optimizer.step,
        seed: ck.train_config.seed,
        encoder: ck.model.config(),
        train: &ck.train_config,
    };
    write_json(&dir.join("manifest.json"), &m)
}

#[derive(Serialize)]
struct PreprocessReport {
    vocab_hash: String,
    vocab_size: usize,
    examples: usize,
    skipped: usize,
    repaired_spans: usize,
    stats: CorpusStats,
    non_extractive_share: f64,
    yes_no_share_of_non_extractive: f64,
}

fn preprocess(args: &PreprocessArgs, settings: &Settings, out: &Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out, "prepared")?;
    let report = load_corpus_with(&args.coqa, LoadOptions { strict: !args.lenient })?;
    let docs = report.documents;
    let vocab = if args.vocab.exists() {
        Vocab::read(BufReader::new(open(&args.vocab)?))?
    } else {
        let texts = corpus_texts(&docs);
        let v = Vocab::build(texts.iter().map(String::as_str), args.max_vocab, 1, settings.lowercase)?;
        let mut buf = Vec::new();
        v.write(&mut buf)?;
        atomic_write(&args.vocab, &buf)?;
        v
    };
    let mut vocab_buf = Vec::new();
    vocab.write(&mut vocab_buf)?;
    atomic_write(&dir.join("vocab.txt"), &vocab_buf)?;
    let tok = WordTokenizer::new(vocab, settings.lowercase);
    let built = build_examples(&docs, &tok, &settings.examples)?;
    let mut buf = Vec::new();
    write_examples(&mut buf, &built.examples, &tok.vocab_hash())?;
    atomic_write(&dir.join("examples.jsonl"), &buf)?;
    let stats = corpus_stats(&docs);
    let r = PreprocessReport {
        vocab_hash: tok.vocab_hash(),
        vocab_size: tok.vocab_size(),
        examples: built.examples.len(),
        skipped: built.skipped,
        repaired_spans: report.repaired_spans,
        non_extractive_share: stats.non_extractive_share(),
        yes_no_share_of_non_extractive: stats.yes_no_share_of_non_extractive(),
        stats,
    };
    write_json(&dir.join("stats.json"), &r)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn train_cmd(args: &TrainArgs, settings: &Settings, out: &Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out, "run")?;
    let (examples, hash) = load_examples(&args.examples)?;
    let mode = match args.mode {
        ModeArg::Teacher => Mode::Teacher,
        ModeArg::Student => Mode::Student,
    };
    let labels = match (&args.teacher_labels, mode) {
        (Some(p), _) => {
            let l = TeacherLabelSet::load(p)?;
            if l.vocab_hash != hash {
                return Err(Error::HashMismatch {
                    what: "vocabulary",
                    expected: hash,
                    found: l.vocab_hash,
                });
            }
            Some(l)
        }
        (None, Mode::Student) => {
            return Err(Error::Contract("student training needs --teacher-labels".into()))
        }
        (None, Mode::Teacher) => None,
    };
    let vocab_path = examples_file(&args.examples).with_file_name("vocab.txt");
    let mut ck = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load_expecting(p, &hash)?;
            if ck.mode != mode {
                return Err(Error::Contract("resumed checkpoint was trained in another mode".into()));
            }
            ck
        }
        None => {
            let mut enc = settings.encoder.clone();
            enc.vocab_size = if vocab_path.exists() {
                Vocab::read(BufReader::new(open(&vocab_path)?))?.len()
            } else {
                examples.iter().flat_map(|e| e.token_ids.iter()).max().map_or(1, |m| m + 1)
            };
            let model = QaModel::new(enc, settings.train.seed)?;
            Checkpoint {
                optimizer: OptimizerState::new(model.params()),
                model,
                train_config: settings.train.clone(),
                vocab_hash: hash.clone(),
                mode,
            }
        }
    };
    let config = ck.train_config.clone();
    let log_path = dir.join("train_log.tsv");
    let mut log = BufWriter::new(if args.resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path).map_err(|e| Error::file(&log_path, e))?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    });
    let reports = train(
        &mut ck.model,
        &mut ck.optimizer,
        &examples,
        &config,
        mode,
        labels.as_ref(),
        None,
        &mut log,
    )?;
    log.flush()?;
    ck.save(&dir.join("checkpoint.bin"))?;
    write_manifest(&dir, "train", &ck)?;
    if let Some(r) = reports.last() {
        println!("step {} loss {:.6}", r.step, r.loss.total);
    }
    Ok(())
}

fn distill(args: &DistillArgs, out: &Option<PathBuf>) -> Result<()> {
    let (examples, hash) = load_examples(&args.examples)?;
    let teachers = args
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let set = generate_teacher_labels(&teachers, &examples, &hash)?;
    let path = out.clone().unwrap_or_else(|| PathBuf::from("teacher_labels.bin"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    set.save(&path)?;
    println!("{} teacher labels from {} teachers", set.len(), teachers.len());
    Ok(())
}

fn predict_cmd(args: &PredictArgs, out: &Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out, "predictions")?;
    let (examples, hash) = load_examples(&args.examples)?;
    let ck = Checkpoint::load_expecting(&args.checkpoint, &hash)?;
    let store = if args.post_process {
        Some(match &args.vectors {
            Some(p) => WordVectorStore::from_text(BufReader::new(open(p)?))?,
            None => {
                let vocab_path = examples_file(&args.examples).with_file_name("vocab.txt");
                let vocab = Vocab::read(BufReader::new(open(&vocab_path)?))?;
                let table = ck
                    .model
                    .params()
                    .get("embed.token")
                    .ok_or_else(|| Error::Contract("checkpoint has no token embeddings".into()))?;
                WordVectorStore::from_embedding_table(vocab.tokens(), table)?
            }
        })
    } else {
        None
    };
    let name = args.name.clone().unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let (preds, logits) = predict(&ck.model, &examples, &name, &hash, args.max_answer_len, store.as_ref())?;
    let mut buf = Vec::new();
    write_predictions(&mut buf, &preds)?;
    atomic_write(&dir.join("predictions.jsonl"), &buf)?;
    logits.save(&dir.join("logits.bin"))?;
    write_manifest(&dir, "predict", &ck)?;
    println!("{} predictions", preds.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    score: CorpusScore,
    post_processed: usize,
}

fn eval_cmd(args: &EvalArgs, out: &Option<PathBuf>) -> Result<()> {
    let preds = read_predictions(BufReader::new(open(&args.predictions)?))?;
    let docs = load_corpus_with(&args.coqa, LoadOptions::default())?.documents;
    let score = evaluate(&preds, &docs)?;
    let report = EvalReport {
        score,
        post_processed: preds.iter().filter(|p| p.post_processed).count(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct EnsembleReport {
    models: Vec<String>,
    selected: Vec<String>,
    fitness: f64,
    generations: usize,
    evaluations: usize,
    brute_force: Option<BruteForceReport>,
}

#[derive(Serialize)]
struct BruteForceReport {
    selected: Vec<String>,
    fitness: f64,
    evaluations: usize,
}

/// `*.bin` files in `dir` plus `logits.bin` in each immediate subdirectory,
/// sorted by path.
fn pool_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry?.path();
        if path.is_dir() {
            let inner = path.join("logits.bin");
            if inner.is_file() {
                files.push(inner);
            }
        } else if path.extension().is_some_and(|e| e == "bin") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn ensemble_cmd(args: &EnsembleArgs, settings: &Settings, out: &Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out, "ensemble")?;
    let examples_path = args.examples.clone().unwrap_or_else(|| args.pools.join("examples.jsonl"));
    let (examples, hash) = load_examples(&examples_path)?;
    let files = pool_files(&args.pools)?;
    if files.is_empty() {
        return Err(Error::Contract(format!("no logit pools under {}", args.pools.display())));
    }
    let models = files
        .iter()
        .map(|p| ModelLogits::load(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(m) = models.iter().find(|m| m.vocab_hash != hash) {
        return Err(Error::HashMismatch {
            what: "vocabulary",
            expected: hash,
            found: m.vocab_hash.clone(),
        });
    }
    let metas: Vec<ExampleMeta> = examples.iter().map(ExampleMeta::from).collect();
    let pool = CandidatePool::new(metas, models)?;
    let fitness = PoolFitness::new(&pool);
    let ga = GaConfig {
        population_size: args.population,
        max_generations: args.generations,
        max_ensemble_size: args.max_size,
        ..settings.ga.clone()
    };
    let result = ga_search(&fitness, &ga)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, &result.trace)?;
    atomic_write(&dir.join("trace.tsv"), &trace)?;
    let names = |mask: u128| -> Vec<String> {
        mask_to_indices(mask).into_iter().map(|i| pool.models()[i].name.clone()).collect()
    };
    let brute = if args.brute_force {
        let b = brute_force_search(&fitness, args.max_size, DEFAULT_BRUTE_FORCE_BUDGET)?;
        Some(BruteForceReport {
            selected: names(b.mask),
            fitness: b.fitness,
            evaluations: b.evaluations,
        })
    } else {
        None
    };
    let report = EnsembleReport {
        models: pool.models().iter().map(|m| m.name.clone()).collect(),
        selected: names(result.mask),
        fitness: result.fitness,
        generations: result.trace.len() - 1,
        evaluations: result.evaluations,
        brute_force: brute,
    };
    write_json(&dir.join("selection.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct UpperBoundRow {
    id: String,
    bound: f64,
}

#[derive(Serialize)]
struct UpperBoundReport {
    refs: &'static str,
    questions: usize,
    mean: f64,
    per_question: Vec<UpperBoundRow>,
}

fn upper_bound_cmd(args: &UpperBoundArgs, out: &Option<PathBuf>) -> Result<()> {
    let docs = load_corpus_with(&args.coqa, LoadOptions::default())?.documents;
    let mut rows = Vec::new();
    for d in &docs {
        for t in &d.turns {
            let mut refs = d.references(t.turn_id as usize);
            if args.refs == RefsArg::First {
                refs.truncate(1);
            }
            rows.push(UpperBoundRow {
                id: format!("{}_{}", d.id, t.turn_id),
                bound: upper_bound(&d.story, &refs, args.max_span_words),
            });
        }
    }
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.bound).sum::<f64>() / rows.len() as f64
    };
    let report = UpperBoundReport {
        refs: match args.refs {
            RefsArg::First => "1",
            RefsArg::All => "all",
        },
        questions: rows.len(),
        mean,
        per_question: rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("upper_bound.json"), &report)?;
    }
    println!("upper bound ({} refs) over {} questions: {:.4}", report.refs, report.questions, report.mean);
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::Preprocess(a) => preprocess(a, &settings, &cli.out),
        Command::Train(a) => train_cmd(a, &settings, &cli.out),
        Command::DistillLabels(a) => distill(a, &cli.out),
        Command::Predict(a) => predict_cmd(a, &cli.out),
        Command::Eval(a) => eval_cmd(a, &cli.out),
        Command::EnsembleSearch(a) => ensemble_cmd(a, &settings, &cli.out),
        Command::UpperBound(a) => upper_bound_cmd(a, &cli.out),
    }
}
