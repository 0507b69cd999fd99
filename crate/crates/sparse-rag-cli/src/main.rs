//! Command-line front end: corpus generation, training, answering,
//! threshold sweeps, throughput benchmarks, and two-round auto-labeling.
//!
//! Progress goes to standard error; machine-readable results go to standard
//! output or the requested files. Every run that writes files also writes a
//! `RunManifest` next to them with the resolved configuration and SHA-256
//! checksums of the outputs, so a run can be reproduced from the manifest
//! alone. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use sparse_rag::data::{
    generate_corpus, read_corpus, write_corpus, Corpus, SynthTaskConfig, Tokenizer,
    CONTROL_ASSESSMENT_ID, CONTROL_GENERATION_ID, EOS_ID, PAD_ID, RATE_BAD_ID, RATE_GOOD_ID,
};
use sparse_rag::eval::{
    bench_csv, bench_decode, bench_encode, environment_note, sweep_csv, threshold_sweep,
    BenchReport, EncodeMode,
};
use sparse_rag::labeler::{
    aggregate_majority, read_records, run_two_round, write_records, Majority, MockBackend,
    MockBehavior, RaterBackend,
};
use sparse_rag::model::{init_model, load_checkpoint, ModelConfig};
use sparse_rag::pipeline::{answer, GenerationParams, PipelineOptions, Sampling};
use sparse_rag::train::{train, TrainConfig};
use sparse_rag::{cache::SegmentedCache, Error, Result};

#[derive(Parser)]
#[command(
    name = "sparse-rag",
    version,
    about = "Segmented-cache RAG runtime: generate data, train, answer, sweep, bench, label"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic key-value retrieval corpus.
    GenData(GenDataArgs),
    /// Train the two-task mixture and keep the best checkpoint.
    Train(TrainArgs),
    /// Answer one question over a file of contexts; prints JSON.
    Answer(AnswerArgs),
    /// Evaluate a grid of score thresholds and write a CSV.
    Sweep(SweepArgs),
    /// Measure encode and decode throughput and write a CSV.
    Bench(BenchArgs),
    /// Run the two-round rater/critic labeling over a JSONL of records.
    Label(LabelArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file holding the task parameters.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the split corpus and tokenizer.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Probability that a batch slot trains assessment rather than
    /// generation.
    #[arg(long, default_value_t = 0.5)]
    mixture: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
    #[arg(long, default_value_t = 200)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    #[arg(long, default_value_t = 4096)]
    max_position: u32,
}

#[derive(Args)]
struct AnswerArgs {
    /// Checkpoint directory holding weights and tokenizer.json.
    #[arg(long)]
    model: PathBuf,
    /// Question text in tokenizer symbols.
    #[arg(long)]
    question: String,
    /// One context per line, symbols separated by spaces.
    #[arg(long)]
    contexts_file: PathBuf,
    /// Relevance threshold; contexts scoring below it are dropped.
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Greedy decoding (the default).
    #[arg(long, conflicts_with = "temperature")]
    greedy: bool,
    /// Sample with this softmax temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Checkpoint directory holding weights and tokenizer.json.
    #[arg(long)]
    model: PathBuf,
    /// JSONL of labeled examples to evaluate.
    #[arg(long)]
    eval: PathBuf,
    /// Comma-separated thresholds, one sweep row each.
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f64>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long, default_value_t = 16)]
    max_tokens: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint directory holding weights and tokenizer.json.
    #[arg(long)]
    model: PathBuf,
    /// Number of contexts to prefill.
    #[arg(long, default_value_t = 10)]
    contexts: usize,
    /// Comma-separated decode output lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64])]
    lens: Vec<usize>,
    /// Comma-separated kept-context counts for decoding.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 10])]
    ks: Vec<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long, default_value_t = 64)]
    context_len: usize,
    #[arg(long, default_value_t = 8)]
    question_len: usize,
    /// Seed for the synthetic token draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LabelArgs {
    /// JSONL of records to label.
    #[arg(long = "in")]
    input: PathBuf,
    /// JSONL of labeled records to write.
    #[arg(long)]
    out: PathBuf,
    /// Rater backend name.
    #[arg(long, default_value = "rater")]
    rater: String,
    /// Critic backend name.
    #[arg(long, default_value = "critic")]
    critic: String,
    /// Use deterministic in-process backends instead of the live endpoint.
    #[arg(long)]
    mock: bool,
}

/// What a run resolved to and what it produced; written next to the outputs.
#[derive(serde::Serialize)]
struct RunManifest {
    subcommand: &'static str,
    config: serde_json::Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, FileStamp>,
    seed: Option<u64>,
}

#[derive(serde::Serialize)]
struct FileStamp {
    path: String,
    sha256: String,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
    }
    Ok(hex)
}

fn stamp(path: &Path) -> Result<FileStamp> {
    Ok(FileStamp {
        path: path.display().to_string(),
        sha256: sha256_hex(path)?,
    })
}

impl RunManifest {
    fn new(subcommand: &'static str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            subcommand,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
        }
    }

    fn input(&mut self, name: &'static str, path: &Path) {
        self.inputs.insert(name, path.display().to_string());
    }

    fn output(&mut self, name: &'static str, path: &Path) -> Result<()> {
        self.outputs.insert(name, stamp(path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Manifest path for a run whose primary output is the given file.
fn manifest_beside(file: &Path) -> PathBuf {
    file.with_extension("manifest.json")
}

fn load_model_dir(dir: &Path) -> Result<(sparse_rag::model::ModelBundle<f32>, Tokenizer)> {
    let model = load_checkpoint::<f32>(dir)?;
    let tokenizer = Tokenizer::load(&dir.join("tokenizer.json"))?;
    if tokenizer.vocab_size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} symbols but the model expects {}",
            tokenizer.vocab_size(),
            model.config.vocab_size
        )));
    }
    Ok((model, tokenizer))
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let config: SynthTaskConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    eprintln!(
        "generating {} examples ({} contexts each)",
        config.num_examples, config.contexts_per_example
    );
    let corpus = generate_corpus(&config)?;
    let tokenizer = config.tokenizer()?;
    fs::create_dir_all(&args.out)?;
    let paths = [
        ("train", args.out.join("train.jsonl"), corpus.train()),
        ("val", args.out.join("val.jsonl"), corpus.val()),
        ("test", args.out.join("test.jsonl"), corpus.test()),
    ];
    for (_, path, split) in &paths {
        write_corpus(path, split)?;
    }
    let tokenizer_path = args.out.join("tokenizer.json");
    tokenizer.save(&tokenizer_path)?;

    let mut resolved = serde_json::to_value(config)?;
    resolved["vocab_size"] = tokenizer.vocab_size().into();
    resolved["corpus_checksum"] = format!("{:016x}", corpus.checksum()).into();
    let mut manifest = RunManifest::new("gen-data", resolved, Some(config.seed));
    manifest.input("config", &args.config);
    for (name, path, _) in &paths {
        manifest.output(name, path)?;
    }
    manifest.output("tokenizer", &tokenizer_path)?;
    manifest.write(&args.out.join("manifest.json"))?;
    eprintln!("corpus written to {}", args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let train_examples = read_corpus(&args.corpus.join("train.jsonl"))?;
    let val_examples = read_corpus(&args.corpus.join("val.jsonl"))?;
    let tokenizer = Tokenizer::load(&args.corpus.join("tokenizer.json"))?;
    let train_end = train_examples.len();
    let mut examples = train_examples;
    examples.extend(val_examples);
    let corpus = Corpus {
        val_end: examples.len(),
        examples,
        train_end,
    };

    let model_config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        dim: args.dim,
        num_layers: args.layers,
        num_heads: args.heads,
        ffn_dim: args.ffn,
        max_position: args.max_position,
        pad_id: PAD_ID,
        eos_id: EOS_ID,
        control_assessment_id: CONTROL_ASSESSMENT_ID,
        control_generation_id: CONTROL_GENERATION_ID,
        rate_good_id: RATE_GOOD_ID,
        rate_bad_id: RATE_BAD_ID,
    };
    let train_config = TrainConfig {
        mixture_weight_assessment: args.mixture,
        batch_size: args.batch_size,
        steps: args.steps,
        learning_rate: args.lr,
        dropout: args.dropout,
        grad_clip: 1.0,
        checkpoint_every: args.checkpoint_every,
        seed: args.seed,
    };
    let model = init_model::<f32>(&model_config, args.seed)?;
    eprintln!(
        "training {} steps, batch {}, {} params",
        args.steps,
        args.batch_size,
        model.weights.param_count()
    );
    let outcome = train(&model, &corpus, &train_config, Some(&args.model_out))?;
    let best_dir = args.model_out.join("best");
    let tokenizer_path = best_dir.join("tokenizer.json");
    tokenizer.save(&tokenizer_path)?;
    if let (Some(first), Some(last)) = (outcome.loss_curve.first(), outcome.loss_curve.last()) {
        eprintln!("loss {first:.4} -> {last:.4}, best checkpoint at step {}", outcome.best_step);
    }

    let best_record = outcome
        .checkpoints
        .iter()
        .find(|c| c.step == outcome.best_step)
        .expect("the best step always has a checkpoint record");
    let mut resolved = serde_json::to_value(&train_config)?;
    resolved["model"] = serde_json::to_value(&model_config)?;
    let mut manifest = RunManifest::new("train", resolved, Some(args.seed));
    manifest.input("corpus", &args.corpus);
    manifest.output("best_weights", &best_dir.join("weights.bin"))?;
    manifest.output("best_manifest", &best_dir.join("manifest.txt"))?;
    manifest.output("tokenizer", &tokenizer_path)?;
    manifest.output("metrics", &args.model_out.join("metrics.jsonl"))?;
    manifest.write(&args.model_out.join("manifest.json"))?;

    println!("{}", serde_json::to_string_pretty(&best_record)?);
    Ok(())
}

fn run_answer(args: &AnswerArgs) -> Result<()> {
    let (model, tokenizer) = load_model_dir(&args.model)?;
    let question = tokenizer.encode(&args.question)?;
    let mut contexts = Vec::new();
    for line in fs::read_to_string(&args.contexts_file)?.lines() {
        if !line.trim().is_empty() {
            contexts.push(tokenizer.encode(line)?);
        }
    }
    let options = PipelineOptions {
        sigma: args.sigma,
        ..PipelineOptions::default()
    };
    let params = GenerationParams {
        max_tokens: args.max_tokens,
        temperature: args.temperature.unwrap_or(0.0),
        seed: args.seed,
        sampling: match args.temperature {
            Some(_) => Sampling::Temperature,
            None => Sampling::Greedy,
        },
    };
    eprintln!(
        "scoring {} contexts at sigma {}",
        contexts.len(),
        args.sigma
    );
    let result = answer(&model, &question, &contexts, &options, &params)?;
    let report = serde_json::json!({
        "answer": tokenizer.decode(&result.tokens)?,
        "tokens": result.tokens,
        "scores": result.assessment.scores,
        "kept": result.assessment.kept,
        "fallback": result.assessment.fallback,
        "sigma": result.assessment.sigma,
        "timing": {
            "prefill_secs": result.timing.prefill.as_secs_f64(),
            "assess_secs": result.timing.assess.as_secs_f64(),
            "decode_secs": result.timing.decode.as_secs_f64(),
            "prefilled_tokens": result.timing.prefilled_tokens,
            "decoded_tokens": result.timing.decoded_tokens,
        },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let (model, _) = load_model_dir(&args.model)?;
    let examples = read_corpus(&args.eval)?;
    let options = PipelineOptions::default();
    let params = GenerationParams {
        max_tokens: args.max_tokens,
        ..GenerationParams::default()
    };
    eprintln!(
        "sweeping {} thresholds over {} examples",
        args.sigmas.len(),
        examples.len()
    );
    let rows = threshold_sweep(&model, &examples, &args.sigmas, &options, &params)?;
    fs::write(&args.out_csv, sweep_csv(&rows))?;

    let mut manifest = RunManifest::new(
        "sweep",
        serde_json::json!({
            "sigmas": args.sigmas,
            "max_tokens": args.max_tokens,
            "examples": examples.len(),
        }),
        None,
    );
    manifest.input("model", &args.model);
    manifest.input("eval", &args.eval);
    manifest.output("csv", &args.out_csv)?;
    manifest.write(&manifest_beside(&args.out_csv))?;

    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let (model, _) = load_model_dir(&args.model)?;
    if args.question_len == 0 || args.context_len == 0 || args.contexts == 0 {
        return Err(Error::Config(
            "question, context length, and context count must be >= 1".into(),
        ));
    }
    // Uniform payload tokens; benchmark cost is shape-dependent only.
    use sparse_rag::data::RESERVED_SYMBOLS;
    let lo = RESERVED_SYMBOLS.len() as u32;
    let hi = model.config.vocab_size as u32;
    if hi <= lo {
        return Err(Error::Config("model vocab has no payload symbols".into()));
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let mut draw = |n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let question = draw(args.question_len);
    let contexts: Vec<Vec<u32>> = (0..args.contexts).map(|_| draw(args.context_len)).collect();

    eprintln!(
        "benchmarking encode over {} contexts of {} tokens, decode grid {:?} x {:?}",
        args.contexts, args.context_len, args.ks, args.lens
    );
    let encode = vec![
        bench_encode(&model, &question, &contexts, EncodeMode::Dense)?,
        bench_encode(&model, &question, &contexts, EncodeMode::Parallel)?,
    ];
    let cache = SegmentedCache::prefill(&model, &question, &contexts)?;
    let decode = bench_decode(&model, &cache, &args.ks, &args.lens)?;
    let report = BenchReport {
        encode,
        decode,
        environment: environment_note(),
    };
    fs::write(&args.out_csv, bench_csv(&report))?;

    let mut manifest = RunManifest::new(
        "bench",
        serde_json::json!({
            "contexts": args.contexts,
            "context_len": args.context_len,
            "question_len": args.question_len,
            "ks": args.ks,
            "lens": args.lens,
            "environment": report.environment,
        }),
        Some(args.seed),
    );
    manifest.input("model", &args.model);
    manifest.output("csv", &args.out_csv)?;
    manifest.write(&manifest_beside(&args.out_csv))?;

    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_label(args: &LabelArgs) -> Result<()> {
    let records = read_records(&args.input)?;
    let (rater, critic): (Box<dyn RaterBackend>, Box<dyn RaterBackend>) = if args.mock {
        (
            Box::new(MockBackend::new(
                &args.rater,
                MockBehavior::Fixed("1.0".into()),
            )),
            Box::new(MockBackend::new(&args.critic, MockBehavior::EchoPrevious)),
        )
    } else {
        #[cfg(feature = "live-labeler")]
        {
            use sparse_rag::labeler::HttpBackend;
            (
                Box::new(HttpBackend::from_env(&args.rater)?),
                Box::new(HttpBackend::from_env(&args.critic)?),
            )
        }
        #[cfg(not(feature = "live-labeler"))]
        {
            return Err(Error::Labeler(
                "built without the live-labeler feature; pass --mock".into(),
            ));
        }
    };
    eprintln!(
        "labeling {} records with rater '{}' and critic '{}'",
        records.len(),
        rater.name(),
        critic.name()
    );
    let report = run_two_round(rater.as_ref(), critic.as_ref(), &records)?;
    write_records(&args.out, &report.records)?;

    // Duplicate documents become majority votes over their final labels.
    let mut groups: BTreeMap<(&str, &str, &str, &str), Vec<u8>> = BTreeMap::new();
    for record in &report.records {
        if let Some(score) = record.round2_score {
            groups
                .entry((
                    record.question.as_str(),
                    record.accepted_answers.as_str(),
                    record.title.as_str(),
                    record.document.as_str(),
                ))
                .or_default()
                .push(score as u8);
        }
    }
    let majorities: Vec<serde_json::Value> = groups
        .iter()
        .filter(|(_, votes)| votes.len() > 1)
        .map(|(&(_, _, title, _), votes)| {
            let decision = match aggregate_majority(votes)? {
                Majority::Zero => "0".to_string(),
                Majority::One => "1".to_string(),
                Majority::Unresolved => "unresolved".to_string(),
            };
            Ok(serde_json::json!({
                "title": title,
                "votes": votes,
                "decision": decision,
            }))
        })
        .collect::<Result<_>>()?;

    // Rater-vs-critic agreement, reported per class like the quality tables.
    let pairs: Vec<(u8, u8)> = report
        .records
        .iter()
        .filter_map(|r| Some((r.round1_score? as u8, r.round2_score? as u8)))
        .collect();
    let agreement = if pairs.is_empty() {
        serde_json::Value::Null
    } else {
        let round1: Vec<u8> = pairs.iter().map(|&(a, _)| a).collect();
        let round2: Vec<u8> = pairs.iter().map(|&(_, b)| b).collect();
        serde_json::to_value(sparse_rag::eval::binary_f1(&round1, &round2)?)?
    };

    let summary = serde_json::json!({
        "records": report.records.len(),
        "labeled": report.labels().len(),
        "failures": report.failures,
        "majorities": majorities,
        "rater_vs_critic_f1": agreement,
    });

    let mut manifest = RunManifest::new(
        "label",
        serde_json::json!({
            "rater": args.rater,
            "critic": args.critic,
            "mock": args.mock,
            "records": report.records.len(),
        }),
        None,
    );
    manifest.input("in", &args.input);
    manifest.output("out", &args.out)?;
    manifest.write(&manifest_beside(&args.out))?;

    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Answer(args) => run_answer(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Bench(args) => run_bench(args),
        Command::Label(args) => run_label(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not failures.
            let code: u8 = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
