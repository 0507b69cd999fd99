//! Symbol tokenizer with reserved control ids, training-example formatting,
//! JSONL corpus files, and a synthetic key-value retrieval task.
//!
//! The synthetic task: a question names a key, every context is a fixed-shape
//! (key, value, noise...) triple, and the answer is the value paired with the
//! question's key in the relevant contexts. The value is drawn fresh per
//! example, so the model can only answer by reading a relevant context, and
//! filtering away the wrong contexts genuinely matters.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::Fnv1a;
use crate::error::{Error, Result};
use crate::layout::{assign_position_ids, SegmentPlan};
use crate::model::ModelConfig;
use crate::par;

/// Reserved symbols, in id order starting at 0.
pub const RESERVED_SYMBOLS: [&str; 6] = ["<pad>", "<eos>", "<assess>", "<gen>", "<good>", "<bad>"];

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const CONTROL_ASSESSMENT_ID: u32 = 2;
pub const CONTROL_GENERATION_ID: u32 = 3;
pub const RATE_GOOD_ID: u32 = 4;
pub const RATE_BAD_ID: u32 = 5;

/// Bijective symbol <-> id map: six reserved ids, then payload symbols.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new(payload_symbols: &[String]) -> Result<Self> {
        let mut symbols: Vec<String> =
            RESERVED_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(payload_symbols.iter().cloned());
        let mut lookup = HashMap::new();
        for (id, sym) in symbols.iter().enumerate() {
            if sym.chars().any(char::is_whitespace) || sym.is_empty() {
                return Err(Error::Tokenizer(format!(
                    "symbol {sym:?} must be non-empty and whitespace-free"
                )));
            }
            if lookup.insert(sym.clone(), id as u32).is_some() {
                return Err(Error::Tokenizer(format!(
                    "symbol {sym:?} declared more than once"
                )));
            }
        }
        Ok(Tokenizer { symbols, lookup })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn encode_symbol(&self, symbol: &str) -> Result<u32> {
        self.lookup
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Tokenizer(format!("unknown symbol {symbol:?}")))
    }

    /// Whitespace-separated symbols to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|s| self.encode_symbol(s))
            .collect()
    }

    /// Ids back to space-joined symbols.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.symbols
                    .get(id as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Tokenizer(format!("id {id} out of vocabulary")))
            })
            .collect();
        Ok(parts?.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<&String> = self.symbols[RESERVED_SYMBOLS.len()..].iter().collect();
        Ok(fs::write(path, serde_json::to_string_pretty(&payload)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Tokenizer::new(&payload)
    }
}

/// One question with its retrieved contexts, answer, and optional relevance
/// labels (one 0/1 per context).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagExample {
    pub question: Vec<u32>,
    pub contexts: Vec<Vec<u32>>,
    pub answer: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl RagExample {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::EmptyInput("example question is empty".into()));
        }
        if self.contexts.is_empty() || self.contexts.iter().any(Vec::is_empty) {
            return Err(Error::EmptyInput(
                "example needs at least one non-empty context".into(),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.contexts.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} contexts",
                    labels.len(),
                    self.contexts.len()
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::Config("labels must be 0 or 1".into()));
            }
        }
        Ok(())
    }
}

/// A model-ready training example: tokens, positions, visibility plan, and
/// the prediction targets. `target_mask[p]` marks logit rows that predict;
/// `target_ids[p]` is the token row `p` must predict.
#[derive(Debug, Clone)]
pub struct FormattedExample {
    pub tokens: Vec<u32>,
    pub positions: Vec<u32>,
    pub plan: SegmentPlan,
    pub target_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
}

/// Rating task: question, one context, the assessment control token, and the
/// rate token. Only the control token's row predicts (it must produce the
/// rate matching the label).
pub fn format_assessment(
    example: &RagExample,
    context_index: usize,
    config: &ModelConfig,
) -> Result<FormattedExample> {
    example.validate()?;
    let labels = example
        .labels
        .as_ref()
        .ok_or_else(|| Error::Train("assessment formatting needs labels".into()))?;
    let context = example.contexts.get(context_index).ok_or_else(|| {
        Error::Config(format!(
            "context index {context_index} out of range for {} contexts",
            example.contexts.len()
        ))
    })?;
    let rate = if labels[context_index] == 1 {
        config.rate_good_id
    } else {
        config.rate_bad_id
    };
    let plan = SegmentPlan::new(example.question.len(), vec![context.len()], 2)?;
    let positions = assign_position_ids(&plan)?;
    let mut tokens = example.question.clone();
    tokens.extend_from_slice(context);
    tokens.push(config.control_assessment_id);
    tokens.push(rate);
    let total = plan.total_len();
    let mut target_ids = vec![config.pad_id; total];
    let mut target_mask = vec![false; total];
    target_ids[total - 2] = rate;
    target_mask[total - 2] = true;
    Ok(FormattedExample {
        tokens,
        positions,
        plan,
        target_ids,
        target_mask,
    })
}

/// Answering task: question, all contexts, the generation control token, and
/// the answer. Every suffix row predicts: the control token starts the
/// answer and the last answer token predicts eos.
pub fn format_generation(example: &RagExample, config: &ModelConfig) -> Result<FormattedExample> {
    example.validate()?;
    if example.answer.is_empty() {
        return Err(Error::EmptyInput("example answer is empty".into()));
    }
    let lens: Vec<usize> = example.contexts.iter().map(Vec::len).collect();
    let plan = SegmentPlan::new(example.question.len(), lens, 1 + example.answer.len())?;
    let positions = assign_position_ids(&plan)?;
    let mut tokens = example.question.clone();
    for context in &example.contexts {
        tokens.extend_from_slice(context);
    }
    tokens.push(config.control_generation_id);
    tokens.extend_from_slice(&example.answer);
    let total = plan.total_len();
    let mut target_ids = vec![config.pad_id; total];
    let mut target_mask = vec![false; total];
    let suffix_start = plan.suffix_start();
    for (offset, &target) in example
        .answer
        .iter()
        .chain(std::iter::once(&config.eos_id))
        .enumerate()
    {
        target_ids[suffix_start + offset] = target;
        target_mask[suffix_start + offset] = true;
    }
    Ok(FormattedExample {
        tokens,
        positions,
        plan,
        target_ids,
        target_mask,
    })
}

/// Synthetic key-value retrieval task parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    /// Non-reserved symbols: keys, then values, then noise.
    pub vocab_payload: usize,
    pub num_keys: usize,
    pub num_values: usize,
    pub contexts_per_example: usize,
    /// Fraction of contexts that are relevant; at least one always is.
    pub relevant_fraction: f64,
    /// Noise tokens appended to every context after its (key, value) pair.
    pub context_noise_len: usize,
    pub num_examples: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            vocab_payload: 40,
            num_keys: 16,
            num_values: 16,
            contexts_per_example: 10,
            relevant_fraction: 0.2,
            context_noise_len: 2,
            num_examples: 1000,
            seed: 0,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_keys < 2 || self.num_values < 2 {
            return Err(Error::Config(
                "need at least 2 keys and 2 values for distractors".into(),
            ));
        }
        let noise = self.vocab_payload as i64 - self.num_keys as i64 - self.num_values as i64;
        if noise < 0 {
            return Err(Error::Config(format!(
                "vocab_payload {} too small for {} keys + {} values",
                self.vocab_payload, self.num_keys, self.num_values
            )));
        }
        if self.context_noise_len > 0 && noise == 0 {
            return Err(Error::Config(
                "context_noise_len > 0 requires noise symbols in vocab_payload".into(),
            ));
        }
        if self.contexts_per_example == 0 {
            return Err(Error::Config("contexts_per_example must be >= 1".into()));
        }
        if !(0.0 < self.relevant_fraction && self.relevant_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "relevant_fraction {} must lie in (0, 1]",
                self.relevant_fraction
            )));
        }
        if self.num_examples == 0 {
            return Err(Error::Config("num_examples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_noise(&self) -> usize {
        self.vocab_payload - self.num_keys - self.num_values
    }

    /// Relevant contexts per example: `max(1, round(fraction * N))`.
    pub fn relevant_per_example(&self) -> usize {
        let n = self.contexts_per_example;
        ((self.relevant_fraction * n as f64).round() as usize).clamp(1, n)
    }

    /// Payload symbol names: `k{i}`, `v{j}`, `x{m}` in id order.
    pub fn payload_symbols(&self) -> Vec<String> {
        let keys = (0..self.num_keys).map(|i| format!("k{i}"));
        let values = (0..self.num_values).map(|j| format!("v{j}"));
        let noise = (0..self.num_noise()).map(|m| format!("x{m}"));
        keys.chain(values).chain(noise).collect()
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(&self.payload_symbols())
    }

    fn key_id(&self, i: usize) -> u32 {
        (RESERVED_SYMBOLS.len() + i) as u32
    }

    fn value_id(&self, j: usize) -> u32 {
        (RESERVED_SYMBOLS.len() + self.num_keys + j) as u32
    }

    fn noise_id(&self, m: usize) -> u32 {
        (RESERVED_SYMBOLS.len() + self.num_keys + self.num_values + m) as u32
    }
}

/// A generated corpus with its 8:1:1 split boundaries.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<RagExample>,
    pub train_end: usize,
    pub val_end: usize,
}

impl Corpus {
    pub fn train(&self) -> &[RagExample] {
        &self.examples[..self.train_end]
    }

    pub fn val(&self) -> &[RagExample] {
        &self.examples[self.train_end..self.val_end]
    }

    pub fn test(&self) -> &[RagExample] {
        &self.examples[self.val_end..]
    }

    /// Content hash over every example's fields.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for example in &self.examples {
            for &t in example
                .question
                .iter()
                .chain(example.contexts.iter().flatten())
                .chain(&example.answer)
            {
                h.update(&t.to_le_bytes());
            }
            if let Some(labels) = &example.labels {
                h.update(labels);
            }
        }
        h.finish()
    }
}

fn synth_example(config: &SynthTaskConfig, index: usize) -> RagExample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let n = config.contexts_per_example;
    let key = rng.random_range(0..config.num_keys);
    // The value is fresh per example: answering requires reading a relevant
    // context rather than memorizing a global key -> value table.
    let value = rng.random_range(0..config.num_values);
    let relevant: Vec<usize> = sample(&mut rng, n, config.relevant_per_example()).into_vec();

    let noise_tail = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        (0..config.context_noise_len)
            .map(|_| config.noise_id(rng.random_range(0..config.num_noise())))
            .collect()
    };
    let mut contexts = Vec::with_capacity(n);
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut context = if relevant.contains(&i) {
            labels[i] = 1;
            vec![config.key_id(key), config.value_id(value)]
        } else {
            // Distractors share the template with a different key, so labels
            // are recoverable only by matching the question's key.
            let mut other = rng.random_range(0..config.num_keys - 1);
            if other >= key {
                other += 1;
            }
            vec![
                config.key_id(other),
                config.value_id(rng.random_range(0..config.num_values)),
            ]
        };
        context.extend(noise_tail(&mut rng));
        contexts.push(context);
    }
    RagExample {
        question: vec![config.key_id(key)],
        contexts,
        answer: vec![config.value_id(value)],
        labels: Some(labels),
    }
}

/// Deterministic corpus generation; examples are independent streams of one
/// seeded generator, so sharding parallelizes without changing output.
pub fn generate_corpus(config: &SynthTaskConfig) -> Result<Corpus> {
    config.validate()?;
    let examples = par::map_indexed(config.num_examples, |i| synth_example(config, i));
    let train_end = config.num_examples * 8 / 10;
    let val_end = config.num_examples * 9 / 10;
    Ok(Corpus {
        examples,
        train_end,
        val_end,
    })
}

/// One JSON object per line.
pub fn write_corpus(path: &Path, examples: &[RagExample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<RagExample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut examples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: RagExample = serde_json::from_str(&line)?;
        example.validate()?;
        examples.push(example);
    }
    Ok(examples)
}
