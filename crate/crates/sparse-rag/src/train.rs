//! Two-task mixture training: relevance assessment and selective generation.
//!
//! Each step samples a batch of formatted examples, runs the blocked
//! backward pass on every slot, reduces gradients in a fixed order, and
//! applies a decoupled-weight-decay adaptive update. Checkpoints are scored
//! on the validation split and the best one is what training returns.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::SegmentedCache;
use crate::data::{format_assessment, format_generation, Corpus, FormattedExample, RagExample};
use crate::error::{Error, Result};
use crate::eval::{auc, exact_match};
use crate::layout::build_block_mask;
use crate::model::{
    backward, save_checkpoint, Dropout, ForwardRequest, ModelBundle, Scalar, Visibility,
};
use crate::par;
use crate::pipeline::{assessment_probs, generate, GenerationParams, PipelineOptions};

/// First-moment decay.
pub const BETA1: f64 = 0.9;
/// Second-moment decay.
pub const BETA2: f64 = 0.98;
/// Decoupled weight decay applied to every parameter.
pub const WEIGHT_DECAY: f64 = 0.01;
/// Denominator floor in the adaptive update.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Probability that a batch slot is an assessment example.
    pub mixture_weight_assessment: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Validation cadence; the final step is always evaluated.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mixture_weight_assessment: 0.5,
            batch_size: 8,
            steps: 1000,
            learning_rate: 3e-3,
            dropout: 0.05,
            grad_clip: 1.0,
            checkpoint_every: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mixture_weight_assessment) {
            return Err(Error::Config(format!(
                "mixture weight {} outside [0, 1]",
                self.mixture_weight_assessment
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Validation-split quality of one checkpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValMetrics {
    pub assessment_accuracy: f64,
    pub assessment_auc: f64,
    pub generation_em: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub train_loss: f64,
    pub metrics: ValMetrics,
    /// Mean of assessment AUC and generation EM; picks the best checkpoint.
    pub selection_score: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Weights of the best checkpoint, not necessarily the last step.
    pub model: ModelBundle<T>,
    pub loss_curve: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_step: usize,
}

/// One slot of a batch, drawn before any parallel work so the curve is
/// deterministic regardless of thread count.
struct SampleSpec {
    example: usize,
    context: Option<usize>,
    dropout_seed: u64,
}

/// splitmix64; decorrelates per-slot dropout streams from the batch rng.
fn mix_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul((step as u64) << 20 | slot as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    train: &[RagExample],
    config: &TrainConfig,
    step: usize,
) -> Vec<SampleSpec> {
    (0..config.batch_size)
        .map(|slot| {
            let assess = rng.random::<f64>() < config.mixture_weight_assessment;
            let example = rng.random_range(0..train.len());
            let context = if assess {
                Some(rng.random_range(0..train[example].contexts.len()))
            } else {
                None
            };
            SampleSpec {
                example,
                context,
                dropout_seed: mix_seed(config.seed, step, slot),
            }
        })
        .collect()
}

/// Adaptive moments in f64 regardless of the model scalar, so long runs do
/// not lose state precision to accumulation error.
struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, model: &mut ModelBundle<T>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        for (ti, tensor) in model.weights.tensors_mut().into_iter().enumerate() {
            for (ei, w) in tensor.iter_mut().enumerate() {
                let g = grads[ti][ei];
                let m = &mut self.m[ti][ei];
                let v = &mut self.v[ti][ei];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                let wf = (*w).to_f64();
                *w = T::from_f64(wf - lr * (update + WEIGHT_DECAY * wf));
            }
        }
    }
}

fn format_spec(
    train: &[RagExample],
    spec: &SampleSpec,
    config: &crate::model::ModelConfig,
) -> Result<FormattedExample> {
    let example = &train[spec.example];
    match spec.context {
        Some(ctx) => format_assessment(example, ctx, config),
        None => format_generation(example, config),
    }
}

/// Trains the mixture and returns the best-validation checkpoint. With an
/// output directory, every evaluated checkpoint is saved under
/// `step-{n}/`, the winner is copied to `best/`, and one JSON object per
/// checkpoint is appended to `metrics.jsonl`.
pub fn train<T: Scalar>(
    model: &ModelBundle<T>,
    corpus: &Corpus,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model.config.validate()?;
    let train_split = corpus.train();
    if train_split.is_empty() {
        return Err(Error::Train("empty training split".into()));
    }
    if config.mixture_weight_assessment > 0.0 {
        if let Some(i) = train_split.iter().position(|e| e.labels.is_none()) {
            return Err(Error::Train(format!(
                "training example {i} has no labels but the assessment mixture weight is positive"
            )));
        }
    }
    if config.steps == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            loss_curve: vec![],
            checkpoints: vec![],
            best_step: 0,
        });
    }

    let mut current = model.clone();
    let shapes: Vec<usize> = current.weights.tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = AdamW::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut checkpoints: Vec<CheckpointRecord> = Vec::new();
    let mut best: Option<(f64, usize, ModelBundle<T>)> = None;

    let mut metrics_log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    for step in 0..config.steps {
        let specs = draw_batch(&mut rng, train_split, config, step);
        let formatted: Vec<(FormattedExample, u64)> = specs
            .iter()
            .map(|s| Ok((format_spec(train_split, s, &current.config)?, s.dropout_seed)))
            .collect::<Result<_>>()?;

        let slot_grads = par::map_slice(&formatted, |(fe, seed)| {
            let mask = build_block_mask(&fe.plan)?;
            let dropout = (config.dropout > 0.0).then_some(Dropout {
                rate: config.dropout,
                seed: *seed,
            });
            backward(
                &current,
                &ForwardRequest {
                    tokens: &fe.tokens,
                    positions: &fe.positions,
                    cache: &[],
                    visibility: Visibility::Blocked(&mask),
                },
                &fe.target_ids,
                &fe.target_mask,
                dropout,
            )
        });

        // Fixed-order reduction in f64: the curve must not depend on how
        // many threads ran the batch.
        let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let mut loss = 0.0;
        for slot in slot_grads {
            let (slot_loss, slot_grad) = slot?;
            loss += slot_loss.to_f64();
            for (acc, tensor) in grads.iter_mut().zip(slot_grad.tensors()) {
                for (a, &g) in acc.iter_mut().zip(tensor.iter()) {
                    *a += g.to_f64();
                }
            }
        }
        let inv = 1.0 / config.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        loss_curve.push(loss);

        let mut norm_sq = 0.0;
        for tensor in &mut grads {
            for g in tensor.iter_mut() {
                *g *= inv;
                norm_sq += *g * *g;
            }
        }
        let norm = norm_sq.sqrt();
        if norm > config.grad_clip {
            let scale = config.grad_clip / norm;
            for tensor in &mut grads {
                for g in tensor.iter_mut() {
                    *g *= scale;
                }
            }
        }
        optimizer.step(&mut current, &grads, config.learning_rate);

        let done = step + 1;
        if done % config.checkpoint_every == 0 || done == config.steps {
            let metrics = eval_checkpoint(&current, corpus.val())?;
            let record = CheckpointRecord {
                step: done,
                train_loss: loss,
                metrics,
                selection_score: 0.5 * (metrics.assessment_auc + metrics.generation_em),
            };
            checkpoints.push(record);
            if best
                .as_ref()
                .map_or(true, |(score, _, _)| record.selection_score > *score)
            {
                best = Some((record.selection_score, done, current.clone()));
            }
            if let Some(dir) = out_dir {
                save_checkpoint(&current, &dir.join(format!("step-{done}")))?;
            }
            if let Some(log) = metrics_log.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(log, "{line}")?;
            }
        }
    }

    let (_, best_step, best_model) = best.expect("steps >= 1 always evaluates the final step");
    if let Some(dir) = out_dir {
        save_checkpoint(&best_model, &dir.join("best"))?;
    }
    Ok(TrainOutcome {
        model: best_model,
        loss_curve,
        checkpoints,
        best_step,
    })
}

/// Scores one checkpoint on a labeled split: rating accuracy and AUC over
/// every context, exact match of greedy decoding with all contexts kept.
pub fn eval_checkpoint<T: Scalar>(model: &ModelBundle<T>, split: &[RagExample]) -> Result<ValMetrics> {
    if split.is_empty() {
        return Err(Error::Eval("empty validation split".into()));
    }
    struct PerExample {
        scores: Vec<f64>,
        preds: Vec<u8>,
        labels: Vec<u8>,
        em: f64,
    }
    let rows = par::map_slice(split, |example| -> Result<PerExample> {
        example.validate()?;
        let labels = example
            .labels
            .clone()
            .ok_or_else(|| Error::Eval("validation example has no labels".into()))?;
        let cache = SegmentedCache::prefill(model, &example.question, &example.contexts)?;
        let mut scores = Vec::with_capacity(labels.len());
        let mut preds = Vec::with_capacity(labels.len());
        for i in 0..cache.num_contexts() {
            let (p_good, p_bad) = assessment_probs(model, &cache, i)?;
            scores.push(p_good);
            preds.push(u8::from(p_good > p_bad));
        }
        let kept: Vec<usize> = (0..cache.num_contexts()).collect();
        let params = GenerationParams {
            max_tokens: example.answer.len() + 1,
            ..GenerationParams::default()
        };
        let tokens = generate(model, &cache, &kept, &params, &PipelineOptions::default())?;
        Ok(PerExample {
            scores,
            preds,
            labels,
            em: exact_match(&tokens, &example.answer, &model.config),
        })
    });

    let mut scores = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut em_sum = 0.0;
    for row in rows {
        let row = row?;
        scores.extend(row.scores);
        preds.extend(row.preds);
        labels.extend(row.labels);
        em_sum += row.em;
    }
    let hits = preds
        .iter()
        .zip(&labels)
        .filter(|(&p, &g)| p == g)
        .count();
    Ok(ValMetrics {
        assessment_accuracy: hits as f64 / preds.len() as f64,
        assessment_auc: auc(&scores, &labels)?,
        generation_em: em_sum / split.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthTaskConfig;
    use crate::model::{forward, init_model, load_checkpoint, ModelConfig};
    use crate::testutil;

    /// Synth task whose tokenizer lands exactly on the tiny test vocab (6
    /// reserved + 2 keys + 2 values + 2 noise symbols = 12).
    fn tiny_task(num_examples: usize) -> SynthTaskConfig {
        SynthTaskConfig {
            vocab_payload: 6,
            num_keys: 2,
            num_values: 2,
            contexts_per_example: 3,
            relevant_fraction: 0.34,
            context_noise_len: 1,
            num_examples,
            seed: 9,
            ..SynthTaskConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_the_input_bitwise() {
        let model = testutil::tiny_model(3);
        let corpus = crate::data::generate_corpus(&tiny_task(10)).unwrap();
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, &corpus, &config, None).unwrap();
        assert_eq!(out.model.checksum(), model.checksum());
        assert!(out.loss_curve.is_empty());
        assert!(out.checkpoints.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_curves_and_models() {
        let model = testutil::tiny_model(3);
        let corpus = crate::data::generate_corpus(&tiny_task(20)).unwrap();
        let config = TrainConfig {
            steps: 4,
            batch_size: 2,
            checkpoint_every: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train(&model, &corpus, &config, None).unwrap();
        let b = train(&model, &corpus, &config, None).unwrap();
        assert_eq!(a.loss_curve.len(), 4);
        assert!(a.loss_curve.iter().all(|l| l.is_finite()));
        let bits = |c: &[f64]| c.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_curve), bits(&b.loss_curve));
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.best_step, b.best_step);

        let different = TrainConfig { seed: 18, ..config };
        let c = train(&model, &corpus, &config, None).unwrap();
        let d = train(&model, &corpus, &different, None).unwrap();
        assert_eq!(bits(&a.loss_curve), bits(&c.loss_curve));
        assert_ne!(bits(&a.loss_curve), bits(&d.loss_curve));
    }

    #[test]
    fn overfit_probe_memorizes_eight_examples() {
        // Eight fixed single-context examples; 500 full-batch steps must
        // drive the mixture loss under 0.05.
        let config = ModelConfig {
            dim: 16,
            ffn_dim: 32,
            ..testutil::tiny_config()
        };
        let model = init_model::<f32>(&config, 5).unwrap();
        let mut examples: Vec<RagExample> = (0..8)
            .map(|i| {
                let key = 6 + (i % 2) as u32;
                let value = 8 + (i % 4) as u32 % 2 + 2 * (i % 2) as u32;
                let relevant = i % 2 == 0;
                RagExample {
                    question: vec![key],
                    contexts: vec![vec![if relevant { key } else { 7 - (i % 2) as u32 }, value, 6 + (i % 3) as u32]],
                    answer: vec![value],
                    labels: Some(vec![u8::from(relevant)]),
                }
            })
            .collect();
        // One held-out example with both label classes so validation AUC
        // is defined.
        examples.push(RagExample {
            question: vec![6],
            contexts: vec![vec![6, 8, 7], vec![7, 9, 6]],
            answer: vec![8],
            labels: Some(vec![1, 0]),
        });
        let corpus = Corpus {
            examples,
            train_end: 8,
            val_end: 9,
        };
        let config = TrainConfig {
            batch_size: 8,
            steps: 500,
            dropout: 0.0,
            checkpoint_every: 500,
            learning_rate: 3e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&model, &corpus, &config, None).unwrap();
        assert!(out.loss_curve.iter().all(|l| l.is_finite()));
        let last = *out.loss_curve.last().unwrap();
        assert!(last < 0.05, "final training loss {last} did not memorize");
    }

    #[test]
    fn untrained_scores_are_uninformative_at_scale() {
        // 50 examples x 10 contexts = 500 scored contexts; a random model
        // must sit near chance.
        let task = SynthTaskConfig {
            vocab_payload: 6,
            num_keys: 2,
            num_values: 2,
            contexts_per_example: 10,
            relevant_fraction: 0.2,
            context_noise_len: 1,
            num_examples: 63,
            seed: 2,
            ..SynthTaskConfig::default()
        };
        let corpus = crate::data::generate_corpus(&task).unwrap();
        let model = testutil::tiny_model(29);
        let metrics = eval_checkpoint(&model, corpus.train()).unwrap();
        assert!(
            (0.4..=0.6).contains(&metrics.assessment_auc),
            "untrained AUC {} strayed from chance",
            metrics.assessment_auc
        );
    }

    #[test]
    fn oracle_scores_and_echoed_answers_are_perfect() {
        let corpus = crate::data::generate_corpus(&tiny_task(20)).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut em = 0.0;
        let config = testutil::tiny_config();
        for example in corpus.val() {
            for &l in example.labels.as_ref().unwrap() {
                scores.push(l as f64);
                labels.push(l);
            }
            em += exact_match(&example.answer, &example.answer, &config);
        }
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(em / corpus.val().len() as f64, 1.0);
    }

    #[test]
    fn context_blocks_stay_isolated_under_the_training_mask() {
        // Replacing all of context 1 must not move a single bit of the
        // logits computed over context 0's positions.
        let model = testutil::tiny_model(41);
        let example = RagExample {
            question: vec![6, 7],
            contexts: vec![vec![8, 9, 10], vec![11, 4, 5]],
            answer: vec![9],
            labels: Some(vec![1, 0]),
        };
        let fe = format_generation(&example, &model.config).unwrap();
        let mask = build_block_mask(&fe.plan).unwrap();
        let logits_of = |tokens: &[u32]| {
            forward(
                &model,
                &ForwardRequest {
                    tokens,
                    positions: &fe.positions,
                    cache: &[],
                    visibility: Visibility::Blocked(&mask),
                },
            )
            .unwrap()
            .logits
        };
        let base = logits_of(&fe.tokens);
        let mut patched = fe.tokens.clone();
        for t in 5..8 {
            patched[t] = model.config.pad_id;
        }
        let swapped = logits_of(&patched);
        let vocab = model.config.vocab_size;
        for t in 2..5 {
            assert_eq!(
                base[t * vocab..(t + 1) * vocab],
                swapped[t * vocab..(t + 1) * vocab],
                "context 0 logits moved at row {t}"
            );
        }
    }

    #[test]
    fn checkpoints_land_on_disk_with_metrics() {
        let model = testutil::tiny_model(3);
        let corpus = crate::data::generate_corpus(&tiny_task(20)).unwrap();
        let config = TrainConfig {
            steps: 2,
            batch_size: 2,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&model, &corpus, &config, Some(dir.path())).unwrap();
        for step in 1..=2 {
            assert!(dir.path().join(format!("step-{step}")).is_dir());
        }
        let best = load_checkpoint::<f32>(&dir.path().join("best")).unwrap();
        assert_eq!(best.checksum(), out.model.checksum());
        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["metrics"]["assessment_auc"].is_number());
            assert!(v["selection_score"].is_number());
        }
    }

    #[test]
    fn degenerate_configs_and_corpora_are_rejected() {
        let model = testutil::tiny_model(3);
        let corpus = crate::data::generate_corpus(&tiny_task(10)).unwrap();
        let base = TrainConfig {
            steps: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        for bad in [
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { dropout: 1.0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { grad_clip: 0.0, ..base.clone() },
            TrainConfig { checkpoint_every: 0, ..base.clone() },
            TrainConfig { mixture_weight_assessment: 1.5, ..base.clone() },
        ] {
            assert!(train(&model, &corpus, &bad, None).is_err());
        }

        // Train labels stripped: the assessment half of the mixture has
        // nothing to learn from, but generation-only training still works.
        let mut unlabeled = corpus.clone();
        for e in &mut unlabeled.examples[..unlabeled.train_end] {
            e.labels = None;
        }
        assert!(train(&model, &unlabeled, &base, None).is_err());
        let generation_only = TrainConfig {
            mixture_weight_assessment: 0.0,
            ..base
        };
        assert!(train(&model, &unlabeled, &generation_only, None).is_ok());

        // Validation always needs labels: checkpoint selection reads them.
        let mut no_val_labels = corpus.clone();
        for e in &mut no_val_labels.examples {
            e.labels = None;
        }
        assert!(eval_checkpoint(&model, &[]).is_err());
        assert!(eval_checkpoint(&model, no_val_labels.val()).is_err());
        assert!(train(&model, &no_val_labels, &generation_only, None).is_err());
    }
}
