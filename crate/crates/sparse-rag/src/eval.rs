//! Quality metrics, the threshold sweep, and throughput benchmarks.
//!
//! Metrics are pure functions, safe to call from anywhere. Anything that
//! reads the clock claims a process-wide exclusivity flag first: timings on
//! shared hardware are garbage, and the flag turns a silent protocol breach
//! into an error.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::cache::SegmentedCache;
use crate::data::RagExample;
use crate::error::{Error, Result};
use crate::model::{forward, ForwardRequest, ModelBundle, ModelConfig, Scalar, Visibility};
use crate::pipeline::{
    assess_all, decode_steps, filter_contexts, generate, GenerationParams, PipelineOptions,
};

/// Drops pad and eos; the comparison alphabet for sequence metrics.
pub fn strip_special(tokens: &[u32], config: &ModelConfig) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != config.pad_id && t != config.eos_id)
        .collect()
}

/// 1.0 iff the sequences match after stripping pad/eos.
pub fn exact_match(prediction: &[u32], gold: &[u32], config: &ModelConfig) -> f64 {
    if strip_special(prediction, config) == strip_special(gold, config) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of token-multiset precision and recall. Both empty is a
/// perfect match; exactly one empty scores zero.
pub fn token_f1(prediction: &[u32], gold: &[u32]) -> f64 {
    if prediction.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if prediction.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for &t in gold {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for &t in prediction {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / prediction.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-class F1 over binary labels, zero-denominator convention F1 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryF1 {
    pub label0: f64,
    pub label1: f64,
    pub average: f64,
}

pub fn binary_f1(predictions: &[u8], golds: &[u8]) -> Result<BinaryF1> {
    if predictions.len() != golds.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} golds (both must be non-empty and equal)",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.iter().chain(golds).any(|&l| l > 1) {
        return Err(Error::Config("binary labels must be 0 or 1".into()));
    }
    let class_f1 = |class: u8| {
        let tp = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p == class && g == class)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p == class && g != class)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p != class && g == class)
            .count() as f64;
        if tp + fp == 0.0 || tp + fn_ == 0.0 {
            return 0.0;
        }
        let precision = tp / (tp + fp);
        let recall = tp / (tp + fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };
    let label0 = class_f1(0);
    let label1 = class_f1(1);
    Ok(BinaryF1 {
        label0,
        label1,
        average: (label0 + label1) / 2.0,
    })
}

/// Area under the ROC curve by pairwise comparison (ties count half).
/// Needs at least one example of each class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Eval("auc needs both classes present".into()));
    }
    let mut wins = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives.len() as f64 * negatives.len() as f64))
}

static TIMING_ACTIVE: AtomicBool = AtomicBool::new(false);

/// Held for the duration of a timing run; released on drop.
#[derive(Debug)]
pub struct TimingGuard(());

impl Drop for TimingGuard {
    fn drop(&mut self) {
        TIMING_ACTIVE.store(false, Ordering::SeqCst);
    }
}

/// Claims the process-wide timing flag. Timings demand exclusive use of the
/// process; overlapping runs are refused rather than silently skewed.
pub fn claim_exclusive_timing() -> Result<TimingGuard> {
    if TIMING_ACTIVE.swap(true, Ordering::SeqCst) {
        return Err(Error::Eval(
            "another timing run is active in this process".into(),
        ));
    }
    Ok(TimingGuard(()))
}

fn seconds_of<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// One row of the threshold sweep. Serialized with exactly these names.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub em: f64,
    pub token_f1: f64,
    pub avg_k: f64,
    pub ds_tps: f64,
    pub fallback_rate: f64,
}

/// CSV with the fixed column order.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma,em,token_f1,avg_k,ds_tps,fallback_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.sigma, r.em, r.token_f1, r.avg_k, r.ds_tps, r.fallback_rate
        ));
    }
    out
}

/// Evaluates every sigma over the split. Prefill and assessment run once per
/// example (scores do not depend on sigma); each sigma then filters and
/// decodes. Decode wall time feeds the ds_tps column, so the run claims the
/// timing flag.
pub fn threshold_sweep<T: Scalar>(
    model: &ModelBundle<T>,
    examples: &[RagExample],
    sigmas: &[f64],
    options: &PipelineOptions,
    params: &GenerationParams,
) -> Result<Vec<SweepRow>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("sweep needs a non-empty split".into()));
    }
    if sigmas.is_empty() {
        return Err(Error::Config("sweep needs at least one sigma".into()));
    }
    let _guard = claim_exclusive_timing()?;
    #[derive(Default, Clone, Copy)]
    struct Acc {
        em: f64,
        f1: f64,
        kept: usize,
        fallbacks: usize,
        decode_tokens: usize,
        decode_secs: f64,
    }
    let mut accs = vec![Acc::default(); sigmas.len()];
    for example in examples {
        example.validate()?;
        let cache = SegmentedCache::prefill(model, &example.question, &example.contexts)?;
        let scores = assess_all(model, &cache, options.score_mode)?;
        let gold = strip_special(&example.answer, &model.config);
        for (acc, &sigma) in accs.iter_mut().zip(sigmas) {
            let (kept, fallback) = filter_contexts(&scores, sigma, options.fallback)?;
            let (tokens, secs) =
                seconds_of(|| generate(model, &cache, &kept, params, options));
            let tokens = tokens?;
            acc.em += exact_match(&tokens, &example.answer, &model.config);
            acc.f1 += token_f1(&strip_special(&tokens, &model.config), &gold);
            acc.kept += kept.len();
            acc.fallbacks += fallback as usize;
            acc.decode_tokens += tokens.len() + 1;
            acc.decode_secs += secs;
        }
    }
    let n = examples.len() as f64;
    Ok(accs
        .iter()
        .zip(sigmas)
        .map(|(acc, &sigma)| SweepRow {
            sigma,
            em: acc.em / n,
            token_f1: acc.f1 / n,
            avg_k: acc.kept as f64 / n,
            ds_tps: acc.decode_tokens as f64 / acc.decode_secs.max(1e-12),
            fallback_rate: acc.fallbacks as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    /// One monolithic causal forward over question + all contexts.
    Dense,
    /// Cached question, then every context prefilled independently.
    Parallel,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncodeBench {
    pub mode: EncodeMode,
    pub tokens_per_sec: f64,
    pub tokens_per_trial: usize,
    pub trial_secs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeBench {
    pub kept: usize,
    pub output_len: usize,
    pub tokens_per_sec: f64,
    pub trial_secs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub encode: Vec<EncodeBench>,
    pub decode: Vec<DecodeBench>,
    pub environment: String,
}

/// CSV over both grids: encode rows leave k/output_len blank, decode rows
/// leave mode blank.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from("kind,mode,k,output_len,tokens_per_sec\n");
    for row in &report.encode {
        let mode = match row.mode {
            EncodeMode::Dense => "dense",
            EncodeMode::Parallel => "parallel",
        };
        out.push_str(&format!(
            "encode,{mode},,,{:.3}\n",
            row.tokens_per_sec
        ));
    }
    for row in &report.decode {
        out.push_str(&format!(
            "decode,,{},{},{:.3}\n",
            row.kept, row.output_len, row.tokens_per_sec
        ));
    }
    out
}

/// Where these numbers came from; timings are only comparable within one
/// environment string.
pub fn environment_note() -> String {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!(
        "{}-{}, {} hw threads, parallel feature {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        cfg!(feature = "parallel"),
    )
}

const WARMUP_TRIALS: usize = 2;
const MEASURED_TRIALS: usize = 5;

/// Prefill throughput for one (question, contexts) shape: median tokens/sec
/// over 5 trials after 2 warmups.
pub fn bench_encode<T: Scalar>(
    model: &ModelBundle<T>,
    question: &[u32],
    contexts: &[Vec<u32>],
    mode: EncodeMode,
) -> Result<EncodeBench> {
    let _guard = claim_exclusive_timing()?;
    bench_encode_locked(model, question, contexts, mode)
}

fn bench_encode_locked<T: Scalar>(
    model: &ModelBundle<T>,
    question: &[u32],
    contexts: &[Vec<u32>],
    mode: EncodeMode,
) -> Result<EncodeBench> {
    let total: usize = question.len() + contexts.iter().map(Vec::len).sum::<usize>();
    let trial = || -> Result<()> {
        match mode {
            EncodeMode::Dense => {
                let mut tokens = question.to_vec();
                for c in contexts {
                    tokens.extend_from_slice(c);
                }
                let positions: Vec<u32> = (0..tokens.len() as u32).collect();
                forward(
                    model,
                    &ForwardRequest {
                        tokens: &tokens,
                        positions: &positions,
                        cache: &[],
                        visibility: Visibility::Causal,
                    },
                )?;
            }
            EncodeMode::Parallel => {
                SegmentedCache::prefill(model, question, contexts)?;
            }
        }
        Ok(())
    };
    for _ in 0..WARMUP_TRIALS {
        trial()?;
    }
    let mut secs = Vec::with_capacity(MEASURED_TRIALS);
    for _ in 0..MEASURED_TRIALS {
        let (out, s) = seconds_of(trial);
        out?;
        secs.push(s);
    }
    let mut rates: Vec<f64> = secs.iter().map(|s| total as f64 / s.max(1e-12)).collect();
    Ok(EncodeBench {
        mode,
        tokens_per_sec: median(&mut rates),
        tokens_per_trial: total,
        trial_secs: secs,
    })
}

/// Decode throughput grid: for each kept-count and output length, greedy
/// decoding of exactly that many tokens against the view, median of 5
/// trials after 2 warmups.
pub fn bench_decode<T: Scalar>(
    model: &ModelBundle<T>,
    cache: &SegmentedCache<T>,
    kept_sizes: &[usize],
    output_lens: &[usize],
) -> Result<Vec<DecodeBench>> {
    let _guard = claim_exclusive_timing()?;
    let mut rows = Vec::new();
    for &k in kept_sizes {
        if k > cache.num_contexts() {
            return Err(Error::Cache(format!(
                "kept size {k} exceeds {} prefilled contexts",
                cache.num_contexts()
            )));
        }
        let kept: Vec<usize> = (0..k).collect();
        let view = cache.select(&kept)?;
        let start = view.next_position();
        for &len in output_lens {
            if len == 0 {
                return Err(Error::Config("output length must be >= 1".into()));
            }
            let mut reference = None;
            for _ in 0..WARMUP_TRIALS {
                reference = Some(decode_steps(model, &view, start, len)?);
            }
            let mut secs = Vec::with_capacity(MEASURED_TRIALS);
            for _ in 0..MEASURED_TRIALS {
                let (tokens, s) = seconds_of(|| decode_steps(model, &view, start, len));
                let tokens = tokens?;
                // Timings vary; outputs must not.
                if let Some(expect) = &reference {
                    if &tokens != expect {
                        return Err(Error::Eval(
                            "decode produced different tokens across trials".into(),
                        ));
                    }
                }
                secs.push(s);
            }
            let mut rates: Vec<f64> =
                secs.iter().map(|s| len as f64 / s.max(1e-12)).collect();
            rows.push(DecodeBench {
                kept: k,
                output_len: len,
                tokens_per_sec: median(&mut rates),
                trial_secs: secs,
            });
        }
    }
    Ok(rows)
}
