//! Segmented key-value cache: one question segment plus N context segments,
//! each prefilled against the cached question and nothing else.
//!
//! Independence is structural. A context prefill reads the question's KV and
//! its own tokens; sibling segments are never touched, so prefills commute
//! and may run concurrently. Selection concatenates the question with kept
//! contexts in ascending index order, which keeps decoding deterministic and
//! matches the order training saw.

use std::path::Path;

use crate::artifact::{write_tensors, Fnv1a, Manifest};
use crate::error::{Error, Result};
use crate::layout::inference_suffix_position;
use crate::model::{forward, ForwardRequest, ModelBundle, Scalar, TokenKv, Visibility};
use crate::par;

/// Which span of the prompt a segment holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Question,
    Context,
    Suffix,
}

impl SegmentKind {
    fn tag(self) -> u8 {
        match self {
            SegmentKind::Question => 0,
            SegmentKind::Context => 1,
            SegmentKind::Suffix => 2,
        }
    }
}

/// One prefilled span: tokens, their position ids, per-layer KV rows, and the
/// next-token logits after the span's last token (given everything the span
/// could see).
#[derive(Debug, Clone)]
pub struct Segment<T> {
    pub kind: SegmentKind,
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub kv: TokenKv<T>,
    pub end_logits: Vec<T>,
    /// Checksum of the question segment this was prefilled against.
    prefilled_against: Option<u64>,
}

impl<T: Scalar> Segment<T> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Content hash over kind, tokens, positions, KV bits, and end logits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&[self.kind.tag()]);
        for t in &self.token_ids {
            h.update(&t.to_le_bytes());
        }
        for p in &self.position_ids {
            h.update(&p.to_le_bytes());
        }
        for layer in &self.kv.layers {
            for &v in layer.k.iter().chain(&layer.v) {
                h.update(&v.to_bits_u64().to_le_bytes());
            }
        }
        for &v in &self.end_logits {
            h.update(&v.to_bits_u64().to_le_bytes());
        }
        h.finish()
    }
}

fn last_logits_row<T: Scalar>(logits: &[T], vocab: usize) -> Vec<T> {
    logits[logits.len() - vocab..].to_vec()
}

/// Causal forward over the question alone, positions `0..len`.
pub fn prefill_question<T: Scalar>(
    model: &ModelBundle<T>,
    question_tokens: &[u32],
) -> Result<Segment<T>> {
    if question_tokens.is_empty() {
        return Err(Error::EmptyInput("question must be non-empty".into()));
    }
    let positions: Vec<u32> = (0..question_tokens.len() as u32).collect();
    let out = forward(
        model,
        &ForwardRequest {
            tokens: question_tokens,
            positions: &positions,
            cache: &[],
            visibility: Visibility::Causal,
        },
    )?;
    Ok(Segment {
        kind: SegmentKind::Question,
        token_ids: question_tokens.to_vec(),
        position_ids: positions,
        kv: out.kv,
        end_logits: last_logits_row(&out.logits, model.config.vocab_size),
        prefilled_against: None,
    })
}

/// Forward over one context with the question as cache. Positions restart at
/// `question.len()`, so every context occupies the same position range and
/// never learns how many siblings exist.
pub fn prefill_context<T: Scalar>(
    model: &ModelBundle<T>,
    question: &Segment<T>,
    context_tokens: &[u32],
) -> Result<Segment<T>> {
    if question.kind != SegmentKind::Question {
        return Err(Error::Cache(
            "contexts must be prefilled against a question segment".into(),
        ));
    }
    if context_tokens.is_empty() {
        return Err(Error::EmptyInput("context must be non-empty".into()));
    }
    let q = question.len() as u32;
    let positions: Vec<u32> = (q..q + context_tokens.len() as u32).collect();
    let out = forward(
        model,
        &ForwardRequest {
            tokens: context_tokens,
            positions: &positions,
            cache: &[&question.kv],
            visibility: Visibility::Causal,
        },
    )?;
    Ok(Segment {
        kind: SegmentKind::Context,
        token_ids: context_tokens.to_vec(),
        position_ids: positions,
        kv: out.kv,
        end_logits: last_logits_row(&out.logits, model.config.vocab_size),
        prefilled_against: Some(question.checksum()),
    })
}

/// The full prefilled state for one request: question, contexts, and the
/// filtering results once scoring has run.
#[derive(Debug, Clone)]
pub struct SegmentedCache<T> {
    question: Segment<T>,
    question_checksum: u64,
    contexts: Vec<Segment<T>>,
    scores: Option<Vec<f64>>,
    kept: Option<Vec<usize>>,
}

impl<T: Scalar> SegmentedCache<T> {
    pub fn new(question: Segment<T>) -> Result<Self> {
        if question.kind != SegmentKind::Question {
            return Err(Error::Cache("cache root must be a question segment".into()));
        }
        let question_checksum = question.checksum();
        Ok(SegmentedCache {
            question,
            question_checksum,
            contexts: Vec::new(),
            scores: None,
            kept: None,
        })
    }

    /// Prefills the question, then every context against it in parallel.
    pub fn prefill(
        model: &ModelBundle<T>,
        question_tokens: &[u32],
        contexts: &[Vec<u32>],
    ) -> Result<Self> {
        let question = prefill_question(model, question_tokens)?;
        let segments = par::map_slice(contexts, |tokens| {
            prefill_context(model, &question, tokens)
        });
        let mut cache = SegmentedCache::new(question)?;
        for segment in segments {
            cache.add_context(segment?)?;
        }
        Ok(cache)
    }

    /// Admits a context only if it was prefilled against this exact question.
    pub fn add_context(&mut self, segment: Segment<T>) -> Result<()> {
        if segment.kind != SegmentKind::Context {
            return Err(Error::Cache("expected a context segment".into()));
        }
        if segment.prefilled_against != Some(self.question_checksum) {
            return Err(Error::Cache(
                "context was prefilled against a different question".into(),
            ));
        }
        self.contexts.push(segment);
        self.scores = None;
        self.kept = None;
        Ok(())
    }

    pub fn question(&self) -> &Segment<T> {
        &self.question
    }

    pub fn contexts(&self) -> &[Segment<T>] {
        &self.contexts
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn question_checksum(&self) -> u64 {
        self.question_checksum
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn kept(&self) -> Option<&[usize]> {
        self.kept.as_deref()
    }

    /// Records per-context relevance scores (one per context, each in [0,1]).
    pub fn set_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.contexts.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} contexts",
                scores.len(),
                self.contexts.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Cache("scores must lie in [0, 1]".into()));
        }
        self.scores = Some(scores);
        Ok(())
    }

    /// Records the kept index set (validated, sorted, deduplicated).
    pub fn set_kept(&mut self, kept: &[usize]) -> Result<()> {
        self.kept = Some(normalize_kept(kept, self.contexts.len())?);
        Ok(())
    }

    /// View over the question plus the kept contexts in ascending index
    /// order. Indices are deduplicated; out-of-range indices are an error.
    pub fn select(&self, kept: &[usize]) -> Result<CacheView<'_, T>> {
        let kept = normalize_kept(kept, self.contexts.len())?;
        let contexts: Vec<&Segment<T>> = kept.iter().map(|&i| &self.contexts[i]).collect();
        Ok(CacheView {
            question: &self.question,
            contexts,
            kept,
        })
    }

    /// View with every prefilled context kept.
    pub fn select_all(&self) -> CacheView<'_, T> {
        let kept: Vec<usize> = (0..self.contexts.len()).collect();
        self.select(&kept).expect("full index set is always valid")
    }

    /// Debug dump in the checkpoint manifest + raw-float format.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Manifest::new("cache-dump", T::DTYPE);
        manifest.push_field("question_len", self.question.len());
        manifest.push_field("num_contexts", self.contexts.len());
        manifest.push_field("question_checksum", self.question_checksum);
        let heads_shape = |seg: &Segment<T>, dim: usize| vec![seg.len(), dim];
        let dim = match self.question.kv.layers.first() {
            Some(layer) if self.question.len() > 0 => layer.k.len() / self.question.len(),
            _ => 0,
        };
        let mut tensors: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (name, seg) in std::iter::once(("question".to_string(), &self.question)).chain(
            self.contexts
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("context.{i}"), s)),
        ) {
            for (l, layer) in seg.kv.layers.iter().enumerate() {
                tensors.push((format!("{name}.k.{l}"), heads_shape(seg, dim), &layer.k));
                tensors.push((format!("{name}.v.{l}"), heads_shape(seg, dim), &layer.v));
            }
            tensors.push((
                format!("{name}.end_logits"),
                vec![seg.end_logits.len()],
                &seg.end_logits,
            ));
        }
        write_tensors(&mut manifest, &dir.join("cache.bin"), &tensors)?;
        std::fs::write(dir.join("manifest.txt"), manifest.render())?;
        Ok(())
    }
}

fn normalize_kept(kept: &[usize], num_contexts: usize) -> Result<Vec<usize>> {
    let mut kept = kept.to_vec();
    kept.sort_unstable();
    kept.dedup();
    if let Some(&bad) = kept.iter().find(|&&i| i >= num_contexts) {
        return Err(Error::Cache(format!(
            "kept index {bad} out of range for {num_contexts} contexts"
        )));
    }
    Ok(kept)
}

/// Immutable decode-time view: question KV followed by kept contexts' KV in
/// ascending index order.
#[derive(Debug, Clone)]
pub struct CacheView<'a, T> {
    pub question: &'a Segment<T>,
    pub contexts: Vec<&'a Segment<T>>,
    pub kept: Vec<usize>,
}

impl<'a, T: Scalar> CacheView<'a, T> {
    /// Total cached tokens: question plus every kept context.
    pub fn total_len(&self) -> usize {
        self.question.len() + self.contexts.iter().map(|s| s.len()).sum::<usize>()
    }

    /// Cache slices in attention order, ready for a `ForwardRequest`.
    pub fn kv_refs(&self) -> Vec<&'a TokenKv<T>> {
        std::iter::once(&self.question.kv)
            .chain(self.contexts.iter().map(|s| &s.kv))
            .collect()
    }

    /// First position id for tokens appended after this view.
    pub fn next_position(&self) -> u32 {
        let lens: Vec<usize> = self.contexts.iter().map(|s| s.len()).collect();
        inference_suffix_position(self.question.len(), &lens)
    }
}
