//! Attention layout for segmented sequences.
//!
//! A sequence is laid out as question ⊕ context_1 ⊕ ... ⊕ context_N ⊕ suffix.
//! Contexts are mutually invisible: each context token attends to the whole
//! question and to earlier tokens of its own context only. Suffix tokens
//! attend to everything before them. Position ids restart at `question_len`
//! for every context, so each context is encoded as if it directly followed
//! the question; the suffix continues after the combined length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment layout of one sequence: question, N contexts, decode/target suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub question_len: usize,
    pub context_lens: Vec<usize>,
    /// Control token plus targets (training) or generated tokens (inference).
    pub suffix_len: usize,
}

/// Which segment a flat token index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentId {
    Question,
    Context(usize),
    Suffix,
}

impl SegmentPlan {
    pub fn new(question_len: usize, context_lens: Vec<usize>, suffix_len: usize) -> Result<Self> {
        let plan = Self {
            question_len,
            context_lens,
            suffix_len,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.context_lens.is_empty() && self.question_len == 0 {
            return Err(Error::Config(
                "question must be non-empty when contexts are present".into(),
            ));
        }
        if self.context_lens.iter().any(|&l| l == 0) {
            return Err(Error::Config("context lengths must be positive".into()));
        }
        Ok(())
    }

    /// Total token count across all segments.
    pub fn total_len(&self) -> usize {
        self.question_len + self.context_total() + self.suffix_len
    }

    /// Combined length of all contexts.
    pub fn context_total(&self) -> usize {
        self.context_lens.iter().sum()
    }

    /// Flat index of the first suffix token.
    pub fn suffix_start(&self) -> usize {
        self.question_len + self.context_total()
    }

    /// Segment containing flat token index `t`.
    pub fn segment_of(&self, t: usize) -> Option<SegmentId> {
        if t < self.question_len {
            return Some(SegmentId::Question);
        }
        let mut start = self.question_len;
        for (i, &l) in self.context_lens.iter().enumerate() {
            if t < start + l {
                return Some(SegmentId::Context(i));
            }
            start += l;
        }
        if t < start + self.suffix_len {
            return Some(SegmentId::Suffix);
        }
        None
    }

    /// Errors if any assigned position id would reach `max_position`.
    pub fn check_fits(&self, max_position: u32) -> Result<()> {
        // Largest id is the end of the longest context run or the suffix end,
        // whichever is greater (contexts restart, so only the longest counts).
        let q = self.question_len;
        let max_id_plus_one = [
            q,
            q + self.context_lens.iter().copied().max().unwrap_or(0),
            self.suffix_start() + self.suffix_len,
        ]
        .into_iter()
        .max()
        .unwrap();
        if max_id_plus_one > max_position as usize {
            return Err(Error::PositionOverflow {
                position: max_id_plus_one.saturating_sub(1) as u32,
                max_position,
            });
        }
        Ok(())
    }
}

/// Per-token visible sets over a flat sequence. Always includes self.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    visible: Vec<Vec<u32>>,
}

impl BlockMask {
    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    /// Sorted flat indices visible to token `t`.
    pub fn visible(&self, t: usize) -> &[u32] {
        &self.visible[t]
    }

    pub fn is_visible(&self, t: usize, s: usize) -> bool {
        self.visible[t].binary_search(&(s as u32)).is_ok()
    }

    /// Total number of (token, visible token) pairs.
    pub fn pair_count(&self) -> usize {
        self.visible.iter().map(Vec::len).sum()
    }

    /// Plain causal mask over `len` tokens: token t sees 0..=t.
    pub fn causal(len: usize) -> Self {
        Self {
            visible: (0..len).map(|t| (0..=t as u32).collect()).collect(),
        }
    }
}

/// Builds the block mask for a plan: question causal, contexts see question
/// plus themselves causally, suffix sees everything before it causally.
pub fn build_block_mask(plan: &SegmentPlan) -> Result<BlockMask> {
    plan.validate()?;
    let q = plan.question_len;
    let total = plan.total_len();
    let suffix_start = plan.suffix_start();
    let mut visible = Vec::with_capacity(total);

    for t in 0..q {
        visible.push((0..=t as u32).collect());
    }
    let mut ctx_start = q;
    for &l in &plan.context_lens {
        for t in ctx_start..ctx_start + l {
            let mut v: Vec<u32> = (0..q as u32).collect();
            v.extend(ctx_start as u32..=t as u32);
            visible.push(v);
        }
        ctx_start += l;
    }
    for t in suffix_start..total {
        visible.push((0..=t as u32).collect());
    }
    Ok(BlockMask { visible })
}

/// Position ids matching the mask: question 0.., each context restarts at
/// `question_len`, suffix continues at `question_len + sum(context_lens)`.
pub fn assign_position_ids(plan: &SegmentPlan) -> Result<Vec<u32>> {
    plan.validate()?;
    let q = plan.question_len as u32;
    let mut ids = Vec::with_capacity(plan.total_len());
    ids.extend(0..q);
    for &l in &plan.context_lens {
        ids.extend(q..q + l as u32);
    }
    let suffix_start = plan.suffix_start() as u32;
    ids.extend(suffix_start..suffix_start + plan.suffix_len as u32);
    Ok(ids)
}

/// Position id of the first decoded token when only the kept contexts are
/// loaded: the question length plus the combined kept length.
pub fn inference_suffix_position(question_len: usize, kept_context_lens: &[usize]) -> u32 {
    (question_len + kept_context_lens.iter().sum::<usize>()) as u32
}

/// Closed-form count of visible (token, token) pairs for a plan.
pub fn visible_pair_count(plan: &SegmentPlan) -> usize {
    let q = plan.question_len;
    let mut count = q * (q + 1) / 2;
    for &l in &plan.context_lens {
        count += l * (l + 1) / 2 + q * l;
    }
    let before_suffix = plan.suffix_start();
    for j in 0..plan.suffix_len {
        count += before_suffix + j + 1;
    }
    count
}
