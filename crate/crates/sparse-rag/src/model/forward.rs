//! Forward pass: pre-norm blocks, rotary queries/keys driven by explicit
//! per-token position ids, block visibility, and a segmented KV read path.
//!
//! Cached tokens are always fully visible to new tokens; the visibility rule
//! constrains new-to-new attention only. Keys are cached post-rotation, so a
//! segment's KV depends only on its own tokens, its positions, and whatever
//! cache it attended to — never on sibling segments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::BlockMask;

use super::bundle::ModelBundle;
use super::math;
use super::scalar::Scalar;

pub const ROPE_BASE: f64 = 10_000.0;

/// Keys/values for one layer over a run of tokens, rows `[token][head][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Per-layer KV for a run of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenKv<T> {
    pub layers: Vec<LayerKv<T>>,
    pub tokens: usize,
}

impl<T: Scalar> TokenKv<T> {
    pub fn empty(num_layers: usize) -> Self {
        TokenKv {
            layers: (0..num_layers)
                .map(|_| LayerKv {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            tokens: 0,
        }
    }

    /// Appends another run's rows; layer counts must match.
    pub fn append(&mut self, other: &TokenKv<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "cannot append kv with {} layers to kv with {}",
                other.layers.len(),
                self.layers.len()
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.k.extend_from_slice(&src.k);
            dst.v.extend_from_slice(&src.v);
        }
        self.tokens += other.tokens;
        Ok(())
    }
}

/// Visibility of new tokens among themselves (the cache is always visible).
#[derive(Debug, Clone, Copy)]
pub enum Visibility<'a> {
    /// Token t sees all cache tokens and new tokens 0..=t.
    Causal,
    /// Explicit per-token visible sets over the new span.
    Blocked(&'a BlockMask),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardRequest<'a, T> {
    pub tokens: &'a [u32],
    pub positions: &'a [u32],
    pub cache: &'a [&'a TokenKv<T>],
    pub visibility: Visibility<'a>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row t holds next-token logits after consuming new token t (len × vocab).
    pub logits: Vec<T>,
    pub kv: TokenKv<T>,
}

/// Activations recorded for the backward pass.
pub(crate) struct LayerTape<T> {
    pub x_in: Vec<T>,
    pub normed: Vec<T>,
    pub r_attn: Vec<T>,
    pub q_rot: Vec<T>,
    /// Pre-dropout attention probabilities, indexed `t * heads + h`.
    pub probs: Vec<Vec<T>>,
    /// Dropout keep masks per probability; empty when dropout is off.
    pub attn_keep: Vec<Vec<bool>>,
    pub merged: Vec<T>,
    pub x_mid: Vec<T>,
    pub normed2: Vec<T>,
    pub r_ffn: Vec<T>,
    pub h_pre: Vec<T>,
    /// Post-activation, post-dropout hidden state (what w2 consumed).
    pub h_post: Vec<T>,
    /// Dropout keep mask for h; empty when dropout is off.
    pub ffn_keep: Vec<bool>,
}

pub(crate) struct DropoutDraw {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn validate<T: Scalar>(model: &ModelBundle<T>, req: &ForwardRequest<T>) -> Result<()> {
    let config = &model.config;
    if req.tokens.is_empty() {
        return Err(Error::EmptyInput("forward needs at least one token".into()));
    }
    if req.tokens.len() != req.positions.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} positions",
            req.tokens.len(),
            req.positions.len()
        )));
    }
    for &t in req.tokens {
        if t as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    for &p in req.positions {
        if p >= config.max_position {
            return Err(Error::PositionOverflow {
                position: p,
                max_position: config.max_position,
            });
        }
    }
    if let Visibility::Blocked(mask) = req.visibility {
        if mask.len() != req.tokens.len() {
            return Err(Error::Shape(format!(
                "mask covers {} tokens but input has {}",
                mask.len(),
                req.tokens.len()
            )));
        }
    }
    let kv_row = config.dim;
    for seg in req.cache {
        if seg.layers.len() != config.num_layers {
            return Err(Error::Shape(format!(
                "cache segment has {} layers, model has {}",
                seg.layers.len(),
                config.num_layers
            )));
        }
        for layer in &seg.layers {
            if layer.k.len() != seg.tokens * kv_row || layer.v.len() != seg.tokens * kv_row {
                return Err(Error::Shape("cache segment kv rows are malformed".into()));
            }
        }
    }
    Ok(())
}

/// Full result of one forward body run; the extra activations feed backward.
pub(crate) struct RunResult<T> {
    pub output: ForwardOutput<T>,
    pub x_last: Vec<T>,
    pub final_normed: Vec<T>,
    pub r_final: Vec<T>,
}

/// Shared forward body. `tape`/`dropout` are engaged only by the trainer.
pub(crate) fn run<T: Scalar>(
    model: &ModelBundle<T>,
    req: &ForwardRequest<T>,
    mut tape: Option<&mut Vec<LayerTape<T>>>,
    mut dropout: Option<&mut DropoutDraw>,
) -> Result<RunResult<T>> {
    validate(model, req)?;
    let config = &model.config;
    let (n, d) = (req.tokens.len(), config.dim);
    let (heads, hd) = (config.num_heads, config.head_dim());
    let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = vec![T::zero(); n * d];
    for (t, &tok) in req.tokens.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(&model.weights.embed[tok as usize * d..][..d]);
    }

    let mut out_kv = TokenKv::empty(config.num_layers);
    let mut scores: Vec<T> = Vec::new();

    for (l, w) in model.weights.layers.iter().enumerate() {
        let mut normed = vec![T::zero(); n * d];
        let mut r_attn = vec![T::zero(); n];
        for t in 0..n {
            r_attn[t] = math::rms_norm(&x[t * d..][..d], &w.attn_norm, &mut normed[t * d..][..d]);
        }

        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        for t in 0..n {
            let row = &normed[t * d..][..d];
            math::matvec(&w.wq, row, &mut q[t * d..][..d]);
            math::matvec(&w.wk, row, &mut k[t * d..][..d]);
            math::matvec(&w.wv, row, &mut v[t * d..][..d]);
            for h in 0..heads {
                math::rotate_head(&mut q[t * d + h * hd..][..hd], req.positions[t], ROPE_BASE, 1.0);
                math::rotate_head(&mut k[t * d + h * hd..][..hd], req.positions[t], ROPE_BASE, 1.0);
            }
        }

        let mut probs_tape = Vec::new();
        let mut keep_tape = Vec::new();
        let mut merged = vec![T::zero(); n * d];
        for t in 0..n {
            let visible_new: &[u32];
            let causal_range: Vec<u32>;
            match req.visibility {
                Visibility::Causal => {
                    causal_range = (0..=t as u32).collect();
                    visible_new = &causal_range;
                }
                Visibility::Blocked(mask) => visible_new = mask.visible(t),
            }
            for h in 0..heads {
                let qrow = &q[t * d + h * hd..][..hd];
                scores.clear();
                for seg in req.cache {
                    let lk = &seg.layers[l].k;
                    for s in 0..seg.tokens {
                        scores.push(math::dot(qrow, &lk[s * d + h * hd..][..hd]) * inv_sqrt);
                    }
                }
                for &s in visible_new {
                    scores.push(math::dot(qrow, &k[s as usize * d + h * hd..][..hd]) * inv_sqrt);
                }
                math::softmax_inplace(&mut scores);
                if tape.is_some() {
                    probs_tape.push(scores.clone());
                }
                let keep = if let Some(drop) = dropout.as_deref_mut() {
                    let scale = T::from_f64(1.0 / (1.0 - drop.rate));
                    let keep: Vec<bool> = scores
                        .iter_mut()
                        .map(|p| {
                            let kept = drop.rng.random::<f64>() >= drop.rate;
                            *p = if kept { *p * scale } else { T::zero() };
                            kept
                        })
                        .collect();
                    Some(keep)
                } else {
                    None
                };
                if tape.is_some() {
                    keep_tape.push(keep.unwrap_or_default());
                }

                let out = &mut merged[t * d + h * hd..][..hd];
                let mut idx = 0;
                for seg in req.cache {
                    let lv = &seg.layers[l].v;
                    for s in 0..seg.tokens {
                        let a = scores[idx];
                        idx += 1;
                        for (o, vv) in out.iter_mut().zip(&lv[s * d + h * hd..][..hd]) {
                            *o += a * *vv;
                        }
                    }
                }
                for &s in visible_new {
                    let a = scores[idx];
                    idx += 1;
                    for (o, vv) in out.iter_mut().zip(&v[s as usize * d + h * hd..][..hd]) {
                        *o += a * *vv;
                    }
                }
            }
        }

        let mut x_mid = vec![T::zero(); n * d];
        let mut attn_out = vec![T::zero(); d];
        for t in 0..n {
            math::matvec(&w.wo, &merged[t * d..][..d], &mut attn_out);
            for i in 0..d {
                x_mid[t * d + i] = x[t * d + i] + attn_out[i];
            }
        }

        let mut normed2 = vec![T::zero(); n * d];
        let mut r_ffn = vec![T::zero(); n];
        for t in 0..n {
            r_ffn[t] = math::rms_norm(&x_mid[t * d..][..d], &w.ffn_norm, &mut normed2[t * d..][..d]);
        }
        let f = config.ffn_dim;
        let mut h_pre = vec![T::zero(); n * f];
        let mut h_post = vec![T::zero(); n * f];
        let mut ffn_keep = Vec::new();
        for t in 0..n {
            math::matvec(&w.w1, &normed2[t * d..][..d], &mut h_pre[t * f..][..f]);
            for j in 0..f {
                h_post[t * f + j] = math::silu(h_pre[t * f + j]);
            }
        }
        if let Some(drop) = dropout.as_deref_mut() {
            let scale = T::from_f64(1.0 / (1.0 - drop.rate));
            ffn_keep = h_post
                .iter_mut()
                .map(|hv| {
                    let kept = drop.rng.random::<f64>() >= drop.rate;
                    *hv = if kept { *hv * scale } else { T::zero() };
                    kept
                })
                .collect();
        }
        let mut x_next = vec![T::zero(); n * d];
        let mut ffn_out = vec![T::zero(); d];
        for t in 0..n {
            math::matvec(&w.w2, &h_post[t * f..][..f], &mut ffn_out);
            for i in 0..d {
                x_next[t * d + i] = x_mid[t * d + i] + ffn_out[i];
            }
        }

        out_kv.layers[l] = LayerKv { k, v };
        out_kv.tokens = n;
        if let Some(tape) = tape.as_deref_mut() {
            tape.push(LayerTape {
                x_in: std::mem::take(&mut x),
                normed,
                r_attn,
                q_rot: q,
                probs: probs_tape,
                attn_keep: keep_tape,
                merged,
                x_mid,
                normed2,
                r_ffn,
                h_pre,
                h_post,
                ffn_keep,
            });
        }
        x = x_next;
    }

    let mut final_normed = vec![T::zero(); n * d];
    let mut r_final = vec![T::zero(); n];
    for t in 0..n {
        r_final[t] = math::rms_norm(
            &x[t * d..][..d],
            &model.weights.final_norm,
            &mut final_normed[t * d..][..d],
        );
    }
    let vocab = config.vocab_size;
    let mut logits = vec![T::zero(); n * vocab];
    for t in 0..n {
        math::matvec(
            &model.weights.output,
            &final_normed[t * d..][..d],
            &mut logits[t * vocab..][..vocab],
        );
    }

    Ok(RunResult {
        output: ForwardOutput {
            logits,
            kv: out_kv,
        },
        x_last: x,
        final_normed,
        r_final,
    })
}

/// Runs the model over new tokens against an optional segmented cache.
/// Pure: neither the model nor the cache is mutated.
pub fn forward<T: Scalar>(
    model: &ModelBundle<T>,
    req: &ForwardRequest<T>,
) -> Result<ForwardOutput<T>> {
    run(model, req, None, None).map(|r| r.output)
}

/// Log-probability of each continuation token given the cache, conditioning
/// each token on all earlier ones. The first token is scored against
/// `prefix_end_logits`, the next-token logits recorded when the prefix's
/// final segment was prefilled.
pub fn logprob_of_continuation<T: Scalar>(
    model: &ModelBundle<T>,
    cache: &[&TokenKv<T>],
    prefix_end_logits: &[T],
    tokens: &[u32],
    positions: &[u32],
) -> Result<Vec<T>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("continuation is empty".into()));
    }
    if prefix_end_logits.len() != model.config.vocab_size {
        return Err(Error::Shape(format!(
            "prefix logits have {} entries, vocab is {}",
            prefix_end_logits.len(),
            model.config.vocab_size
        )));
    }
    for &t in tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: model.config.vocab_size,
            });
        }
    }
    let mut out = Vec::with_capacity(tokens.len());
    out.push(math::log_softmax_at(prefix_end_logits, tokens[0] as usize));
    if tokens.len() > 1 {
        let fwd = forward(
            model,
            &ForwardRequest {
                tokens,
                positions,
                cache,
                visibility: Visibility::Causal,
            },
        )?;
        let vocab = model.config.vocab_size;
        for (i, &tok) in tokens.iter().enumerate().skip(1) {
            let row = &fwd.logits[(i - 1) * vocab..][..vocab];
            out.push(math::log_softmax_at(row, tok as usize));
        }
    }
    Ok(out)
}
