//! Shared helpers for unit tests, including an independent full-recompute
//! reference for the forward pass. The reference deliberately takes a
//! different route from the production code: it materializes the full score
//! matrix, masks invisible pairs with -inf, and never touches the KV path.

use crate::layout::BlockMask;
use crate::model::bundle::{init_model, ModelBundle};
use crate::model::config::ModelConfig;
use crate::model::forward::ROPE_BASE;
use crate::model::scalar::Scalar;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        max_position: 256,
        pad_id: 0,
        eos_id: 1,
        control_assessment_id: 2,
        control_generation_id: 3,
        rate_good_id: 4,
        rate_bad_id: 5,
    }
}

pub(crate) fn tiny_model(seed: u64) -> ModelBundle<f32> {
    init_model(&tiny_config(), seed).unwrap()
}

/// Largest relative difference between two slices, floored to avoid noise
/// around zero.
pub(crate) fn max_rel_err<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Reference forward: plain loops, full masked score matrix, no cache.
/// Returns next-token logits, row-major (len × vocab).
pub(crate) fn naive_forward<T: Scalar>(
    model: &ModelBundle<T>,
    tokens: &[u32],
    positions: &[u32],
    mask: &BlockMask,
) -> Vec<T> {
    let c = &model.config;
    let (n, d, heads) = (tokens.len(), c.dim, c.num_heads);
    let hd = d / heads;
    let eps = T::from_f64(1e-5);

    let rms_norm = |x: &[T], g: &[T]| -> Vec<T> {
        let mut sq = T::zero();
        for v in x {
            sq += *v * *v;
        }
        let r = (sq / T::from_f64(d as f64) + eps).sqrt().recip();
        x.iter().zip(g).map(|(v, gv)| *v * *gv * r).collect()
    };
    let matmul = |w: &[T], x: &[T], rows: usize| -> Vec<T> {
        let cols = x.len();
        (0..rows)
            .map(|o| {
                let mut acc = T::zero();
                for i in 0..cols {
                    acc += w[o * cols + i] * x[i];
                }
                acc
            })
            .collect()
    };
    let rotate = |row: &mut [T], pos: u32| {
        let half = hd / 2;
        for j in 0..half {
            let angle = pos as f64 * ROPE_BASE.powf(-2.0 * j as f64 / hd as f64);
            let (s, co) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
            let (a, b) = (row[j], row[j + half]);
            row[j] = a * co - b * s;
            row[j + half] = a * s + b * co;
        }
    };

    let mut xs: Vec<Vec<T>> = tokens
        .iter()
        .map(|&t| model.weights.embed[t as usize * d..][..d].to_vec())
        .collect();

    for w in &model.weights.layers {
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for t in 0..n {
            let normed = rms_norm(&xs[t], &w.attn_norm);
            let mut q = matmul(&w.wq, &normed, d);
            let mut k = matmul(&w.wk, &normed, d);
            let v = matmul(&w.wv, &normed, d);
            for h in 0..heads {
                rotate(&mut q[h * hd..(h + 1) * hd], positions[t]);
                rotate(&mut k[h * hd..(h + 1) * hd], positions[t]);
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        for t in 0..n {
            let mut merged = vec![T::zero(); d];
            for h in 0..heads {
                // Full score row with -inf outside the visible set.
                let mut row = vec![T::from_f64(f64::NEG_INFINITY); n];
                for s in 0..n {
                    if mask.is_visible(t, s) {
                        let mut acc = T::zero();
                        for j in 0..hd {
                            acc += qs[t][h * hd + j] * ks[s][h * hd + j];
                        }
                        row[s] = acc / T::from_f64((hd as f64).sqrt());
                    }
                }
                let mut mx = row[0];
                for v in &row {
                    if *v > mx {
                        mx = *v;
                    }
                }
                let exps: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
                let mut sum = T::zero();
                for e in &exps {
                    sum += *e;
                }
                for s in 0..n {
                    let a = exps[s] / sum;
                    for j in 0..hd {
                        merged[h * hd + j] += a * vs[s][h * hd + j];
                    }
                }
            }
            let attn_out = matmul(&w.wo, &merged, d);
            for i in 0..d {
                xs[t][i] += attn_out[i];
            }
        }
        for t in 0..n {
            let normed = rms_norm(&xs[t], &w.ffn_norm);
            let h_pre = matmul(&w.w1, &normed, model.config.ffn_dim);
            let h_act: Vec<T> = h_pre
                .iter()
                .map(|v| *v / (T::one() + (-*v).exp()))
                .collect();
            let out = matmul(&w.w2, &h_act, d);
            for i in 0..d {
                xs[t][i] += out[i];
            }
        }
    }

    let mut logits = Vec::with_capacity(n * c.vocab_size);
    for t in 0..n {
        let normed = rms_norm(&xs[t], &model.weights.final_norm);
        logits.extend(matmul(&model.weights.output, &normed, c.vocab_size));
    }
    logits
}

/// log P(token sequence) under the reference forward for a plain causal
/// prefix ⊕ continuation, scoring only the continuation tokens.
pub(crate) fn naive_continuation_logprob<T: Scalar>(
    model: &ModelBundle<T>,
    prefix: &[u32],
    continuation: &[u32],
) -> f64 {
    let all: Vec<u32> = prefix.iter().chain(continuation).copied().collect();
    let positions: Vec<u32> = (0..all.len() as u32).collect();
    let mask = BlockMask::causal(all.len());
    let logits = naive_forward(model, &all, &positions, &mask);
    let vocab = model.config.vocab_size;
    let mut total = 0.0;
    for (i, &tok) in continuation.iter().enumerate() {
        let row = &logits[(prefix.len() + i - 1) * vocab..][..vocab];
        let mx = row.iter().map(|&v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&v| (v.to_f64() - mx).exp()).sum::<f64>().ln() + mx;
        total += row[tok as usize].to_f64() - lse;
    }
    total
}
