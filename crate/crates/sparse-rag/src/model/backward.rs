//! Exact backward pass for training. Mirrors the forward body stage by
//! stage in reverse, consuming the recorded activation tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::bundle::{ModelBundle, Weights};
use super::forward::{run, DropoutDraw, ForwardRequest, Visibility, ROPE_BASE};
use super::math;
use super::scalar::Scalar;

/// Inverted dropout on attention probabilities and feed-forward activations.
/// Owned by the trainer; inference never drops.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

/// Mean cross-entropy over masked rows and gradients for every weight.
/// `target_mask[p]` marks logit rows that predict; `target_ids[p]` is the
/// token row p must predict. Requires an empty cache view: gradients cannot
/// flow into prefilled keys/values, so conditioning on a cache would silently
/// drop terms.
pub fn backward<T: Scalar>(
    model: &ModelBundle<T>,
    req: &ForwardRequest<T>,
    target_ids: &[u32],
    target_mask: &[bool],
    dropout: Option<Dropout>,
) -> Result<(T, Weights<T>)> {
    let config = &model.config;
    if !req.cache.is_empty() {
        return Err(Error::Train("backward requires an empty cache view".into()));
    }
    let n = req.tokens.len();
    if target_ids.len() != n || target_mask.len() != n {
        return Err(Error::Shape(format!(
            "targets/mask must cover all {n} tokens"
        )));
    }
    let masked: Vec<usize> = (0..n).filter(|&t| target_mask[t]).collect();
    if masked.is_empty() {
        return Err(Error::Train("target mask marks no positions".into()));
    }
    for &t in &masked {
        if target_ids[t] as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: target_ids[t],
                vocab: config.vocab_size,
            });
        }
    }
    if let Some(d) = dropout {
        if !(0.0..1.0).contains(&d.rate) {
            return Err(Error::Train(format!("dropout rate {} not in [0, 1)", d.rate)));
        }
    }

    let mut tape = Vec::with_capacity(config.num_layers);
    let mut draw = dropout.map(|d| DropoutDraw {
        rate: d.rate,
        rng: ChaCha8Rng::seed_from_u64(d.seed),
    });
    let result = run(model, req, Some(&mut tape), draw.as_mut())?;

    let (d, heads, hd, f, vocab) = (
        config.dim,
        config.num_heads,
        config.head_dim(),
        config.ffn_dim,
        config.vocab_size,
    );
    let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
    let scale = T::from_f64(1.0 / masked.len() as f64);
    let logits = &result.output.logits;

    let mut loss = T::zero();
    let mut grads = Weights::zeros(config);
    let mut d_final_normed = vec![T::zero(); n * d];
    let mut row_probs = vec![T::zero(); vocab];
    for &t in &masked {
        let row = &logits[t * vocab..][..vocab];
        let target = target_ids[t] as usize;
        loss -= math::log_softmax_at(row, target);
        row_probs.copy_from_slice(row);
        math::softmax_inplace(&mut row_probs);
        row_probs[target] -= T::one();
        for p in row_probs.iter_mut() {
            *p *= scale;
        }
        math::outer_acc(
            &mut grads.output,
            &row_probs,
            &result.final_normed[t * d..][..d],
        );
        math::matvec_t_acc(
            &model.weights.output,
            &row_probs,
            &mut d_final_normed[t * d..][..d],
        );
    }
    loss *= scale;

    let mut dx = vec![T::zero(); n * d];
    for t in 0..n {
        math::rms_norm_backward(
            &result.x_last[t * d..][..d],
            &model.weights.final_norm,
            result.r_final[t],
            &d_final_normed[t * d..][..d],
            &mut dx[t * d..][..d],
            &mut grads.final_norm,
        );
    }

    for l in (0..config.num_layers).rev() {
        let w = &model.weights.layers[l];
        let gw = &mut grads.layers[l];
        let lt = &tape[l];
        let kv = &result.output.kv.layers[l];
        let drop_scale = dropout
            .map(|dr| T::from_f64(1.0 / (1.0 - dr.rate)))
            .unwrap_or_else(T::one);

        // Feed-forward block: x = x_mid + w2·drop(silu(w1·norm(x_mid))).
        let mut d_x_mid = vec![T::zero(); n * d];
        let mut dh = vec![T::zero(); f];
        let mut d_normed2 = vec![T::zero(); d];
        for t in 0..n {
            let dxr = &dx[t * d..][..d];
            math::outer_acc(&mut gw.w2, dxr, &lt.h_post[t * f..][..f]);
            dh.fill(T::zero());
            math::matvec_t_acc(&w.w2, dxr, &mut dh);
            for j in 0..f {
                let kept = lt.ffn_keep.is_empty() || lt.ffn_keep[t * f + j];
                let c = if kept { drop_scale } else { T::zero() };
                dh[j] = dh[j] * c * math::silu_prime(lt.h_pre[t * f + j]);
            }
            math::outer_acc(&mut gw.w1, &dh, &lt.normed2[t * d..][..d]);
            d_normed2.fill(T::zero());
            math::matvec_t_acc(&w.w1, &dh, &mut d_normed2);
            d_x_mid[t * d..][..d].copy_from_slice(dxr);
            math::rms_norm_backward(
                &lt.x_mid[t * d..][..d],
                &w.ffn_norm,
                lt.r_ffn[t],
                &d_normed2,
                &mut d_x_mid[t * d..][..d],
                &mut gw.ffn_norm,
            );
        }

        // Attention block: x_mid = x_in + wo·merged.
        let mut d_merged = vec![T::zero(); n * d];
        for t in 0..n {
            math::outer_acc(&mut gw.wo, &d_x_mid[t * d..][..d], &lt.merged[t * d..][..d]);
            math::matvec_t_acc(&w.wo, &d_x_mid[t * d..][..d], &mut d_merged[t * d..][..d]);
        }

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut da: Vec<T> = Vec::new();
        for t in 0..n {
            let visible: Vec<u32> = match req.visibility {
                Visibility::Causal => (0..=t as u32).collect(),
                Visibility::Blocked(mask) => mask.visible(t).to_vec(),
            };
            for h in 0..heads {
                let probs = &lt.probs[t * heads + h];
                let keep = &lt.attn_keep[t * heads + h];
                let dout = &d_merged[t * d + h * hd..][..hd];
                da.clear();
                for (i, &s) in visible.iter().enumerate() {
                    let s = s as usize;
                    let c = if keep.is_empty() || keep[i] {
                        drop_scale
                    } else {
                        T::zero()
                    };
                    let a_eff = probs[i] * c;
                    for (dvv, o) in dv[s * d + h * hd..][..hd].iter_mut().zip(dout) {
                        *dvv += a_eff * *o;
                    }
                    da.push(math::dot(dout, &kv.v[s * d + h * hd..][..hd]) * c);
                }
                let mut inner = T::zero();
                for (a, g) in probs.iter().zip(&da) {
                    inner += *a * *g;
                }
                let qrow = &lt.q_rot[t * d + h * hd..][..hd];
                for (i, &s) in visible.iter().enumerate() {
                    let s = s as usize;
                    let ds = probs[i] * (da[i] - inner) * inv_sqrt;
                    for (dqv, kval) in dq[t * d + h * hd..][..hd]
                        .iter_mut()
                        .zip(&kv.k[s * d + h * hd..][..hd])
                    {
                        *dqv += ds * *kval;
                    }
                    for (dkv, qval) in dk[s * d + h * hd..][..hd].iter_mut().zip(qrow) {
                        *dkv += ds * *qval;
                    }
                }
            }
        }

        // Rotation is orthogonal per position: pull gradients back with the
        // inverse rotation, then through the projections.
        let mut d_normed = vec![T::zero(); n * d];
        for t in 0..n {
            for h in 0..heads {
                math::rotate_head(&mut dq[t * d + h * hd..][..hd], req.positions[t], ROPE_BASE, -1.0);
                math::rotate_head(&mut dk[t * d + h * hd..][..hd], req.positions[t], ROPE_BASE, -1.0);
            }
            let normed_row = &lt.normed[t * d..][..d];
            math::outer_acc(&mut gw.wq, &dq[t * d..][..d], normed_row);
            math::outer_acc(&mut gw.wk, &dk[t * d..][..d], normed_row);
            math::outer_acc(&mut gw.wv, &dv[t * d..][..d], normed_row);
            math::matvec_t_acc(&w.wq, &dq[t * d..][..d], &mut d_normed[t * d..][..d]);
            math::matvec_t_acc(&w.wk, &dk[t * d..][..d], &mut d_normed[t * d..][..d]);
            math::matvec_t_acc(&w.wv, &dv[t * d..][..d], &mut d_normed[t * d..][..d]);
        }

        let mut dx_prev = vec![T::zero(); n * d];
        for t in 0..n {
            dx_prev[t * d..][..d].copy_from_slice(&d_x_mid[t * d..][..d]);
            math::rms_norm_backward(
                &lt.x_in[t * d..][..d],
                &w.attn_norm,
                lt.r_attn[t],
                &d_normed[t * d..][..d],
                &mut dx_prev[t * d..][..d],
                &mut gw.attn_norm,
            );
        }
        dx = dx_prev;
    }

    for (t, &tok) in req.tokens.iter().enumerate() {
        let row = &mut grads.embed[tok as usize * d..][..d];
        for (g, v) in row.iter_mut().zip(&dx[t * d..][..d]) {
            *g += *v;
        }
    }

    Ok((loss, grads))
}
