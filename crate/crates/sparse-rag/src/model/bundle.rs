//! Weight storage, initialization, and tensor enumeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::artifact::Fnv1a;
use crate::error::Result;

use super::config::ModelConfig;
use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    /// Row-major (out, in) projections over the full model dim.
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    pub w1: Vec<T>,
    pub w2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub embed: Vec<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// Untied output projection, row v dotted with the final hidden state
    /// gives the logit for token v.
    pub output: Vec<T>,
}

/// Canonical tensor list for a config: (name, shape), in serialization and
/// optimizer order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.dim;
    let mut specs = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for l in 0..config.num_layers {
        specs.push((format!("layers.{l}.attn_norm"), vec![d]));
        specs.push((format!("layers.{l}.wq"), vec![d, d]));
        specs.push((format!("layers.{l}.wk"), vec![d, d]));
        specs.push((format!("layers.{l}.wv"), vec![d, d]));
        specs.push((format!("layers.{l}.wo"), vec![d, d]));
        specs.push((format!("layers.{l}.ffn_norm"), vec![d]));
        specs.push((format!("layers.{l}.w1"), vec![config.ffn_dim, d]));
        specs.push((format!("layers.{l}.w2"), vec![d, config.ffn_dim]));
    }
    specs.push(("final_norm".to_string(), vec![d]));
    specs.push(("output".to_string(), vec![config.vocab_size, d]));
    specs
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        Weights {
            embed: vec![T::zero(); config.vocab_size * d],
            layers: (0..config.num_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![T::zero(); d],
                    wq: vec![T::zero(); d * d],
                    wk: vec![T::zero(); d * d],
                    wv: vec![T::zero(); d * d],
                    wo: vec![T::zero(); d * d],
                    ffn_norm: vec![T::zero(); d],
                    w1: vec![T::zero(); config.ffn_dim * d],
                    w2: vec![T::zero(); d * config.ffn_dim],
                })
                .collect(),
            final_norm: vec![T::zero(); d],
            output: vec![T::zero(); config.vocab_size * d],
        }
    }

    /// Tensors in canonical order; pairs with `tensor_specs`.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out: Vec<&Vec<T>> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w1,
                &l.w2,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// FNV-1a over dtype and all tensor bit patterns in canonical order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(T::DTYPE.as_bytes());
        for tensor in self.weights.tensors() {
            for v in tensor {
                h.update(&v.to_bits_u64().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Initializes weights from a seeded normal: std 0.02 everywhere except the
/// residual-path projections (attention output, second feed-forward), which
/// are scaled down by sqrt(2 · num_layers) so residual variance stays flat
/// with depth. Norm gains start at one. Deterministic in (config, seed).
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelBundle<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("std is positive");
    let residual = Normal::new(0.0f64, 0.02 / (2.0 * config.num_layers as f64).sqrt())
        .expect("std is positive");

    let mut weights = Weights::zeros(config);
    let fill = |rng: &mut ChaCha8Rng, dist: &Normal<f64>, t: &mut Vec<T>| {
        for v in t.iter_mut() {
            *v = T::from_f64(dist.sample(rng));
        }
    };
    fill(&mut rng, &base, &mut weights.embed);
    for l in &mut weights.layers {
        l.attn_norm.fill(T::one());
        fill(&mut rng, &base, &mut l.wq);
        fill(&mut rng, &base, &mut l.wk);
        fill(&mut rng, &base, &mut l.wv);
        fill(&mut rng, &residual, &mut l.wo);
        l.ffn_norm.fill(T::one());
        fill(&mut rng, &base, &mut l.w1);
        fill(&mut rng, &residual, &mut l.w2);
    }
    weights.final_norm.fill(T::one());
    fill(&mut rng, &base, &mut weights.output);

    Ok(ModelBundle {
        config: config.clone(),
        weights,
    })
}
