//! Checkpoint directory format: a plain-text manifest describing config and
//! tensor layout, plus one raw little-endian float file. Round-trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::artifact::{read_tensor, write_tensors, Manifest};
use crate::error::{Error, Result};

use super::bundle::{tensor_specs, ModelBundle, Weights};
use super::config::ModelConfig;
use super::scalar::Scalar;

const MANIFEST_FILE: &str = "manifest.txt";
const WEIGHTS_FILE: &str = "weights.bin";

fn config_fields(config: &ModelConfig) -> Vec<(&'static str, u64)> {
    vec![
        ("vocab_size", config.vocab_size as u64),
        ("dim", config.dim as u64),
        ("num_layers", config.num_layers as u64),
        ("num_heads", config.num_heads as u64),
        ("ffn_dim", config.ffn_dim as u64),
        ("max_position", config.max_position as u64),
        ("pad_id", config.pad_id as u64),
        ("eos_id", config.eos_id as u64),
        ("control_assessment_id", config.control_assessment_id as u64),
        ("control_generation_id", config.control_generation_id as u64),
        ("rate_good_id", config.rate_good_id as u64),
        ("rate_bad_id", config.rate_bad_id as u64),
    ]
}

pub fn save_checkpoint<T: Scalar>(model: &ModelBundle<T>, dir: &Path) -> Result<()> {
    model.config.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new("checkpoint", T::DTYPE);
    for (name, value) in config_fields(&model.config) {
        manifest.push_field(name, value);
    }
    let specs = tensor_specs(&model.config);
    let tensors: Vec<(String, Vec<usize>, &[T])> = specs
        .into_iter()
        .zip(model.weights.tensors())
        .map(|((name, shape), data)| (name, shape, data.as_slice()))
        .collect();
    write_tensors(&mut manifest, &dir.join(WEIGHTS_FILE), &tensors)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ModelBundle<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let path_str = manifest_path.display().to_string();
    let manifest = Manifest::parse(&text, &path_str)?;
    let bad = |reason: String| Error::Artifact {
        path: path_str.clone(),
        reason,
    };
    if manifest.kind != "checkpoint" {
        return Err(bad(format!("expected a checkpoint, found {}", manifest.kind)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let config = ModelConfig {
        vocab_size: manifest.parse_field("vocab_size")?,
        dim: manifest.parse_field("dim")?,
        num_layers: manifest.parse_field("num_layers")?,
        num_heads: manifest.parse_field("num_heads")?,
        ffn_dim: manifest.parse_field("ffn_dim")?,
        max_position: manifest.parse_field("max_position")?,
        pad_id: manifest.parse_field("pad_id")?,
        eos_id: manifest.parse_field("eos_id")?,
        control_assessment_id: manifest.parse_field("control_assessment_id")?,
        control_generation_id: manifest.parse_field("control_generation_id")?,
        rate_good_id: manifest.parse_field("rate_good_id")?,
        rate_bad_id: manifest.parse_field("rate_bad_id")?,
    };
    config.validate()?;

    let specs = tensor_specs(&config);
    if manifest.tensors.len() != specs.len() {
        return Err(bad(format!(
            "checkpoint lists {} tensors, config implies {}",
            manifest.tensors.len(),
            specs.len()
        )));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut weights = Weights::<T>::zeros(&config);
    {
        let mut slots = weights.tensors_mut();
        for (i, ((name, shape), entry)) in specs.iter().zip(&manifest.tensors).enumerate() {
            if &entry.name != name || &entry.shape != shape {
                return Err(bad(format!(
                    "tensor {i} should be {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
            }
            *slots[i] = read_tensor(&blob, entry, &path_str)?;
        }
    }
    Ok(ModelBundle { config, weights })
}
