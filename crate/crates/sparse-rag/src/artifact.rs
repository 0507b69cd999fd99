//! Plain-text manifest plus raw little-endian float storage, shared by model
//! checkpoints and KV cache dumps.
//!
//! Manifest grammar, one record per line:
//!
//! ```text
//! format <kind> v1
//! dtype <f32|f64>
//! field <name> <value, may contain spaces>
//! tensor <name> <dim>... @ <byte offset> <element count>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::scalar::Scalar;

/// Streaming FNV-1a (64-bit): stable across runs and platforms.
pub struct Fnv1a {
    state: u64,
}

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a {
            state: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.state ^= *b as u64;
            self.state = self.state.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub kind: String,
    pub dtype: String,
    pub fields: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: &str, dtype: &str) -> Self {
        Manifest {
            kind: kind.to_string(),
            dtype: dtype.to_string(),
            fields: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_field(&mut self, name: &str, value: impl ToString) {
        self.fields.push((name.to_string(), value.to_string()));
    }

    pub fn field(&self, name: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Artifact {
                path: String::new(),
                reason: format!("missing field {name}"),
            })
    }

    pub fn parse_field<F: std::str::FromStr>(&self, name: &str) -> Result<F> {
        self.field(name)?.parse().map_err(|_| Error::Artifact {
            path: String::new(),
            reason: format!("field {name} is not a valid number"),
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("format {} v1\ndtype {}\n", self.kind, self.dtype);
        for (name, value) in &self.fields {
            out.push_str(&format!("field {name} {value}\n"));
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "tensor {} {} @ {} {}\n",
                t.name,
                dims.join(" "),
                t.byte_offset,
                t.elements
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let bad = |reason: String| Error::Artifact {
            path: path.to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some("format") {
            return Err(bad("first line must be `format <kind> v1`".into()));
        }
        let kind = hp
            .next()
            .ok_or_else(|| bad("format line missing kind".into()))?
            .to_string();
        if hp.next() != Some("v1") {
            return Err(bad("unsupported manifest version".into()));
        }
        let dtype_line = lines.next().ok_or_else(|| bad("missing dtype line".into()))?;
        let dtype = dtype_line
            .strip_prefix("dtype ")
            .ok_or_else(|| bad("second line must be `dtype <d>`".into()))?
            .to_string();

        let mut manifest = Manifest::new(&kind, &dtype);
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("field ") {
                let (name, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed field line: {line}")))?;
                manifest.push_field(name, value);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (spec, loc) = rest
                    .split_once(" @ ")
                    .ok_or_else(|| bad(format!("malformed tensor line: {line}")))?;
                let mut spec_parts = spec.split_whitespace();
                let name = spec_parts
                    .next()
                    .ok_or_else(|| bad("tensor line missing name".into()))?
                    .to_string();
                let shape: Vec<usize> = spec_parts
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dim in: {line}"))))
                    .collect::<Result<_>>()?;
                let mut loc_parts = loc.split_whitespace();
                let byte_offset = loc_parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("bad offset in: {line}")))?;
                let elements = loc_parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("bad element count in: {line}")))?;
                if shape.iter().product::<usize>() != elements {
                    return Err(bad(format!("shape/count mismatch in: {line}")));
                }
                manifest.tensors.push(TensorEntry {
                    name,
                    shape,
                    byte_offset,
                    elements,
                });
            } else {
                return Err(bad(format!("unrecognized line: {line}")));
            }
        }
        Ok(manifest)
    }
}

/// Writes tensors to `data_path` in order, appending entries to `manifest`.
pub fn write_tensors<T: Scalar>(
    manifest: &mut Manifest,
    data_path: &Path,
    tensors: &[(String, Vec<usize>, &[T])],
) -> Result<()> {
    let mut bytes = Vec::new();
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name} has {} elements but shape {:?}",
                data.len(),
                shape
            )));
        }
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            byte_offset: bytes.len(),
            elements: data.len(),
        });
        for v in *data {
            v.write_le(&mut bytes);
        }
    }
    fs::write(data_path, bytes)?;
    Ok(())
}

/// Reads one tensor's elements from the raw data blob.
pub fn read_tensor<T: Scalar>(blob: &[u8], entry: &TensorEntry, path: &str) -> Result<Vec<T>> {
    let start = entry.byte_offset;
    let end = start + entry.elements * T::BYTES;
    if end > blob.len() {
        return Err(Error::Artifact {
            path: path.to_string(),
            reason: format!(
                "tensor {} needs bytes {start}..{end} but data holds {}",
                entry.name,
                blob.len()
            ),
        });
    }
    Ok(blob[start..end]
        .chunks_exact(T::BYTES)
        .map(T::read_le)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let mut m = Manifest::new("checkpoint", "f32");
        m.push_field("dim", 8usize);
        m.push_field("note", "two words");
        m.tensors.push(TensorEntry {
            name: "embed".into(),
            shape: vec![4, 8],
            byte_offset: 0,
            elements: 32,
        });
        let parsed = Manifest::parse(&m.render(), "test").unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.field("note").unwrap(), "two words");
    }

    #[test]
    fn malformed_manifests_rejected() {
        assert!(Manifest::parse("", "t").is_err());
        assert!(Manifest::parse("format x v2\ndtype f32\n", "t").is_err());
        assert!(Manifest::parse("format x v1\ndtype f32\ntensor a 2 2 @ 0 5\n", "t").is_err());
        assert!(Manifest::parse("format x v1\ndtype f32\nbogus line\n", "t").is_err());
    }

    #[test]
    fn tensor_bytes_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let data = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7];
        let mut m = Manifest::new("test", "f32");
        write_tensors(&mut m, &path, &[("t".into(), vec![4], data.as_slice())]).unwrap();
        let blob = std::fs::read(&path).unwrap();
        let back: Vec<f32> = read_tensor(&blob, &m.tensors[0], "t").unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let entry = TensorEntry {
            name: "t".into(),
            shape: vec![4],
            byte_offset: 0,
            elements: 4,
        };
        assert!(read_tensor::<f32>(&[0u8; 8], &entry, "t").is_err());
    }

    #[test]
    fn fnv_is_stable() {
        // Reference value for "hello" under 64-bit FNV-1a.
        assert_eq!(fnv1a(b"hello"), 0xa430d84680aabd0b);
    }
}
