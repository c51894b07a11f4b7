//! Parameter checkpoints: a text manifest followed by raw little-endian
//! f64 payload, bit-exact across save/load.
//!
//! Layout:
//!
//! ```text
//! DNLF1
//! tensor name=<name> shape=<d0,d1,...> offset=<byte offset into payload>
//! ...
//! end
//! <payload: concatenated row-major f64 little-endian data>
//! ```
//!
//! `shape=` of a scalar tensor is the empty string. Offsets are byte
//! positions relative to the first payload byte (the byte after the
//! `end\n` line). Every tensor of the parameter set is saved, trainable
//! weights and state buffers alike, in insertion order.

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "DNLF1";

/// Write all parameter tensors to `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &Params) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);

    writeln!(w, "{MAGIC}").map_err(io)?;
    let mut offset = 0u64;
    for (_, entry) in params.iter() {
        let dims: Vec<String> = entry.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "tensor name={} shape={} offset={}",
            entry.name,
            dims.join(","),
            offset
        )
        .map_err(io)?;
        offset += (entry.value.len() * 8) as u64;
    }
    writeln!(w, "end").map_err(io)?;
    for (_, entry) in params.iter() {
        for v in entry.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint as a name/tensor list in manifest order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let bad = |detail: String| Error::Format {
        what: format!("checkpoint {}", path.display()),
        detail,
    };

    // manifest is ASCII lines up to and including "end\n"
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| bad("manifest is not valid utf-8".into()))?
            .to_string();
        pos += end + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad(format!("bad magic, expected {MAGIC}")));
    }

    let payload = &bytes[pos..];
    let mut out = Vec::new();
    for line in &lines[1..] {
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| bad(format!("unexpected manifest line `{line}`")))?;
        let mut name = None;
        let mut shape = None;
        let mut offset = None;
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("bad manifest field `{field}`")))?;
            match key {
                "name" => name = Some(value.to_string()),
                "shape" => {
                    let dims = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad(format!("bad shape `{value}`")))?
                    };
                    shape = Some(dims);
                }
                "offset" => {
                    offset = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| bad(format!("bad offset `{value}`")))?,
                    )
                }
                other => return Err(bad(format!("unknown manifest field `{other}`"))),
            }
        }
        let name = name.ok_or_else(|| bad("tensor line without name".into()))?;
        let shape = shape.ok_or_else(|| bad("tensor line without shape".into()))?;
        let offset = offset.ok_or_else(|| bad("tensor line without offset".into()))?;
        let count: usize = shape.iter().product();
        let nbytes = count * 8;
        if offset + nbytes > payload.len() {
            return Err(Error::Checkpoint {
                name,
                detail: format!(
                    "payload too short: needs {} bytes at offset {}, payload has {}",
                    nbytes,
                    offset,
                    payload.len()
                ),
            });
        }
        let data: Vec<f64> = payload[offset..offset + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Load a checkpoint into an already-built parameter set. Every checkpoint
/// tensor must match an existing entry by name and shape, and every entry
/// must be covered.
pub fn load_checkpoint(path: impl AsRef<Path>, params: &mut Params) -> Result<()> {
    let tensors = read_checkpoint(path)?;
    let mut seen = vec![false; params.len()];
    for (name, tensor) in tensors {
        let id = params.id(&name).ok_or_else(|| Error::Checkpoint {
            name: name.clone(),
            detail: "not a parameter of this model".into(),
        })?;
        if params.value(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint {
                name,
                detail: format!(
                    "shape mismatch: model has {:?}, checkpoint has {:?}",
                    params.value(id).shape(),
                    tensor.shape()
                ),
            });
        }
        *params.value_mut(id) = tensor;
        seen[id.index()] = true;
    }
    if let Some((_, entry)) = params.iter().find(|(id, _)| !seen[id.index()]) {
        return Err(Error::Checkpoint {
            name: entry.name.clone(),
            detail: "missing from checkpoint".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_params() -> Params {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut p = Params::new();
        p.insert("a.weight", Tensor::randn(&[3, 2], 1.0, &mut rng), true).unwrap();
        p.insert("a.bias", Tensor::randn(&[3], 1.0, &mut rng), true).unwrap();
        p.insert("bn.running_mean", Tensor::randn(&[4], 1.0, &mut rng), false).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlck");
        let params = sample_params();
        save_checkpoint(&path, &params).unwrap();

        let mut restored = sample_params();
        // scramble, then load back
        for (_, name) in [(0, "a.weight"), (1, "a.bias")] {
            let id = restored.id(name).unwrap();
            for v in restored.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        load_checkpoint(&path, &mut restored).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(restored.iter()) {
            assert_eq!(a.value, b.value, "{} not restored bit-exactly", a.name);
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlck");
        save_checkpoint(&path, &sample_params()).unwrap();
        let mut other = Params::new();
        other.insert("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        // checkpoint has tensors this model lacks
        let err = load_checkpoint(&path, &mut other).unwrap_err();
        assert!(err.to_string().contains("not a parameter"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlck");
        save_checkpoint(&path, &sample_params()).unwrap();
        let mut other = Params::new();
        other.insert("a.weight", Tensor::zeros(&[2, 3]), true).unwrap();
        other.insert("a.bias", Tensor::zeros(&[3]), true).unwrap();
        other.insert("bn.running_mean", Tensor::zeros(&[4]), false).unwrap();
        let err = load_checkpoint(&path, &mut other).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }
}
