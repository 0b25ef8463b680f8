//! Checkpoint and tensor files: a plain-text header followed by a raw
//! little-endian `f64` payload.
//!
//! ```text
//! TOPOTTA-CHECKPOINT\n          magic line (TOPOTTA-TENSOR for tensor files)
//! version 1\n
//! levels 3\n                    key-value lines (checkpoints only)
//! base_channels 8\n
//! seed 7\n
//! tensor param enc0.conv0.weight 8,1,3,3 0\n
//! tensor stat enc0.bn0.running_mean 8 576\n
//! end\n
//! <payload>
//! ```
//!
//! Each `tensor` line gives kind, name, comma-separated shape and the byte
//! offset of its data within the payload. Tensors are stored back to back
//! in directory order, so offsets are the running sums of `8 · len`, and the
//! payload is exactly as long as the last tensor's end.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{ModelMeta, SegModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "TOPOTTA-CHECKPOINT";
pub const TENSOR_MAGIC: &str = "TOPOTTA-TENSOR";
pub const FORMAT_VERSION: u32 = 1;

struct Entry {
    kind: String,
    name: String,
    tensor: Tensor,
}

fn encode(magic: &str, meta: &[(&str, String)], entries: &[Entry]) -> Vec<u8> {
    let mut header = format!("{magic}\nversion {FORMAT_VERSION}\n");
    for (k, v) in meta {
        header.push_str(&format!("{k} {v}\n"));
    }
    let mut offset = 0usize;
    for e in entries {
        let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {} {} {} {offset}\n", e.kind, e.name, shape.join(",")));
        offset += 8 * e.tensor.len();
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for e in entries {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Decoded {
    meta: Vec<(String, String)>,
    entries: Vec<Entry>,
}

fn decode(bytes: &[u8], magic: &str, path: &Path) -> Result<Decoded> {
    let bad = |reason: String| Error::format(path, reason);
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header ends without a newline".into()))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        *pos += end + 1;
        Ok(line.to_string())
    };
    let first = next_line(&mut pos)?;
    if first != magic {
        return Err(bad(format!("expected magic {magic:?}, found {first:?}")));
    }
    let version = next_line(&mut pos)?;
    if version != format!("version {FORMAT_VERSION}") {
        return Err(bad(format!("unsupported version line {version:?}")));
    }
    let mut meta = Vec::new();
    let mut dir: Vec<(String, String, Vec<usize>, usize)> = Vec::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        match fields.as_slice() {
            ["tensor", kind, name, shape, offset] => {
                let shape = shape
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                dir.push((kind.to_string(), name.to_string(), shape, offset));
            }
            [key, value] if dir.is_empty() => meta.push((key.to_string(), value.to_string())),
            _ => return Err(bad(format!("unrecognized header line {line:?}"))),
        }
    }
    let payload = &bytes[pos..];
    let mut expected = 0usize;
    let mut entries = Vec::with_capacity(dir.len());
    for (kind, name, shape, offset) in dir {
        if offset != expected {
            return Err(bad(format!("tensor {name} at offset {offset}, expected {expected}")));
        }
        let len: usize = shape.iter().product();
        let end = offset + 8 * len;
        if end > payload.len() {
            return Err(bad(format!("payload too short for tensor {name}")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push(Entry {
            kind,
            name,
            tensor: Tensor::new(shape, data)?,
        });
        expected = end;
    }
    if expected != payload.len() {
        return Err(bad(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }
    Ok(Decoded { meta, entries })
}

/// A source model plus the seed it was created with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub seed: u64,
}

pub fn encode_checkpoint(model: &SegModel, seed: u64) -> Result<Vec<u8>> {
    if model.router_grid().is_some() {
        return Err(Error::InvalidState("only unwrapped models can be checkpointed".into()));
    }
    let meta = model.meta();
    let entries: Vec<Entry> = model
        .params()
        .iter()
        .map(|(n, t)| ("param", n, t))
        .chain(model.stats().iter().map(|(n, t)| ("stat", n, t)))
        .map(|(kind, name, t)| Entry {
            kind: kind.into(),
            name: name.clone(),
            tensor: t.clone(),
        })
        .collect();
    Ok(encode(
        CHECKPOINT_MAGIC,
        &[
            ("levels", meta.levels.to_string()),
            ("base_channels", meta.base_channels.to_string()),
            ("seed", seed.to_string()),
        ],
        &entries,
    ))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let d = decode(bytes, CHECKPOINT_MAGIC, path)?;
    let get = |key: &str| -> Result<u64> {
        let v = d
            .meta
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::format(path, format!("missing header key {key}")))?;
        v.1.parse()
            .map_err(|_| Error::format(path, format!("bad value for {key}: {:?}", v.1)))
    };
    if let Some((k, _)) = d
        .meta
        .iter()
        .find(|(k, _)| !["levels", "base_channels", "seed"].contains(&k.as_str()))
    {
        return Err(Error::format(path, format!("unknown header key {k}")));
    }
    let meta = ModelMeta {
        levels: get("levels")? as usize,
        base_channels: get("base_channels")? as usize,
    };
    meta.validate()?;
    let seed = get("seed")?;
    let mut params = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for e in d.entries {
        let target = match e.kind.as_str() {
            "param" => &mut params,
            "stat" => &mut stats,
            other => return Err(Error::format(path, format!("unknown tensor kind {other:?}"))),
        };
        if target.insert(e.name.clone(), e.tensor).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Checkpoint {
        model: SegModel::from_parts(meta, params, stats)?,
        seed,
    })
}

pub fn save_checkpoint(path: &Path, model: &SegModel, seed: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, seed)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// A single named tensor in the same container scheme.
pub fn encode_tensor(name: &str, t: &Tensor) -> Result<Vec<u8>> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(crate::error::invalid_arg!("tensor name must be a non-empty word, got {name:?}"));
    }
    Ok(encode(
        TENSOR_MAGIC,
        &[],
        &[Entry {
            kind: "data".into(),
            name: name.into(),
            tensor: t.clone(),
        }],
    ))
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(String, Tensor)> {
    let d = decode(bytes, TENSOR_MAGIC, path)?;
    if !d.meta.is_empty() {
        return Err(Error::format(path, "tensor files carry no header keys"));
    }
    let mut entries = d.entries;
    if entries.len() != 1 || entries[0].kind != "data" {
        return Err(Error::format(path, "expected exactly one data tensor"));
    }
    let e = entries.pop().expect("one entry");
    Ok((e.name, e.tensor))
}

pub fn save_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(name, t)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<(String, Tensor)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
