//! Single-file checkpoint: a line-oriented text header followed by a
//! little-endian `f32` payload.
//!
//! ```text
//! MMAVE-CHECKPOINT 1
//! config-hash <sha256 of the config line>
//! config <json>
//! scheme <json>
//! vocab <json>
//! tensor <name> <d0>x<d1> <offset> <len>
//! ...
//! payload
//! <bytes>
//! ```
//!
//! Offsets and lengths count `f32` elements from the start of the payload.
//! Tensors of the separate value-task parameter set carry a `value:` prefix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AblationConfig, Model, ModelConfig};
use crate::dataio::{TagScheme, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

const MAGIC: &str = "MMAVE-CHECKPOINT 1";
const VALUE_PREFIX: &str = "value:";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    ablation: AblationConfig,
}

/// Hex SHA-256 of the serialized model and ablation config.
pub fn config_hash(config: &ModelConfig, ablation: &AblationConfig) -> Result<String> {
    let line = serde_json::to_string(&Header { model: config.clone(), ablation: *ablation })?;
    Ok(hex::encode(Sha256::digest(line.as_bytes())))
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let config = serde_json::to_string(&Header { model: model.config.clone(), ablation: model.ablation })?;
    let mut header = format!(
        "{MAGIC}\nconfig-hash {}\nconfig {config}\nscheme {}\nvocab {}\n",
        hex::encode(Sha256::digest(config.as_bytes())),
        serde_json::to_string(&model.scheme)?,
        serde_json::to_string(&model.vocab)?,
    );
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let stores = std::iter::once(("", &model.params)).chain(model.value_params.iter().map(|s| (VALUE_PREFIX, s)));
    for (prefix, store) in stores {
        for (name, t) in store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {prefix}{name} {} {offset} {}\n", shape.join("x"), t.len()));
            for &x in t.data() {
                payload.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
            offset += t.len();
        }
    }
    header.push_str("payload\n");
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::contract(format!("{}: corrupt checkpoint: {msg}", path.display()))
}

fn field<'l>(path: &Path, line: Option<&'l str>, key: &str) -> Result<&'l str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| bad(path, format!("missing `{key}` line")))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"\npayload\n";
    let split = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| bad(path, "no payload marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad(path, "header is not UTF-8"))?;
    let payload: Vec<f32> = bytes[split + marker.len()..]
        .chunks(4)
        .map(|c| <[u8; 4]>::try_from(c).map(f32::from_le_bytes).map_err(|_| bad(path, "truncated payload")))
        .collect::<Result<_>>()?;

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(path, "unrecognised format"));
    }
    let hash = field(path, lines.next(), "config-hash")?;
    let config = field(path, lines.next(), "config")?;
    if hex::encode(Sha256::digest(config.as_bytes())) != hash {
        return Err(bad(path, "config hash does not match"));
    }
    let cfg: Header = serde_json::from_str(config)?;
    let scheme: TagScheme = serde_json::from_str(field(path, lines.next(), "scheme")?)?;
    let vocab: Vocabulary = serde_json::from_str(field(path, lines.next(), "vocab")?)?;

    let mut params = ParamStore::new();
    let mut value_params: Option<ParamStore<f32>> = None;
    for line in lines {
        let rest = field(path, Some(line), "tensor")?;
        let parts: Vec<&str> = rest.split(' ').collect();
        let [name, shape, offset, len] = parts[..] else {
            return Err(bad(path, format!("malformed tensor line `{line}`")));
        };
        let shape: Vec<usize> =
            shape.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(path, line))?;
        let (offset, len): (usize, usize) =
            (offset.parse().map_err(|_| bad(path, line))?, len.parse().map_err(|_| bad(path, line))?);
        let data =
            payload.get(offset..offset + len).ok_or_else(|| bad(path, format!("tensor `{name}` out of bounds")))?;
        let t = Tensor::new(shape, data.to_vec())?;
        match name.strip_prefix(VALUE_PREFIX) {
            Some(n) => value_params.get_or_insert_with(ParamStore::new).insert(n, t)?,
            None => params.insert(name, t)?,
        };
    }
    cfg.model.validate()?;
    if scheme.num_labels() != cfg.model.num_labels {
        return Err(bad(path, "scheme size differs from config"));
    }
    Ok(Model { config: cfg.model, ablation: cfg.ablation, scheme, vocab, params, value_params })
}
