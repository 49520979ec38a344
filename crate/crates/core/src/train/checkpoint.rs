//! Single-file checkpoints: magic, version, a JSON manifest, then raw
//! little-endian tensor payloads in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use dexlab_numcore::{DType, RngState, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::dex::DexAdapter;
use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Parameter, TransformerModel};

pub const MAGIC: &[u8; 8] = b"DEXCKPT1";
pub const VERSION: u32 = 1;
const HEADER: u64 = 8 + 4 + 8;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: TransformerModel<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Base state of the data stream; each step draws from its own offset.
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    adapter: Option<DexAdapter>,
    step: u64,
    rng_seed: u64,
    rng_stream: u64,
    optimizer_step: Option<u64>,
    tensors: BTreeMap<String, TensorEntry>,
}

fn fmt_err(offset: u64, detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut named: BTreeMap<String, (&Tensor<T>, bool)> = BTreeMap::new();
    for (n, p) in &ck.model.params {
        named.insert(n.clone(), (&p.tensor, p.trainable));
    }
    if let Some(o) = &ck.optimizer {
        for (n, t) in &o.m {
            named.insert(format!("{M_PREFIX}{n}"), (t, false));
        }
        for (n, t) in &o.v {
            named.insert(format!("{V_PREFIX}{n}"), (t, false));
        }
    }
    let mut payload = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, (t, trainable)) in &named {
        let offset = payload.len() as u64;
        T::extend_le_bytes(t.data(), &mut payload);
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype: T::DTYPE.name().into(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
                trainable: *trainable,
            },
        );
    }
    let manifest = Manifest {
        config: ck.model.config.clone(),
        adapter: ck.model.adapter.clone(),
        step: ck.model.step,
        rng_seed: ck.rng.seed,
        rng_stream: ck.rng.stream,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| fmt_err(HEADER, e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER as usize + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a whole checkpoint; any inconsistency fails before a model is
/// built.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(fmt_err(0, "bad magic; not a checkpoint"));
    }
    if bytes.len() < HEADER as usize {
        return Err(fmt_err(8, "file truncated inside the header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(8, format!("unsupported version {version}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload_start = HEADER
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            fmt_err(12, format!("manifest length {mlen} runs past end of file ({} bytes)", bytes.len()))
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER as usize..payload_start as usize])
        .map_err(|e| fmt_err(HEADER, format!("manifest: {e}")))?;
    manifest
        .config
        .validate()
        .map_err(|e| fmt_err(HEADER, format!("manifest config: {e}")))?;
    let payload = &bytes[payload_start as usize..];

    let mut entries: Vec<(&String, &TensorEntry)> = manifest.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut cursor = 0u64;
    let mut tensors: BTreeMap<String, (Tensor<T>, bool)> = BTreeMap::new();
    let width = T::DTYPE.size_of() as u64;
    for (name, e) in entries {
        let at = payload_start + e.offset;
        if DType::parse(&e.dtype) != Some(T::DTYPE) {
            return Err(fmt_err(at, format!("tensor {name} has dtype {}, expected {}", e.dtype, T::DTYPE.name())));
        }
        if e.offset != cursor {
            return Err(fmt_err(at, format!("tensor {name} starts at payload offset {}, expected {cursor}", e.offset)));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.length != numel * width {
            return Err(fmt_err(at, format!("tensor {name}: length {} disagrees with shape {:?}", e.length, e.shape)));
        }
        let end = e.offset + e.length;
        if end > payload.len() as u64 {
            return Err(fmt_err(
                payload_start + payload.len() as u64,
                format!("file truncated inside tensor {name}"),
            ));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(width as usize)
            .map(T::from_le_chunk)
            .collect();
        tensors.insert(name.clone(), (Tensor::new(&e.shape, data)?, e.trainable));
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(fmt_err(payload_start + cursor, "trailing bytes after last tensor"));
    }

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, (t, trainable)) in tensors {
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, Parameter { tensor: t, trainable });
        }
    }
    check_schema(&manifest, &params, payload_start)?;
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            for (n, t) in m.iter().chain(v.iter()) {
                let p = params.get(n).ok_or_else(|| {
                    fmt_err(HEADER, format!("optimizer moment for unknown parameter {n}"))
                })?;
                if p.tensor.shape() != t.shape() {
                    return Err(fmt_err(
                        payload_start + manifest.tensors[&format!("{M_PREFIX}{n}")].offset,
                        format!("optimizer moment shape for {n} differs from the parameter"),
                    ));
                }
            }
            if m.keys().ne(v.keys()) {
                return Err(fmt_err(HEADER, "first and second moments cover different parameters"));
            }
            Some(OptimizerState { step, m, v })
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(fmt_err(HEADER, "optimizer moments present without optimizer_step")),
    };
    Ok(Checkpoint {
        model: TransformerModel {
            config: manifest.config,
            params,
            adapter: manifest.adapter,
            step: manifest.step,
        },
        optimizer,
        rng: RngState::new(manifest.rng_seed, manifest.rng_stream),
    })
}

/// Every parameter the config (and adapter) implies must be present with
/// the implied shape, and nothing else.
fn check_schema<T: Scalar>(
    manifest: &Manifest,
    params: &BTreeMap<String, Parameter<T>>,
    payload_start: u64,
) -> Result<()> {
    let mut expected: BTreeMap<String, Vec<usize>> = TransformerModel::<f32>::init(manifest.config.clone(), 0)?
        .params
        .into_iter()
        .map(|(n, p)| (n, p.tensor.shape().to_vec()))
        .collect();
    if let Some(a) = &manifest.adapter {
        a.selection
            .validate(manifest.config.n_layers, manifest.config.layout().heads)
            .map_err(|e| fmt_err(HEADER, format!("manifest selection: {e}")))?;
        for (n, t) in a.param_specs(&manifest.config) {
            expected.insert(n, t.shape().to_vec());
        }
    }
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(fmt_err(HEADER, format!("missing tensor {name}"))),
            Some(p) if p.tensor.shape() != shape.as_slice() => {
                return Err(fmt_err(
                    payload_start + manifest.tensors[name].offset,
                    format!("tensor {name} has shape {:?}, config implies {shape:?}", p.tensor.shape()),
                ))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|n| !expected.contains_key(*n)) {
        return Err(fmt_err(
            payload_start + manifest.tensors[extra].offset,
            format!("unexpected tensor {extra}"),
        ));
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> Checkpoint<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_ff: 16,
            vocab_size: 16,
            max_seq: 8,
            ..Default::default()
        };
        Checkpoint {
            model: TransformerModel::init(cfg, 3).unwrap(),
            optimizer: None,
            rng: RngState::new(3, 9),
        }
    }

    #[test]
    fn header_layout() {
        let b = encode(&small()).unwrap();
        assert_eq!(&b[..8], b"DEXCKPT1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let mlen = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        let m: serde_json::Value = serde_json::from_slice(&b[20..20 + mlen]).unwrap();
        assert_eq!(m["tensors"]["tok_emb"]["shape"], serde_json::json!([16, 8]));
        assert_eq!(m["tensors"]["tok_emb"]["dtype"], "f32");
    }

    #[test]
    fn roundtrip_bytes() {
        let ck = small();
        let b = encode(&ck).unwrap();
        let back = decode::<f32>(&b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), b);
    }

    #[test]
    fn corrupt_inputs() {
        let b = encode(&small()).unwrap();
        let err = |bytes: &[u8]| match decode::<f32>(bytes) {
            Err(CoreError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        };
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(err(&bad), 0);
        let mut bad = b.clone();
        bad[8] = 2;
        assert_eq!(err(&bad), 8);
        let mut bad = b.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(err(&bad), 12);
        assert!(err(&b[..b.len() - 3]) > 20);
        let mut bad = b.clone();
        bad.push(0);
        assert_eq!(err(&bad), b.len() as u64);
        assert!(decode::<f64>(&b).is_err());
    }
}
