//! Self-describing binary container for parameter sets.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, dtype, caller metadata, tensor table), then every tensor's
//! values as raw little-endian words in table order. Values are stored
//! bit-for-bit, so save/load is exact.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PAUGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    dtype: String,
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub fn encode<S: Scalar, M: Serialize>(kind: &str, meta: &M, params: &ParamStore<S>) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        dtype: S::DTYPE.to_string(),
        meta,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + params.num_elements() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params.iter() {
        for &x in p.tensor.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode<S: Scalar, M: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(M, ParamStore<S>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(body)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected {kind} checkpoint, found {}", header.kind)));
    }
    if header.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            S::DTYPE
        )));
    }
    let mut offset = 20 + header_len;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * S::BYTES;
        let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        params.insert(entry.name, Tensor::new(entry.shape, data)?, entry.trainable)?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.meta, params))
}

pub fn save<S: Scalar, M: Serialize>(path: &Path, kind: &str, meta: &M, params: &ParamStore<S>) -> Result<()> {
    let bytes = encode(kind, meta, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load<S: Scalar, M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, ParamStore<S>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(kind, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamStore::<f32>::new();
        params
            .insert("a", Tensor::new(vec![2, 2], vec![0.1, -0.0, f32::MIN_POSITIVE, 1e30]).unwrap(), true)
            .unwrap();
        params.insert("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false).unwrap();
        let bytes = encode("test", &"meta", &params).unwrap();
        let (meta, back): (String, ParamStore<f32>) = decode("test", &bytes).unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(back.fingerprint(), params.fingerprint());
        for (x, y) in back.iter().zip(params.iter()) {
            let xb: Vec<u32> = x.tensor.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
            assert_eq!(x.trainable, y.trainable);
        }
        assert!(decode::<f64, String>("test", &bytes).is_err());
        assert!(decode::<f32, String>("other", &bytes).is_err());
        assert!(decode::<f32, String>("test", &bytes[..bytes.len() - 1]).is_err());
    }
}
