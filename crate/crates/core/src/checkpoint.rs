//! XDCM checkpoint files.
//!
//! Layout: `XDCM`, u32 version, u64 header length, JSON header, payload of
//! little-endian f32 values. All integers little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"XDCM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

/// Everything but the tensor values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Snapshot of the model configuration that produced the tensors.
    pub config: serde_json::Value,
    pub seed: u64,
    pub phase: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    payload_sha256: String,
    payload_len: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes every tensor of `store` at 32-bit precision.
pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(4 * store.scalar_count());
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        meta: meta.clone(),
        payload_sha256: sha256_hex(&payload),
        payload_len: payload.len() as u64,
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Parses and verifies a checkpoint. Nothing is returned unless every check
/// passes.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(integrity(format!("{} is not an XDCM file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(integrity(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| integrity("header runs past end of file"))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| integrity(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_len {
        return Err(integrity(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(integrity("payload checksum mismatch"));
    }
    let mut spans: Vec<(u64, u64, &str)> = header
        .tensors
        .iter()
        .map(|t| (t.offset, t.offset + t.byte_len(), t.name.as_str()))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(integrity(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    if let Some(&(_, end, name)) = spans.iter().find(|s| s.1 > header.payload_len) {
        return Err(integrity(format!("tensor {name} ends at byte {end}, past the payload")));
    }
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let start = t.offset as usize;
        let data = payload[start..start + t.byte_len() as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store
            .insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?)
            .map_err(|e| integrity(e.to_string()))?;
    }
    Ok(Checkpoint { meta: header.meta, store })
}

/// Copies every tensor of `target` whose name starts with `prefix` from
/// `source`. Missing or differently shaped tensors are all reported and
/// nothing is copied.
pub fn load_into(target: &mut ParamStore, source: &ParamStore, prefix: &str) -> Result<usize> {
    let mut problems = Vec::new();
    let mut names = Vec::new();
    for (_, name, t) in target.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        match source.by_name(name) {
            None => problems.push(format!("{name}: missing from checkpoint")),
            Some(s) if s.shape() != t.shape() => {
                problems.push(format!("{name}: model {:?} vs checkpoint {:?}", t.shape(), s.shape()))
            }
            Some(_) => names.push(name.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems));
    }
    for name in &names {
        let id = target.id(name).expect("listed above");
        *target.get_mut(id) = source.by_name(name).expect("checked").clone();
    }
    Ok(names.len())
}

/// `v` rounded through f32, as stored.
pub fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixture() -> (ParamStore, CheckpointMeta) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.normal("a.weight", &[3, 4], 1.0, &mut rng).unwrap();
        store.normal("b.bias", &[5], 1.0, &mut rng).unwrap();
        let meta = CheckpointMeta {
            config: serde_json::json!({"dim": 4}),
            seed: 7,
            phase: "adapt".into(),
            config_hash: "abc".into(),
        };
        (store, meta)
    }

    #[test]
    fn round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xdcm");
        let (store, meta) = fixture();
        save_checkpoint(&p, &store, &meta).unwrap();
        let ck = read_checkpoint(&p).unwrap();
        assert_eq!(ck.meta, meta);
        for (_, name, t) in store.iter() {
            assert_eq!(ck.store.by_name(name).unwrap(), &round_f32(t));
        }
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xdcm");
        let (store, meta) = fixture();
        save_checkpoint(&p, &store, &meta).unwrap();
        let bytes = fs::read(&p).unwrap();
        for cut in [3, 12, 40, bytes.len() - 1] {
            fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(read_checkpoint(&p), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn mismatch_lists_every_tensor_and_copies_nothing() {
        let (source, _) = fixture();
        let mut target = ParamStore::new();
        target.zeros("a.weight", &[4, 4]).unwrap();
        target.zeros("b.bias", &[5]).unwrap();
        target.zeros("c.extra", &[1]).unwrap();
        match load_into(&mut target, &source, "") {
            Err(Error::CheckpointMismatch(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(target.by_name("b.bias").unwrap().sum(), 0.0);
        assert_eq!(load_into(&mut target, &source, "b.").unwrap(), 1);
    }
}
