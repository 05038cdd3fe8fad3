//! Binary parameter snapshots.
//!
//! Layout: the 8-byte magic `PHSC0001`, a JSON header describing every
//! stored tensor and echoing the producing configuration, then all values as
//! little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PHSC0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    params: Vec<Entry>,
    config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor, bool)>,
}

impl Checkpoint {
    /// Snapshot of parameters whose names start with any of `prefixes`
    /// (all parameters when `prefixes` is empty).
    pub fn from_store(store: &ParamStore, prefixes: &[&str], config: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| p)
            .filter(|p| prefixes.is_empty() || prefixes.iter().any(|x| p.name.starts_with(x)))
            .map(|p| (p.name.clone(), p.value.clone(), p.frozen))
            .collect();
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            params: self
                .params
                .iter()
                .map(|(name, t, frozen)| Entry { name: name.clone(), shape: t.shape(), frozen: *frozen })
                .collect(),
            config: self.config.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        for (_, t, _) in &self.params {
            for &v in t.data() {
                out.extend((v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let body = bytes.strip_prefix(MAGIC.as_slice()).ok_or(NnError::BadCheckpoint("bad magic".into()))?;
        let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<Header>();
        let header = match stream.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(NnError::BadCheckpoint(format!("header: {e}"))),
            None => return Err(NnError::BadCheckpoint("missing header".into())),
        };
        let mut raw = &body[stream.byte_offset()..];
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n = e.shape[0] * e.shape[1];
            if raw.len() < 4 * n {
                return Err(NnError::BadCheckpoint(format!("truncated values for {}", e.name)));
            }
            let data = raw[..4 * n]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            raw = &raw[4 * n..];
            params.push((e.name, Tensor::new(e.shape[0], e.shape[1], data), e.frozen));
        }
        if !raw.is_empty() {
            return Err(NnError::BadCheckpoint(format!("{} trailing bytes", raw.len())));
        }
        Ok(Self { config: header.config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        if !path.exists() {
            return Err(NnError::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies stored values into same-named parameters of `store`. Values
    /// only; frozen flags in the store are left alone.
    pub fn apply(&self, store: &mut ParamStore) -> Result<(), NnError> {
        for (name, t, _) in &self.params {
            let id = store.find(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(NnError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape(),
                    got: t.shape(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
