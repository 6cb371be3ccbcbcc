//! Single-file checkpoint container shared by both stages.
//!
//! `b"MMGTCKPT"`, `u32` version, `u64` header length, a JSON header, then the
//! parameter blobs as little-endian float32 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::formats::{read_file, write_atomic};
use crate::nn::ParamStore;
use crate::schedule::ScheduleConfig;

pub const MAGIC: &[u8; 8] = b"MMGTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// `"smga"` or `"videogen"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub schedule: ScheduleConfig,
    /// Training steps completed when saved.
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        config: serde_json::Value,
        schedule: ScheduleConfig,
        step: usize,
        seed: u64,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut offset = 0;
        for (name, shape, values) in store.export()? {
            tensors.push(TensorEntry { name, shape, offset });
            offset += values.len();
            data.push(values);
        }
        Ok(Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                config,
                schedule,
                step,
                seed,
                tensors,
            },
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        for blob in &self.data {
            for v in blob {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| MmgtError::Integrity {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(MmgtError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + hlen {
            return Err(bad("header truncated".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..20 + hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let body = &bytes[20 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if body.len() != 4 * total {
            return Err(bad(format!("expected {} blob bytes, found {}", 4 * total, body.len())));
        }
        let mut data = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != expected_offset {
                return Err(bad(format!("tensor '{}' has offset {}, expected {expected_offset}", t.name, t.offset)));
            }
            let slice = &body[4 * t.offset..4 * (t.offset + n)];
            data.push(
                slice
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            expected_offset += n;
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(MmgtError::invalid(format!(
                "checkpoint holds a '{}' model, expected '{kind}'",
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Copies every stored tensor into `store`; names and shapes must match
    /// exactly.
    pub fn restore_into(&self, store: &ParamStore) -> Result<()> {
        let stored: Vec<&str> = self.header.tensors.iter().map(|t| t.name.as_str()).collect();
        let expected: Vec<&str> = store.named().map(|(n, _)| n).collect();
        if stored != expected {
            let missing: Vec<&&str> = expected.iter().filter(|n| !stored.contains(n)).collect();
            let extra: Vec<&&str> = stored.iter().filter(|n| !expected.contains(n)).collect();
            return Err(MmgtError::shape(format!(
                "checkpoint parameters do not match the model (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (t, values) in self.header.tensors.iter().zip(&self.data) {
            let var = store.get(&t.name).expect("checked above");
            if var.dims() != t.shape.as_slice() {
                return Err(MmgtError::shape(format!(
                    "parameter '{}' has shape {:?} in the checkpoint, {:?} in the model",
                    t.name,
                    t.shape,
                    var.dims()
                )));
            }
            store.assign(&t.name, values)?;
        }
        Ok(())
    }
}
