//! Binary container for adapter checkpoints and dataset caches.
//!
//! Layout (little-endian):
//! magic `ABLAB\0CK`, u32 version, u64 backbone fingerprint,
//! u64 metadata length + UTF-8 JSON, u64 entry count, then per entry:
//! u32 name length + name, u8 role, u32 rank, rank × u64 dims,
//! and the row-major f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterState, ParamRole, VariantSpec};
use crate::backbone::{init_backbone, BackboneConfig, BackboneModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"ABLAB\0CK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub fingerprint: u64,
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    /// Number of stored values with the given role.
    pub fn values_with_role(&self, role: ParamRole) -> usize {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.tensor.numel()).sum()
    }
}

fn role_byte(role: ParamRole) -> u8 {
    match role {
        ParamRole::Adapter => 0,
        ParamRole::Head => 1,
        ParamRole::Gate => 2,
    }
}

fn role_from_byte(b: u8) -> Result<ParamRole> {
    match b {
        0 => Ok(ParamRole::Adapter),
        1 => Ok(ParamRole::Head),
        2 => Ok(ParamRole::Gate),
        other => Err(Error::Format(format!("unknown entry role {other}"))),
    }
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&c.version.to_le_bytes());
    out.extend_from_slice(&c.fingerprint.to_le_bytes());
    let meta = serde_json::to_vec(&c.metadata)?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(c.entries.len() as u64).to_le_bytes());
    for e in &c.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(role_byte(e.role));
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &dim in e.tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in e.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

pub fn decode_container(buf: &[u8]) -> Result<Container> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not an adapterbias-lab container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let fingerprint = r.u64()?;
    let meta_len = r.len()?;
    let metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.len()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let role = role_from_byte(r.take(1)?[0])?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name} shape overflows")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
        entries.push(Entry { name, role, tensor });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Container {
        version,
        fingerprint,
        metadata,
        entries,
    })
}

pub fn write_container(c: &Container, path: &Path) -> Result<()> {
    let bytes = encode_container(c)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_container(&buf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    kind: String,
    backbone: BackboneConfig,
    variant: VariantSpec,
}

/// Container holding every trainable tensor of `adapter`, tagged with the
/// fingerprint of the backbone it was trained against.
pub fn adapter_container(adapter: &AdapterState, fingerprint: u64) -> Result<Container> {
    let meta = AdapterMeta {
        kind: "adapter".into(),
        backbone: adapter.config().clone(),
        variant: adapter.variant().clone(),
    };
    Ok(Container {
        version: FORMAT_VERSION,
        fingerprint,
        metadata: serde_json::to_value(meta)?,
        entries: adapter
            .tensors()
            .into_iter()
            .map(|(name, role, t)| Entry {
                name,
                role,
                tensor: Tensor::new(t.shape(), t.data().to_vec()).expect("valid shape"),
            })
            .collect(),
    })
}

fn adapter_from_container(c: Container) -> Result<(BackboneConfig, AdapterState)> {
    let meta: AdapterMeta = serde_json::from_value(c.metadata)?;
    if meta.kind != "adapter" {
        return Err(Error::Format(format!("container holds a {}, not an adapter", meta.kind)));
    }
    let mut state = AdapterState::init_detached(&meta.backbone, &meta.variant, 0)?;
    let mut stored: std::collections::BTreeMap<String, Entry> =
        c.entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    for (name, role, t) in state.tensors_mut() {
        let e = stored
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
        if e.role != role || e.tensor.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: stored {:?} {:?}, expected {role:?} {:?}",
                e.role,
                e.tensor.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(e.tensor.data());
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected entry {extra}")));
    }
    Ok((meta.backbone, state))
}

/// Writes the adapter of `model` to `path`; frozen tensors are not stored.
pub fn save_checkpoint(model: &BackboneModel, adapter: &AdapterState, path: &Path) -> Result<()> {
    write_container(&adapter_container(adapter, model.fingerprint())?, path)
}

/// Loads an adapter and checks it against `model`'s fingerprint.
pub fn load_adapter(model: &BackboneModel, path: &Path) -> Result<AdapterState> {
    let c = read_container(path)?;
    let expected = model.fingerprint();
    if c.fingerprint != expected {
        return Err(Error::Fingerprint {
            expected,
            found: c.fingerprint,
        });
    }
    let (_, state) = adapter_from_container(c)?;
    Ok(state)
}

/// Rebuilds the backbone from the stored configuration and loads the
/// adapter against it.
pub fn load_checkpoint(path: &Path) -> Result<(BackboneModel, AdapterState)> {
    let c = read_container(path)?;
    let found = c.fingerprint;
    let (cfg, state) = adapter_from_container(c)?;
    let model = init_backbone(&cfg)?;
    if model.fingerprint() != found {
        return Err(Error::Fingerprint {
            expected: model.fingerprint(),
            found,
        });
    }
    Ok((model, state))
}

fn content_fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Stores a dataset in the container format; the fingerprint slot holds a
/// content hash of the serialized dataset.
pub fn save_dataset_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let value = serde_json::json!({ "kind": "dataset", "dataset": dataset });
    let fingerprint = content_fingerprint(&serde_json::to_vec(&value)?);
    write_container(
        &Container {
            version: FORMAT_VERSION,
            fingerprint,
            metadata: value,
            entries: Vec::new(),
        },
        path,
    )
}

pub fn load_dataset_cache(path: &Path) -> Result<Dataset> {
    let c = read_container(path)?;
    let found = content_fingerprint(&serde_json::to_vec(&c.metadata)?);
    if found != c.fingerprint {
        return Err(Error::Fingerprint {
            expected: c.fingerprint,
            found,
        });
    }
    if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
        return Err(Error::Format("container does not hold a dataset".into()));
    }
    let ds = c.metadata.get("dataset").cloned().ok_or_else(|| Error::Format("missing dataset".into()))?;
    Ok(serde_json::from_value(ds)?)
}
