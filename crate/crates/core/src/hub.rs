// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk store of control vectors keyed by `(trait, model_id)`.
//!
//! One file per hub, all integers little-endian:
//!
//! ```text
//! "CLMV" | u32 version=1
//! payloads, each:  u16 trait_len | trait | model_id[32] | u32 layer_count
//!                  | layer_count × (u32 layer_index | hidden_dim × f32)
//! index:           u32 entry_count | entries… | u32 crc32c(index)
//! trailer:         u64 index_offset
//! ```
//!
//! Each index entry records trait, model id, hidden size, layer list, payload
//! offset/size, the payload's CRC32C and the extraction metadata. Saves
//! rewrite the file to a temporary sibling and rename it into place while
//! holding an exclusive lock on `<hub>.lock`; readers never lock.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelId;
use crate::steering::{ControlVector, ExtractionMeta, ReadPosition};

pub const HUB_MAGIC: &[u8; 4] = b"CLMV";
pub const HUB_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;

/// Stable identifier of a hub entry; replacing an entry keeps its id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct EntryId {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub model_id: ModelId,
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.trait_name, self.model_id.short())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HubEntry {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub model_id: ModelId,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub offset: u64,
    pub size: u64,
    pub checksum: u32,
    pub meta: ExtractionMeta,
}

impl HubEntry {
    pub fn id(&self) -> EntryId {
        EntryId {
            trait_name: self.trait_name.clone(),
            model_id: self.model_id,
        }
    }
}

pub fn encode_payload(v: &ControlVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        2 + v.trait_name.len() + 36 + v.layer_vectors.len() * (4 + 4 * v.hidden_dim),
    );
    out.extend_from_slice(&(v.trait_name.len() as u16).to_le_bytes());
    out.extend_from_slice(v.trait_name.as_bytes());
    out.extend_from_slice(&v.model_id.0);
    out.extend_from_slice(&(v.layer_vectors.len() as u32).to_le_bytes());
    for (l, vec) in &v.layer_vectors {
        out.extend_from_slice(&(*l as u32).to_le_bytes());
        for x in vec {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_payload(bytes: &[u8], entry: &HubEntry) -> Result<ControlVector> {
    let bad = |m: &str| Error::MalformedHub(format!("entry `{}`: {m}", entry.trait_name));
    let mut r = Cursor::new(bytes);
    let tlen = r.u16()? as usize;
    let trait_name = std::str::from_utf8(r.take(tlen)?)
        .map_err(|_| bad("trait is not UTF-8"))?
        .to_string();
    let model_id = ModelId(r.take(32)?.try_into().expect("32 bytes"));
    if trait_name != entry.trait_name || model_id != entry.model_id {
        return Err(bad("payload key disagrees with index"));
    }
    let count = r.u32()? as usize;
    if count != entry.layers.len() {
        return Err(bad("layer count disagrees with index"));
    }
    let mut layer_vectors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let l = r.u32()? as usize;
        let v: Vec<f32> = r
            .take(4 * entry.hidden_dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layer_vectors.insert(l, v);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing payload bytes"));
    }
    Ok(ControlVector {
        trait_name,
        model_id,
        hidden_dim: entry.hidden_dim,
        layer_vectors,
        meta: entry.meta.clone(),
    })
}

fn encode_index(entries: &[HubEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.trait_name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.trait_name.as_bytes());
        out.extend_from_slice(&e.model_id.0);
        out.extend_from_slice(&(e.hidden_dim as u32).to_le_bytes());
        out.extend_from_slice(&(e.layers.len() as u32).to_le_bytes());
        for l in &e.layers {
            out.extend_from_slice(&(*l as u32).to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.size.to_le_bytes());
        out.extend_from_slice(&e.checksum.to_le_bytes());
        out.extend_from_slice(&e.meta.pair_count.to_le_bytes());
        out.push(e.meta.read_position.code());
        out.extend_from_slice(&(e.meta.source.len() as u16).to_le_bytes());
        out.extend_from_slice(e.meta.source.as_bytes());
        out.extend_from_slice(&e.meta.created_unix.to_le_bytes());
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_index(bytes: &[u8]) -> Result<Vec<HubEntry>> {
    if bytes.len() < 4 {
        return Err(Error::MalformedHub("index too short".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32c::crc32c(body).to_le_bytes() != crc {
        return Err(Error::MalformedHub("index checksum mismatch".into()));
    }
    let mut r = Cursor::new(body);
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tlen = r.u16()? as usize;
        let trait_name = std::str::from_utf8(r.take(tlen)?)
            .map_err(|_| Error::MalformedHub("trait is not UTF-8".into()))?
            .to_string();
        let model_id = ModelId(r.take(32)?.try_into().expect("32 bytes"));
        let hidden_dim = r.u32()? as usize;
        let nl = r.u32()? as usize;
        let layers = (0..nl)
            .map(|_| r.u32().map(|l| l as usize))
            .collect::<Result<_>>()?;
        let offset = r.u64()?;
        let size = r.u64()?;
        let checksum = r.u32()?;
        let pair_count = r.u32()?;
        let read_position = ReadPosition::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::MalformedHub("unknown read position".into()))?;
        let slen = r.u16()? as usize;
        let source = std::str::from_utf8(r.take(slen)?)
            .map_err(|_| Error::MalformedHub("source is not UTF-8".into()))?
            .to_string();
        let created_unix = r.u64()?;
        entries.push(HubEntry {
            trait_name,
            model_id,
            hidden_dim,
            layers,
            offset,
            size,
            checksum,
            meta: ExtractionMeta {
                pair_count,
                read_position,
                source,
                created_unix,
            },
        });
    }
    if r.pos != body.len() {
        return Err(Error::MalformedHub("trailing index bytes".into()));
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedHub(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parsed hub image: raw bytes plus the decoded index.
struct Image {
    bytes: Vec<u8>,
    entries: Vec<HubEntry>,
}

impl Image {
    fn parse(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 || &bytes[..4] != HUB_MAGIC {
            return Err(Error::MalformedHub("bad magic or short file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != HUB_VERSION {
            return Err(Error::MalformedHub(format!(
                "unsupported version {version}"
            )));
        }
        let trailer = bytes.len() - 8;
        let index_offset = u64::from_le_bytes(bytes[trailer..].try_into().expect("8 bytes"));
        let index_offset = usize::try_from(index_offset)
            .ok()
            .filter(|o| (HEADER_LEN..=trailer).contains(o))
            .ok_or_else(|| Error::MalformedHub("index offset out of range".into()))?;
        let entries = decode_index(&bytes[index_offset..trailer])?;
        for e in &entries {
            let end = e.offset.checked_add(e.size);
            if e.offset < HEADER_LEN as u64 || end.is_none_or(|end| end > index_offset as u64) {
                return Err(Error::MalformedHub(format!(
                    "entry `{}` points outside the payload region",
                    e.trait_name
                )));
            }
        }
        Ok(Self { bytes, entries })
    }

    fn empty() -> Self {
        Self {
            bytes: Vec::new(),
            entries: Vec::new(),
        }
    }

    fn payload(&self, e: &HubEntry) -> &[u8] {
        &self.bytes[e.offset as usize..(e.offset + e.size) as usize]
    }

    fn load_entry(&self, e: &HubEntry) -> Result<ControlVector> {
        let payload = self.payload(e);
        if crc32c::crc32c(payload) != e.checksum {
            return Err(Error::Checksum {
                trait_name: e.trait_name.clone(),
            });
        }
        decode_payload(payload, e)
    }
}

/// Handle to a hub file. Cheap to construct; every call re-reads the file.
#[derive(Debug, Clone)]
pub struct Hub {
    path: PathBuf,
}

impl Hub {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_image(&self) -> Result<Image> {
        match std::fs::read(&self.path) {
            Ok(bytes) => Image::parse(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Image::empty()),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    fn sibling(&self, suffix: &str) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        self.path.with_file_name(name)
    }

    /// Entries in insertion order, without loading payloads.
    pub fn list(&self) -> Result<Vec<HubEntry>> {
        Ok(self.read_image()?.entries)
    }

    pub fn load(&self, trait_name: &str, model_id: ModelId) -> Result<ControlVector> {
        let image = self.read_image()?;
        let entry = image
            .entries
            .iter()
            .find(|e| e.trait_name == trait_name && e.model_id == model_id)
            .ok_or_else(|| Error::NotFound {
                trait_name: trait_name.to_string(),
                model_id: model_id.short(),
            })?;
        image.load_entry(entry)
    }

    /// Every stored vector for `model_id`, in insertion order.
    pub fn load_all_for(&self, model_id: ModelId) -> Result<Vec<ControlVector>> {
        let image = self.read_image()?;
        image
            .entries
            .iter()
            .filter(|e| e.model_id == model_id)
            .map(|e| image.load_entry(e))
            .collect()
    }

    /// Check every entry's checksum and payload structure.
    pub fn verify(&self) -> Result<usize> {
        let image = self.read_image()?;
        for e in &image.entries {
            image.load_entry(e)?;
        }
        Ok(image.entries.len())
    }

    /// Store `vector`. An existing `(trait, model_id)` entry is only
    /// overwritten when `replace` is set; it then keeps its index position.
    pub fn save(&self, vector: &ControlVector, replace: bool) -> Result<EntryId> {
        vector.validate()?;
        if vector.trait_name.len() > u16::MAX as usize {
            return Err(Error::InvalidVector("trait name too long".into()));
        }
        let lock_path = self.sibling(".lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;

        let image = self.read_image()?;
        let existing = image
            .entries
            .iter()
            .position(|e| e.trait_name == vector.trait_name && e.model_id == vector.model_id);
        if existing.is_some() && !replace {
            return Err(Error::DuplicateEntry {
                trait_name: vector.trait_name.clone(),
            });
        }

        let mut out = Vec::with_capacity(image.bytes.len() + 1024);
        out.extend_from_slice(HUB_MAGIC);
        out.extend_from_slice(&HUB_VERSION.to_le_bytes());
        let mut entries = Vec::with_capacity(image.entries.len() + 1);
        let new_payload = encode_payload(vector);
        let new_entry = |offset: u64| HubEntry {
            trait_name: vector.trait_name.clone(),
            model_id: vector.model_id,
            hidden_dim: vector.hidden_dim,
            layers: vector.layer_vectors.keys().copied().collect(),
            offset,
            size: new_payload.len() as u64,
            checksum: crc32c::crc32c(&new_payload),
            meta: vector.meta.clone(),
        };
        for (i, e) in image.entries.iter().enumerate() {
            let offset = out.len() as u64;
            if Some(i) == existing {
                out.extend_from_slice(&new_payload);
                entries.push(new_entry(offset));
            } else {
                // Copied verbatim, so a corrupt payload stays detectable.
                out.extend_from_slice(image.payload(e));
                entries.push(HubEntry {
                    offset,
                    ..e.clone()
                });
            }
        }
        if existing.is_none() {
            let offset = out.len() as u64;
            out.extend_from_slice(&new_payload);
            entries.push(new_entry(offset));
        }
        let index_offset = out.len() as u64;
        out.extend_from_slice(&encode_index(&entries));
        out.extend_from_slice(&index_offset.to_le_bytes());

        let tmp = self.sibling(".tmp");
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&out)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &self.path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(&self.path, e)
        })?;
        drop(lock);
        Ok(EntryId {
            trait_name: vector.trait_name.clone(),
            model_id: vector.model_id,
        })
    }

    /// Inspection dump: every entry with its vectors as JSON numbers.
    pub fn export_json(&self) -> Result<serde_json::Value> {
        let image = self.read_image()?;
        let entries = image
            .entries
            .iter()
            .map(|e| {
                let v = image.load_entry(e)?;
                Ok(serde_json::json!({
                    "trait": e.trait_name,
                    "model_id": e.model_id,
                    "hidden_dim": e.hidden_dim,
                    "checksum": format!("{:08x}", e.checksum),
                    "meta": e.meta,
                    "norms": v.norms(),
                    "layers": v.layer_vectors,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::json!({ "hub": self.path, "entries": entries }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn vector(trait_name: &str, seed: u8) -> ControlVector {
        let layer_vectors: BTreeMap<usize, Vec<f32>> = [1usize, 3]
            .iter()
            .map(|l| {
                (
                    *l,
                    (0..4).map(|i| f32::from(seed) * 0.5 - i as f32).collect(),
                )
            })
            .collect();
        ControlVector {
            trait_name: trait_name.into(),
            model_id: ModelId([seed; 32]),
            hidden_dim: 4,
            layer_vectors,
            meta: ExtractionMeta {
                pair_count: 2,
                read_position: ReadPosition::LastToken,
                source: "post_block_residual".into(),
                created_unix: 7,
            },
        }
    }

    #[test]
    fn empty_hub_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let hub = Hub::new(dir.path().join("h.clmv"));
        assert!(hub.list().unwrap().is_empty());
        assert!(matches!(
            hub.load("x", ModelId([0; 32])),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn save_load_and_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let hub = Hub::new(dir.path().join("h.clmv"));
        let v = vector("Warmth", 1);
        let id = hub.save(&v, false).unwrap();
        assert_eq!(id.to_string(), format!("Warmth@{}", v.model_id.short()));
        assert_eq!(hub.load("Warmth", v.model_id).unwrap(), v);
        assert!(matches!(
            hub.save(&v, false),
            Err(Error::DuplicateEntry { .. })
        ));
        let mut v2 = vector("Warmth", 1);
        v2.layer_vectors.get_mut(&1).unwrap()[0] = 42.0;
        v2.meta.created_unix = 8;
        assert_eq!(hub.save(&v2, true).unwrap(), id);
        assert_eq!(hub.load("Warmth", v.model_id).unwrap(), v2);
        assert_eq!(hub.list().unwrap().len(), 1);
    }

    #[test]
    fn insertion_order_and_read_only_list() {
        let dir = tempfile::tempdir().unwrap();
        let hub = Hub::new(dir.path().join("h.clmv"));
        for (i, t) in ["A", "B", "C"].iter().enumerate() {
            hub.save(&vector(t, i as u8), false).unwrap();
        }
        let before = std::fs::read(hub.path()).unwrap();
        let names: Vec<_> = hub
            .list()
            .unwrap()
            .into_iter()
            .map(|e| e.trait_name)
            .collect();
        assert_eq!(names, ["A", "B", "C"]);
        assert_eq!(std::fs::read(hub.path()).unwrap(), before);
    }

    #[test]
    fn payload_corruption_names_trait() {
        let dir = tempfile::tempdir().unwrap();
        let hub = Hub::new(dir.path().join("h.clmv"));
        hub.save(&vector("Warmth", 1), false).unwrap();
        let e = &hub.list().unwrap()[0];
        let mut bytes = std::fs::read(hub.path()).unwrap();
        bytes[(e.offset + e.size - 1) as usize] ^= 0x01;
        std::fs::write(hub.path(), &bytes).unwrap();
        match hub.load("Warmth", e.model_id) {
            Err(Error::Checksum { trait_name }) => assert_eq!(trait_name, "Warmth"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stale_temp_file_is_harmless() {
        let dir = tempfile::tempdir().unwrap();
        let hub = Hub::new(dir.path().join("h.clmv"));
        hub.save(&vector("A", 1), false).unwrap();
        // A save that died mid-write leaves a truncated temp file behind.
        let full = std::fs::read(hub.path()).unwrap();
        std::fs::write(dir.path().join("h.clmv.tmp"), &full[..full.len() / 2]).unwrap();
        assert_eq!(hub.load("A", ModelId([1; 32])).unwrap(), vector("A", 1));
        hub.save(&vector("B", 2), false).unwrap();
        assert_eq!(hub.verify().unwrap(), 2);
    }
}
