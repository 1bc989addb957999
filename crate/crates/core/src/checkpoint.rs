//! Versioned checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SQFG"  u32 version  u32 section_count
//! section_count x { u16 name_len, name, u8 kind, u64 offset, u64 length }
//! u64 CRC-64/XZ of everything above
//! payloads, each followed by the u64 CRC-64/XZ of its bytes
//! ```
//!
//! `kind` 0 is UTF-8 text, 1 is packed f32. The `meta` text section holds
//! `key = value` lines; parameters and optimizer buffers are f32 sections in
//! canonical parameter order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::data::Dictionary;
use crate::error::{Error, Result};
use crate::model::ParamLayout;
use crate::optim::OptimizerState;
use crate::registry::{Config, Provenance, Value};
use crate::trainer::{Cursor, LossScaler, TrainState};

pub const MAGIC: &[u8; 4] = b"SQFG";
pub const CURRENT_VERSION: u32 = 2;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Text(String),
    Floats(Vec<f32>),
}

/// The raw key-value form every format version shares; upgrades rewrite it.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTree {
    pub version: u32,
    pub sections: BTreeMap<String, Section>,
}

impl CheckpointTree {
    pub fn new(version: u32) -> Self {
        Self {
            version,
            sections: BTreeMap::new(),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.sections.get(name) {
            Some(Section::Text(t)) => Ok(t),
            Some(Section::Floats(_)) => Err(Error::Integrity(format!("section '{name}' should be text"))),
            None => Err(Error::Integrity(format!("missing section '{name}'"))),
        }
    }

    pub fn floats(&self, name: &str) -> Result<&[f32]> {
        match self.sections.get(name) {
            Some(Section::Floats(f)) => Ok(f),
            Some(Section::Text(_)) => Err(Error::Integrity(format!("section '{name}' should be binary"))),
            None => Err(Error::Integrity(format!("missing section '{name}'"))),
        }
    }

    /// The `meta` section as a sorted map.
    pub fn meta(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for line in self.text("meta")?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Integrity(format!("malformed meta line '{line}'")))?;
            out.insert(k.to_string(), v.to_string());
        }
        Ok(out)
    }

    pub fn set_meta(&mut self, meta: &BTreeMap<String, String>) {
        let text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        self.sections.insert("meta".into(), Section::Text(text));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&self.version.to_le_bytes());
        header.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let payloads: Vec<(u8, Vec<u8>)> = self
            .sections
            .values()
            .map(|s| match s {
                Section::Text(t) => (0u8, t.as_bytes().to_vec()),
                Section::Floats(f) => (1u8, f.iter().flat_map(|x| x.to_le_bytes()).collect()),
            })
            .collect();
        let table_len: usize = self.sections.keys().map(|n| 2 + n.len() + 1 + 16).sum();
        let mut offset = (header.len() + table_len + 8) as u64;
        for (name, (kind, bytes)) in self.sections.keys().zip(&payloads) {
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(*kind);
            header.extend_from_slice(&offset.to_le_bytes());
            header.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64 + 8;
        }
        let mut out = header.clone();
        out.extend_from_slice(&CHECKSUM.checksum(&header).to_le_bytes());
        for (_, bytes) in payloads {
            out.extend_from_slice(&bytes);
            out.extend_from_slice(&CHECKSUM.checksum(&bytes).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("section name is not UTF-8".into()))?
                .to_string();
            let kind = r.take(1)?[0];
            let offset = r.u64()?;
            let length = r.u64()?;
            table.push((name, kind, offset, length));
        }
        let header_end = r.pos;
        let stored = r.u64()?;
        if CHECKSUM.checksum(&bytes[..header_end]) != stored {
            return Err(Error::Integrity("header checksum mismatch".into()));
        }
        let mut tree = Self::new(version);
        for (name, kind, offset, length) in table {
            let start = usize::try_from(offset).map_err(|_| Error::Integrity("offset overflow".into()))?;
            let len = usize::try_from(length).map_err(|_| Error::Integrity("length overflow".into()))?;
            let end = start
                .checked_add(len)
                .and_then(|e| e.checked_add(8))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Integrity(format!("section '{name}' runs past the end of the file")))?;
            let payload = &bytes[start..start + len];
            let stored = u64::from_le_bytes(bytes[start + len..end].try_into().expect("8 bytes"));
            if CHECKSUM.checksum(payload) != stored {
                return Err(Error::Integrity(format!("checksum mismatch in section '{name}'")));
            }
            let section = match kind {
                0 => Section::Text(
                    String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Integrity(format!("section '{name}' is not UTF-8")))?,
                ),
                1 if len % 4 == 0 => Section::Floats(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                _ => {
                    return Err(Error::Integrity(format!(
                        "section '{name}' has bad kind {kind} or length {len}"
                    )))
                }
            };
            tree.sections.insert(name, section);
        }
        Ok(tree)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("file truncated inside the header".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rewrites a tree from `version` to `version + 1`.
type UpgradeRule = fn(&mut CheckpointTree) -> Result<()>;

/// Rule `i` upgrades version `i + 1` to `i + 2`.
const UPGRADES: &[UpgradeRule] = &[v1_to_v2];

/// Version 1 had no loss scale window; it is defaulted to 256.
fn v1_to_v2(tree: &mut CheckpointTree) -> Result<()> {
    let mut meta = tree.meta()?;
    meta.entry("loss_scaler.window".into())
        .or_insert_with(|| LossScaler::default().window.to_string());
    tree.set_meta(&meta);
    Ok(())
}

/// Applies upgrade rules in ascending order. Returns how many ran.
pub fn upgrade(tree: &mut CheckpointTree) -> Result<usize> {
    if tree.version > CURRENT_VERSION {
        return Err(Error::ForwardIncompatible {
            found: tree.version,
            current: CURRENT_VERSION,
        });
    }
    let mut applied = 0;
    while tree.version < CURRENT_VERSION {
        let rule = tree
            .version
            .checked_sub(1)
            .and_then(|i| UPGRADES.get(i as usize))
            .ok_or(Error::UnsupportedVersion(tree.version))?;
        rule(tree)?;
        tree.version += 1;
        applied += 1;
    }
    Ok(applied)
}

/// Everything a run needs to continue or to decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub layout: ParamLayout,
    pub optimizer: String,
    pub state: TrainState,
    pub src_dict: Dictionary,
    pub tgt_dict: Dictionary,
}

fn encode_value(entry: &crate::registry::Entry) -> String {
    let ty = match entry.value {
        Value::Str(_) => "str",
        Value::Int(_) => "int",
        Value::Real(_) => "real",
        Value::Bool(_) => "bool",
    };
    format!("{ty}:{}:{}", entry.provenance.name(), entry.value)
}

fn decode_value(key: &str, raw: &str) -> Result<(Value, Provenance)> {
    let bad = || Error::Integrity(format!("malformed config entry '{key} = {raw}'"));
    let mut parts = raw.splitn(3, ':');
    let (ty, prov, text) = (
        parts.next().ok_or_else(bad)?,
        parts.next().ok_or_else(bad)?,
        parts.next().ok_or_else(bad)?,
    );
    let template = match ty {
        "str" => Value::Str(String::new()),
        "int" => Value::Int(0),
        "real" => Value::Real(0.0),
        "bool" => Value::Bool(false),
        _ => return Err(bad()),
    };
    let value = if ty == "str" {
        Value::Str(text.to_string())
    } else {
        template.parse_like(key, text).map_err(|_| bad())?
    };
    Ok((value, Provenance::parse(prov).ok_or_else(bad)?))
}

fn parse_meta<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Integrity(format!("meta key '{key}' missing")))?;
    raw.parse()
        .map_err(|_| Error::Integrity(format!("meta key '{key}' has bad value '{raw}'")))
}

impl Checkpoint {
    pub fn to_tree(&self) -> CheckpointTree {
        let mut tree = CheckpointTree::new(CURRENT_VERSION);
        let mut meta = BTreeMap::new();
        for (k, e) in self.config.iter() {
            meta.insert(format!("config.{k}"), encode_value(e));
        }
        let s = &self.state;
        meta.insert("optimizer.name".into(), self.optimizer.clone());
        meta.insert("optimizer.step".into(), s.optimizer.step.to_string());
        meta.insert("loss_scaler.scale".into(), format!("{:?}", s.scaler.scale));
        meta.insert("loss_scaler.good_steps".into(), s.scaler.good_steps.to_string());
        meta.insert("loss_scaler.window".into(), s.scaler.window.to_string());
        meta.insert("loss_scaler.min_scale".into(), format!("{:?}", s.scaler.min_scale));
        meta.insert("loss_scaler.max_scale".into(), format!("{:?}", s.scaler.max_scale));
        meta.insert("train.attempts".into(), s.attempts.to_string());
        meta.insert("cursor.epoch".into(), s.cursor.epoch.to_string());
        meta.insert("cursor.position".into(), s.cursor.position.to_string());
        meta.insert("rng.seed".into(), s.seed.to_string());
        tree.set_meta(&meta);
        tree.sections
            .insert("manifest".into(), Section::Text(self.layout.manifest()));
        tree.sections
            .insert("dict.source".into(), Section::Text(self.src_dict.to_text()));
        tree.sections
            .insert("dict.target".into(), Section::Text(self.tgt_dict.to_text()));
        tree.sections.insert("params".into(), Section::Floats(s.params.clone()));
        for (name, buf) in &s.optimizer.buffers {
            tree.sections
                .insert(format!("optimizer.{name}"), Section::Floats(buf.clone()));
        }
        tree
    }

    /// Reads a current-version tree.
    pub fn from_tree(tree: &CheckpointTree) -> Result<Self> {
        if tree.version != CURRENT_VERSION {
            return Err(Error::UnsupportedVersion(tree.version));
        }
        let meta = tree.meta()?;
        let mut config = Config::new();
        for (k, raw) in &meta {
            if let Some(key) = k.strip_prefix("config.") {
                let (value, prov) = decode_value(key, raw)?;
                config.declare(key, value, prov);
            }
        }
        let layout = ParamLayout::from_manifest(tree.text("manifest")?)?;
        let params = tree.floats("params")?.to_vec();
        if params.len() != layout.total() {
            return Err(Error::Integrity(format!(
                "manifest declares {} parameters, payload holds {}",
                layout.total(),
                params.len()
            )));
        }
        let mut buffers = Vec::new();
        for (name, section) in &tree.sections {
            if let (Some(buf), Section::Floats(data)) = (name.strip_prefix("optimizer."), section) {
                // Buffers are allocated lazily, so a fresh optimizer has empty ones.
                if !data.is_empty() && data.len() != layout.total() {
                    return Err(Error::Integrity(format!(
                        "optimizer buffer '{buf}' holds {} values for {} parameters",
                        data.len(),
                        layout.total()
                    )));
                }
                buffers.push((buf.to_string(), data.clone()));
            }
        }
        let scaler = LossScaler {
            scale: parse_meta(&meta, "loss_scaler.scale")?,
            good_steps: parse_meta(&meta, "loss_scaler.good_steps")?,
            window: parse_meta(&meta, "loss_scaler.window")?,
            min_scale: parse_meta(&meta, "loss_scaler.min_scale")?,
            max_scale: parse_meta(&meta, "loss_scaler.max_scale")?,
        };
        let state = TrainState {
            params,
            optimizer: OptimizerState {
                step: parse_meta(&meta, "optimizer.step")?,
                buffers,
            },
            scaler,
            attempts: parse_meta(&meta, "train.attempts")?,
            cursor: Cursor {
                epoch: parse_meta(&meta, "cursor.epoch")?,
                position: parse_meta(&meta, "cursor.position")?,
            },
            seed: parse_meta(&meta, "rng.seed")?,
        };
        Ok(Self {
            config,
            layout,
            optimizer: parse_meta(&meta, "optimizer.name")?,
            state,
            src_dict: Dictionary::from_text(tree.text("dict.source")?)?,
            tgt_dict: Dictionary::from_text(tree.text("dict.target")?)?,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed
    /// over `path` only once fully written.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_tree().to_bytes())
    }

    /// Loads and upgrades; also returns the number of upgrade rules applied.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut tree = CheckpointTree::from_bytes(&bytes)?;
        let applied = upgrade(&mut tree)?;
        Ok((Self::from_tree(&tree)?, applied))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
