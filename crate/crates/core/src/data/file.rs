//! Dataset files.
//!
//! ```text
//! "PFDS"  u32 version
//! u32 len, manifest text ("key=value" lines)
//! u32 length d  u32 classes  u8 role  u64 count
//! per pattern: u8 label (255 = unlabeled), d × f64
//! u8 has_pairing; if 1: u64 source count, sources as above, count × u64 index
//! u32 crc32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Pairing, Pattern, PatternDataset, Role};
use crate::error::{Error, Result};
use crate::nn::CHECKPOINT_MAGIC;

pub const DATASET_MAGIC: &[u8; 4] = b"PFDS";
pub const DATASET_VERSION: u32 = 1;
const UNLABELED: u8 = u8::MAX;

pub fn to_bytes(ds: &PatternDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut manifest = String::new();
    for (k, v) in &ds.manifest {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::config(format!("manifest entry {k:?} cannot be stored")));
        }
        writeln!(manifest, "{k}={v}").expect("writing to a String");
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(ds.length as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.push(ds.role.code());
    put_patterns(&mut out, &ds.patterns);
    match &ds.pairing {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            put_patterns(&mut out, &p.patterns);
            for &i in &p.index {
                out.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_patterns(out: &mut Vec<u8>, patterns: &[Pattern]) {
    out.extend_from_slice(&(patterns.len() as u64).to_le_bytes());
    for p in patterns {
        out.push(p.label.map_or(UNLABELED, |y| y as u8));
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PatternDataset> {
    if bytes.len() >= 4 && &bytes[..4] == CHECKPOINT_MAGIC {
        return Err(Error::format("this is a model checkpoint, not a dataset"));
    }
    if bytes.len() < 12 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::format("not a dataset file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let manifest_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(manifest_len)?)
        .map_err(|_| Error::format("manifest is not UTF-8"))?;
    let mut manifest = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad manifest line {line:?}")))?;
        manifest.insert(k.to_string(), v.to_string());
    }
    let length = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let role = Role::from_code(r.u8()?)?;
    let patterns = r.patterns(length)?;
    let pairing = match r.u8()? {
        0 => None,
        1 => {
            let sources = r.patterns(length)?;
            let index = (0..patterns.len())
                .map(|_| r.u64().map(|i| i as usize))
                .collect::<Result<Vec<_>>>()?;
            Some(Pairing {
                patterns: sources,
                index,
            })
        }
        other => return Err(Error::format(format!("bad pairing flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes after dataset"));
    }
    let ds = PatternDataset {
        length,
        classes,
        role,
        patterns,
        pairing,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
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
            .ok_or_else(|| Error::format("dataset file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn patterns(&mut self, length: usize) -> Result<Vec<Pattern>> {
        let count = self.u64()? as usize;
        let row = length.saturating_mul(8).saturating_add(1);
        if count.saturating_mul(row) > self.bytes.len() - self.pos {
            return Err(Error::format("dataset file is truncated"));
        }
        (0..count)
            .map(|_| {
                let label = match self.u8()? {
                    UNLABELED => None,
                    y => Some(y as usize),
                };
                let values = self
                    .take(length * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Pattern { values, label })
            })
            .collect()
    }
}

pub fn save_dataset(ds: &PatternDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PatternDataset> {
    from_bytes(&fs::read(path)?)
}

/// One pattern per row, label first (empty when unlabeled).
pub fn export_csv(ds: &PatternDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for p in &ds.patterns {
        if let Some(y) = p.label {
            write!(text, "{y}").expect("writing to a String");
        }
        for v in &p.values {
            write!(text, ",{v}").expect("writing to a String");
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
