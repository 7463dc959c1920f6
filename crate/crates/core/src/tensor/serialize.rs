//! Flat little-endian tensor files: magic, then `name_len u32 | name | rank u32 | extents u32… | values f64…` per entry.

use std::path::Path;

use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"WASRPRM1";
pub const OPTIM_MAGIC: &[u8; 8] = b"WASROPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_entries(magic: &[u8; 8], entries: &[Entry]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for e in entries {
        out.extend((e.name.len() as u32).to_le_bytes());
        out.extend(e.name.as_bytes());
        out.extend((e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in &e.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn error(&self, msg: String) -> Error {
        Error::parse(self.path, 0, format!("byte offset {}: {msg}", self.pos))
    }
}

/// Parses a file produced by [`write_entries`]; `path` only labels errors.
pub fn read_entries(magic: &[u8; 8], bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != magic {
        return Err(Error::parse(
            path,
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")?;
        let raw = r.take(len, "name")?.to_vec();
        let name = String::from_utf8(raw).map_err(|_| r.error("name is not UTF-8".into()))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}

pub(crate) fn read_file(magic: &[u8; 8], path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_entries(magic, &bytes, path)
}

pub(crate) fn write_file(magic: &[u8; 8], entries: &[Entry], path: &Path) -> Result<()> {
    std::fs::write(path, write_entries(magic, entries)).map_err(|e| Error::io(path, e))
}
