//! Binary fixture files holding named double-precision matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MHLA"  u32 version (=1)  u32 entry count
//! per entry: u16 name length, UTF-8 name, u32 rows, u32 cols,
//!            rows*cols f64 values, row-major
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"MHLA";
pub const VERSION: u32 = 1;

/// Named tensors in insertion order.
pub type Fixture = IndexMap<String, DenseMatrix>;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("not a fixture file: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported fixture version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("fixture truncated while reading {0}")]
    Truncated(&'static str),
    #[error("fixture entry name is not valid UTF-8")]
    InvalidName,
    #[error("fixture entry name '{0}' is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("matrix '{0}' has a dimension that does not fit in u32")]
    TooLarge(String),
    #[error("duplicate fixture entry '{0}'")]
    DuplicateEntry(String),
    #[error("fixture has no entry '{0}'")]
    MissingEntry(String),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("fixture io error: {0}")]
    Io(#[from] io::Error),
}

pub fn encode_fixture(tensors: &Fixture) -> Result<Vec<u8>, FixtureError> {
    let payload: usize = tensors.values().map(|m| m.data().len() * 8 + 10).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| FixtureError::TooLarge("<count>".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, m) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| FixtureError::NameTooLong(name.clone()))?;
        let rows = u32::try_from(m.rows()).map_err(|_| FixtureError::TooLarge(name.clone()))?;
        let cols = u32::try_from(m.cols()).map_err(|_| FixtureError::TooLarge(name.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FixtureError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(FixtureError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FixtureError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FixtureError> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FixtureError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_fixture(bytes: &[u8]) -> Result<Fixture, FixtureError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FixtureError::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FixtureError::UnsupportedVersion(version));
    }
    let count = cur.u32("entry count")?;
    let mut out = Fixture::new();
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| FixtureError::InvalidName)?
            .to_string();
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or(FixtureError::Truncated("payload"))?;
        let raw = cur.take(n, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = DenseMatrix::from_vec(rows, cols, data).expect("payload sized from header");
        if out.insert(name.clone(), m).is_some() {
            return Err(FixtureError::DuplicateEntry(name));
        }
    }
    if cur.pos != bytes.len() {
        return Err(FixtureError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(out)
}

/// Writes the fixture through a temporary file renamed into place.
pub fn save_fixture(path: impl AsRef<Path>, tensors: &Fixture) -> Result<(), FixtureError> {
    let path = path.as_ref();
    let bytes = encode_fixture(tensors)?;
    let tmp = path.with_extension("tmp-fixture");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<Fixture, FixtureError> {
    decode_fixture(&fs::read(path)?)
}
