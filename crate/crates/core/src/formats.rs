//! Binary containers. All integers and floats are little-endian.
//!
//! ```text
//! PMEB  magic "PMEB" | u32 version=1 | u32 rows | u32 dim | rows*dim f32 (row-major)
//! PMPC  magic "PMPC" | u32 version=1 | u32 d_s | u32 kappa | mean[d_s] | eigenvalues[kappa] | components[kappa*d_s]
//! PMCK  magic "PMCK" | u32 version=1 | u32 M | u32 N | u32 d | users[M*d] | items[N*d]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PMEB";
pub const PCA_MAGIC: &[u8; 4] = b"PMPC";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: usize) -> Result<&mut Self> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(self)
    }

    pub(crate) fn f32s(&mut self, values: &[f64]) -> &mut Self {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self
    }

    pub(crate) fn finish(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "magic mismatch: expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Self { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize)
    }

    /// Reads `count` floats, reporting non-finite values by row of width `row_width`.
    pub(crate) fn f32s(&mut self, count: usize, row_width: usize) -> Result<Vec<f64>> {
        let end = self.pos + count * 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!(
                "truncated payload: expected {count} values, found {}",
                (self.bytes.len() - self.pos) / 4
            ))
        })?;
        self.pos = end;
        let mut out = Vec::with_capacity(count);
        for (k, raw) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(raw.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: k / row_width.max(1),
                });
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_matrix(matrix: &DenseMatrix) -> Result<Vec<u8>> {
    let mut w = Writer::new(EMBEDDING_MAGIC);
    w.u32(matrix.rows())?.u32(matrix.cols())?;
    w.f32s(matrix.as_slice());
    Ok(w.buf)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut r = Reader::open(bytes, EMBEDDING_MAGIC)?;
    let rows = r.u32()?;
    let dim = r.u32()?;
    let data = r.f32s(rows * dim, dim)?;
    r.expect_end()?;
    DenseMatrix::from_vec(rows, dim, data)
}

pub fn write_matrix(path: &Path, matrix: &DenseMatrix) -> Result<()> {
    let bytes = encode_matrix(matrix)?;
    Writer { buf: bytes }.finish(path)
}

/// Reads a `PMEB` container, or falls back to whitespace-separated text
/// (one row per line) when the file does not start with a known magic.
pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        return decode_matrix(&bytes);
    }
    if bytes.starts_with(PCA_MAGIC) || bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Format(
            "magic mismatch: expected PMEB embedding container".into(),
        ));
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| {
        Error::Format("magic mismatch: neither a PMEB container nor UTF-8 text".into())
    })?;
    parse_text_matrix(text)
}

pub fn parse_text_matrix(text: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row_index = rows.len();
        let mut row = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_idx + 1,
                message: format!("'{tok}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: row_index });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: line_idx + 1,
                    message: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}
