//! Little-endian embedding cache:
//!
//! ```text
//! "CDE1" | u32 version=1 | u32 dim | u64 rows | rows*dim f32 | rows * (u32 len, utf-8 id)
//! ```
//!
//! A checkpoint is a concatenation of such blocks, one per named section.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CDE1";
const VERSION: u32 = 1;

/// Dense row-major `f32` matrix with one record id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be >= 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Size(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        Ok(Self { dim, data, ids })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f32>>, ids: Vec<String>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Size(format!("row of length {} in matrix of dim {dim}", bad.len())));
        }
        Self::new(dim, rows.into_iter().flatten().collect(), ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// True when every row's L2 norm is within `1e-5` of one.
    pub fn is_unit_norm(&self) -> bool {
        (0..self.rows()).all(|i| {
            let n: f64 = self.row(i).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            (n - 1.0).abs() <= 1e-5
        })
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        EmbeddingMatrix { dim: self.dim, data, ids }
    }

    /// Writes one cache block.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.rows() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        for id in &self.ids {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
        }
        Ok(())
    }

    /// Parses one cache block from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).map_err(|_| Error::Format("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"CDE1\"")));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("dim 0".into()));
        }
        let rows = cur.u64()? as usize;
        let n = rows
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Size(format!("{rows} rows of dim {dim} exceed the file size")))?;
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut ids = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = cur.u32()? as usize;
            let s = cur.take(len)?;
            ids.push(
                String::from_utf8(s.to_vec()).map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?,
            );
        }
        Ok((EmbeddingMatrix { dim, data, ids }, cur.pos))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Size(format!(
                "truncated payload: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn write_embedding_cache(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    m.write_to(&mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embedding_cache(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = read_all(path)?;
    let (m, used) = EmbeddingMatrix::parse(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Size(format!("{} trailing bytes after cache block", bytes.len() - used)));
    }
    Ok(m)
}

/// Writes named sections as consecutive cache blocks; row ids are
/// `"<name>[<row>]"`.
pub fn write_sections(path: &Path, sections: &[(String, EmbeddingMatrix)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (name, m) in sections {
        let ids = (0..m.rows()).map(|r| format!("{name}[{r}]")).collect();
        let block = EmbeddingMatrix::new(m.dim(), m.data().to_vec(), ids)?;
        block.write_to(&mut out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sections(path: &Path) -> Result<Vec<(String, EmbeddingMatrix)>> {
    let bytes = read_all(path)?;
    let mut pos = 0;
    let mut sections = Vec::new();
    while pos < bytes.len() {
        let (m, used) = EmbeddingMatrix::parse(&bytes[pos..])?;
        pos += used;
        let name = m
            .ids()
            .first()
            .and_then(|id| id.rsplit_once('[').map(|(n, _)| n.to_string()))
            .ok_or_else(|| Error::Format("section without rows or with unlabelled ids".into()))?;
        sections.push((name, m));
    }
    Ok(sections)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}
