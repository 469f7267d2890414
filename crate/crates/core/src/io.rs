//! Matrix bundle container used for datasets, models and reduced models.
//!
//! Layout:
//!
//! ```text
//! KMBUNDLE 1\n
//! {"kind": ..., "meta": {...}, "matrices": [{"name", "rows", "cols"}...],
//!  "payload_bytes": N, "payload_sha256": "..."}\n
//! <payload: every matrix row-major as little-endian f64, in header order>
//! ```
//!
//! Values are stored bit-exactly, so a save/load cycle reproduces every
//! matrix entry including signed zeros and NaN payloads.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "KMBUNDLE 1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    matrices: Vec<MatrixEntry>,
    payload_bytes: usize,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub matrices: Vec<(String, DMatrix<f64>)>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Bundle {
            kind: kind.into(),
            meta,
            matrices: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        self.matrices.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("bundle '{}' has no matrix '{name}'", self.kind)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.matrices.iter().any(|(n, _)| n == name)
    }

    fn payload(&self) -> Vec<u8> {
        let total: usize = self.matrices.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(total * 8);
        for (_, m) in &self.matrices {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    /// SHA-256 over the kind, metadata and payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_bytes());
        h.update(self.meta.to_string().as_bytes());
        for (name, m) in &self.matrices {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
        }
        h.update(self.payload());
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            matrices: self
                .matrices
                .iter()
                .map(|(name, m)| MatrixEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = Vec::with_capacity(payload.len() + 1024);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Format("missing bundle magic line".into()));
        }
        line.clear();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let mut payload = Vec::with_capacity(header.payload_bytes);
        reader.read_to_end(&mut payload)?;
        if payload.len() != header.payload_bytes {
            return Err(Error::Format(format!(
                "payload has {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(&payload)) != header.payload_sha256 {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        let mut offset = 0;
        let mut matrices = Vec::with_capacity(header.matrices.len());
        for e in header.matrices {
            let n = e.rows * e.cols;
            if offset + 8 * n > payload.len() {
                return Err(Error::Format(format!("matrix '{}' overruns payload", e.name)));
            }
            let mut m = DMatrix::zeros(e.rows, e.cols);
            for k in 0..n {
                let bytes: [u8; 8] = payload[offset + 8 * k..offset + 8 * k + 8].try_into().unwrap();
                m[(k / e.cols, k % e.cols)] = f64::from_le_bytes(bytes);
            }
            offset += 8 * n;
            matrices.push((e.name, m));
        }
        Ok(Bundle {
            kind: header.kind,
            meta: header.meta,
            matrices,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a '{kind}' bundle, found '{}'", self.kind)));
        }
        Ok(self)
    }
}

/// Write a matrix as CSV with the given column names.
pub fn write_csv(path: impl AsRef<Path>, columns: &[String], rows: &DMatrix<f64>) -> Result<()> {
    if columns.len() != rows.ncols() {
        return Err(Error::dims("CSV columns", rows.ncols(), columns.len()));
    }
    let mut s = columns.join(",");
    s.push('\n');
    for r in 0..rows.nrows() {
        let line: Vec<String> = (0..rows.ncols()).map(|c| format!("{:?}", rows[(r, c)])).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
