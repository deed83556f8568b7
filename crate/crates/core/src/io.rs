//! Serialization helpers.
//!
//! Complex matrices and vectors are written as JSON objects with explicit
//! shape fields and `[re, im]` pairs per entry:
//!
//! ```json
//! {"rows": 2, "cols": 2, "data": [[[1.0, 0.0], [0.0, 0.5]], [[0.0, -0.5], [1.0, 0.0]]]}
//! {"len": 2, "data": [[0.1, 0.0], [0.1, 0.0]]}
//! ```
//!
//! Field order is fixed by the struct definitions, so output is stable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix, CVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonVector {
    pub len: usize,
    pub data: Vec<[f64; 2]>,
}

impl From<&CMatrix> for JsonMatrix {
    fn from(m: &CMatrix) -> Self {
        let data = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
            .collect();
        JsonMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<JsonMatrix> for CMatrix {
    type Error = Error;

    fn try_from(j: JsonMatrix) -> Result<Self> {
        if j.data.len() != j.rows {
            return Err(Error::dim(format!(
                "matrix declares {} rows but has {}",
                j.rows,
                j.data.len()
            )));
        }
        if let Some((i, row)) = j.data.iter().enumerate().find(|(_, r)| r.len() != j.cols) {
            return Err(Error::dim(format!(
                "matrix row {i} has {} entries, expected {}",
                row.len(),
                j.cols
            )));
        }
        Ok(CMatrix::from_fn(j.rows, j.cols, |r, col| {
            let [re, im] = j.data[r][col];
            c(re, im)
        }))
    }
}

impl From<&CVector> for JsonVector {
    fn from(v: &CVector) -> Self {
        JsonVector {
            len: v.len(),
            data: v.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

impl TryFrom<JsonVector> for CVector {
    type Error = Error;

    fn try_from(j: JsonVector) -> Result<Self> {
        if j.data.len() != j.len {
            return Err(Error::dim(format!(
                "vector declares length {} but has {} entries",
                j.len,
                j.data.len()
            )));
        }
        Ok(CVector::from_iterator(
            j.len,
            j.data.iter().map(|&[re, im]| c(re, im)),
        ))
    }
}

/// `#[serde(with = "crate::io::matrix")]`
pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        JsonMatrix::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CMatrix, D::Error> {
        let j = JsonMatrix::deserialize(d)?;
        CMatrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "crate::io::vector")]`
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &CVector, s: S) -> std::result::Result<S::Ok, S::Error> {
        JsonVector::from(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CVector, D::Error> {
        let j = JsonVector::deserialize(d)?;
        CVector::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex(&Sha256::digest(&bytes))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Shortest round-trip decimal form; used for every float written to CSV.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
