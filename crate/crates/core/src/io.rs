//! Matrix files, CSV conversion, content digests and run manifests.
//!
//! Matrix file layout (all integers little-endian):
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 6    | magic `FABFT1`                      |
//! | 6      | 4    | rows (u32)                          |
//! | 10     | 4    | cols (u32)                          |
//! | 14     | 2    | element format (1 bf16, 2 fp32, 3 fp64) |
//! | 16     | ...  | row-major element bit patterns      |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Role};
use crate::numerics::{BitPattern, Format};

pub const MAGIC: &[u8; 6] = b"FABFT1";
pub const HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &Matrix, format: Format) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::MatrixFile("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::MatrixFile("too many columns".into()))?;
    let width = format.bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&format.code().to_le_bytes());
    for &x in m.data() {
        let bits = format.encode(x).bits();
        out.extend_from_slice(&bits.to_le_bytes()[..width]);
    }
    Ok(out)
}

/// Parses a matrix file image, returning the matrix and its stored format.
pub fn decode_matrix(bytes: &[u8], role: Role) -> Result<(Matrix, Format)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MatrixFile(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::MatrixFile("bad magic, not a FABFT1 matrix file".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rows = u32_at(6);
    let cols = u32_at(10);
    let code = u16::from_le_bytes([bytes[14], bytes[15]]);
    let format = Format::from_code(code)
        .ok_or_else(|| Error::MatrixFile(format!("unknown element format code {code}")))?;
    let width = format.bytes();
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::MatrixFile("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::MatrixFile(format!(
            "payload is {} bytes, {rows}x{cols} {format} needs {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(width)
        .map(|chunk| {
            let mut raw = [0u8; 8];
            raw[..width].copy_from_slice(chunk);
            format.decode(BitPattern::new(u64::from_le_bytes(raw), format.bits()).unwrap())
        })
        .collect();
    Ok((Matrix::new(rows, cols, data, role)?, format))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix, format: Format) -> Result<()> {
    fs::write(path, encode_matrix(m, format)?)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>, role: Role) -> Result<(Matrix, Format)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        Error::MatrixFile(format!("cannot read {}: {e}", path.display()))
    })?;
    decode_matrix(&bytes, role)
}

/// Reads a headerless CSV of numbers into a matrix rounded to `format`.
pub fn read_csv_matrix(path: impl AsRef<Path>, role: Role, format: Format) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map(|x| format.round(x, false)).map_err(|_| {
                    Error::MatrixFile(format!("row {i}: `{field}` is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows, role)
}

/// Shortest round-trip decimal for every element.
pub fn write_csv_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.rows() {
        writer.write_record(m.row(i).iter().map(|x| x.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a matrix's shape and exact values.
pub fn matrix_digest(m: &Matrix) -> String {
    sha256_hex(&encode_matrix(m, Format::Fp64).expect("matrix fits the file header"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigests {
    pub q: String,
    pub k: String,
    pub v: String,
}

impl InputDigests {
    pub fn of(q: &Matrix, k: &Matrix, v: &Matrix) -> Self {
        InputDigests {
            q: matrix_digest(q),
            k: matrix_digest(k),
            v: matrix_digest(v),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest<C> {
    pub tool: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub seed_scheme: String,
    pub config: C,
    pub inputs: InputDigests,
}

impl<C> RunManifest<C> {
    pub fn new(config: C, master_seed: u64, inputs: InputDigests) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed,
            seed_scheme: crate::campaign::SEED_SCHEME.to_string(),
            config,
            inputs,
        }
    }
}
