//! Versioned binary container: a JSON header followed by raw payload blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes
//! version  u32
//! hlen     u64
//! header   hlen bytes of UTF-8 JSON
//! payload  concatenated blobs, addressed by (offset, len) from the header
//! ```
//!
//! Float arrays are stored as `f32` or `f64` little-endian; boolean masks are
//! packed eight to a byte, least significant bit first.

use std::io::{Read, Write};

use groundlab_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Location of one array in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub offset: u64,
}

/// Location of one packed mask in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRef {
    pub len: usize,
    pub offset: u64,
}

/// Accumulates payload bytes and hands out references into them.
#[derive(Default)]
pub struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    pub fn array(&mut self, m: &Matrix, dtype: DType) -> ArrayRef {
        let offset = self.bytes.len() as u64;
        self.bytes.reserve(m.len() * dtype.width());
        for &x in m.data() {
            match dtype {
                DType::F32 => self.bytes.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => self.bytes.extend_from_slice(&x.to_le_bytes()),
            }
        }
        ArrayRef { rows: m.rows(), cols: m.cols(), dtype, offset }
    }

    pub fn mask(&mut self, bits: &[bool]) -> MaskRef {
        let offset = self.bytes.len() as u64;
        self.bytes.extend(pack_bits(bits));
        MaskRef { len: bits.len(), offset }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| chunk.iter().enumerate().fold(0u8, |b, (i, &on)| b | (u8::from(on) << i)))
        .collect()
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Read-only view over a container payload.
pub struct Payload<'a> {
    bytes: &'a [u8],
}

impl<'a> Payload<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Payload { bytes }
    }

    fn slice(&self, offset: u64, len: usize, what: &str) -> LabResult<&'a [u8]> {
        let start = usize::try_from(offset).map_err(|_| LabError::format(format!("{what}: offset overflow")))?;
        let end = start.checked_add(len).filter(|&e| e <= self.bytes.len());
        end.map(|e| &self.bytes[start..e])
            .ok_or_else(|| LabError::format(format!("{what}: range {start}+{len} exceeds payload of {} bytes", self.bytes.len())))
    }

    pub fn array(&self, r: &ArrayRef, what: &str) -> LabResult<Matrix> {
        let n = r.rows.checked_mul(r.cols).ok_or_else(|| LabError::format(format!("{what}: shape overflow")))?;
        let raw = self.slice(r.offset, n * r.dtype.width(), what)?;
        let data: Vec<f64> = match r.dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        };
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LabError::format(format!("{what}: non-finite value")));
        }
        Ok(Matrix::from_vec(r.rows, r.cols, data))
    }

    pub fn mask(&self, r: &MaskRef, what: &str) -> LabResult<Vec<bool>> {
        let raw = self.slice(r.offset, r.len.div_ceil(8), what)?;
        Ok(unpack_bits(raw, r.len))
    }
}

pub fn write_container<H: Serialize>(out: &mut impl Write, magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> LabResult<()> {
    let header = serde_json::to_vec(header)?;
    out.write_all(magic)?;
    out.write_all(&version.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(payload)?;
    Ok(())
}

/// Returns the header and the payload bytes after checking magic and version.
pub fn read_container<H: for<'de> Deserialize<'de>>(input: &mut impl Read, magic: &[u8; 8], version: u32) -> LabResult<(H, Vec<u8>)> {
    let mut found = [0u8; 8];
    input.read_exact(&mut found).map_err(|_| LabError::format("file too short for a container header"))?;
    if &found != magic {
        return Err(LabError::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let found_version = u32::from_le_bytes(word);
    if found_version != version {
        return Err(LabError::format(format!("unsupported format version {found_version}, expected {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let hlen = usize::try_from(u64::from_le_bytes(len)).map_err(|_| LabError::format("header length overflow"))?;
    let mut header = vec![0u8; hlen];
    input.read_exact(&mut header).map_err(|_| LabError::format("truncated header"))?;
    let header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    Ok((header, payload))
}
