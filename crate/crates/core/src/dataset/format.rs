use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Record, RecordMeta, Split, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::params::hex;

pub const RECORDS_PER_CHUNK: usize = 256;

/// Values stored per record in the label block: four normalised labels then the class index.
const LABEL_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkHeader {
    pub version: u32,
    pub split: Split,
    pub image_shape: [usize; 3],
    pub echo_shape: [usize; 3],
    pub image_dtype: String,
    pub echo_dtype: String,
    pub label_dtype: String,
    pub label_len: usize,
    pub records: Vec<RecordMeta>,
}

impl ChunkHeader {
    fn record_bytes(&self) -> usize {
        self.image_shape.iter().product::<usize>() + 4 * self.echo_shape.iter().product::<usize>() + 4 * self.label_len
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes one chunk and returns the SHA-256 of the file contents.
pub fn write_chunk(path: &Path, split: Split, image_shape: [usize; 3], echo_shape: [usize; 3], records: &[Record]) -> Result<String> {
    let header = ChunkHeader {
        version: FORMAT_VERSION,
        split,
        image_shape,
        echo_shape,
        image_dtype: "uint8".into(),
        echo_dtype: "float32".into(),
        label_dtype: "float32".into(),
        label_len: LABEL_LEN,
        records: records.iter().map(|r| r.meta.clone()).collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for r in records {
        if r.image.len() != image_shape.iter().product::<usize>() || r.echo.len() != echo_shape.iter().product::<usize>() {
            return Err(Error::shape("write_chunk", &[r.image.len(), r.echo.len()], &image_shape));
        }
        out.extend_from_slice(&r.image);
        for v in &r.echo {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in r.labels.iter().copied().chain([r.class as f32]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&out))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Parses a chunk file's bytes; errors name the offending record index.
pub fn read_chunk(bytes: &[u8], path: &Path) -> Result<(ChunkHeader, Vec<Record>)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line".into()))?;
    let header: ChunkHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.version)));
    }
    if header.label_len != LABEL_LEN {
        return Err(corrupt(format!("unexpected label length {}", header.label_len)));
    }
    let payload = &bytes[nl + 1..];
    let rb = header.record_bytes();
    let img_len = header.image_shape.iter().product::<usize>();
    let echo_len = header.echo_shape.iter().product::<usize>();
    let mut records = Vec::with_capacity(header.records.len());
    for (i, meta) in header.records.iter().enumerate() {
        let Some(block) = payload.get(i * rb..(i + 1) * rb) else {
            return Err(corrupt(format!("record {i} is truncated")));
        };
        let image = block[..img_len].to_vec();
        let echo = f32s(&block[img_len..img_len + 4 * echo_len]);
        let lab = f32s(&block[img_len + 4 * echo_len..]);
        if echo.iter().chain(&lab).any(|v| !v.is_finite()) {
            return Err(corrupt(format!("record {i} holds non-finite values")));
        }
        if lab[..4].iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(corrupt(format!("record {i} has labels outside (0, 1)")));
        }
        let class = lab[4];
        if class < 0.0 || class.fract() != 0.0 || class >= 3.0 {
            return Err(corrupt(format!("record {i} has invalid class {class}")));
        }
        records.push(Record {
            image,
            echo,
            labels: [lab[0], lab[1], lab[2], lab[3]],
            class: class as usize,
            meta: meta.clone(),
        });
    }
    if payload.len() != header.records.len() * rb {
        return Err(corrupt(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            header.records.len() * rb
        )));
    }
    Ok((header, records))
}
