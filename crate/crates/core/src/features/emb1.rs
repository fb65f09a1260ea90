use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;

use super::{FeatureError, EMBED_DIM};
use crate::data::TrialKey;
use crate::preprocess::N_WINDOWS;

const MAGIC: &[u8; 4] = b"EMB1";

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> FeatureError {
    FeatureError::Format {
        file: path.display().to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<(usize, &'a [u8]), FeatureError> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.path, self.pos, format!("truncated {what}")));
        }
        let at = self.pos;
        self.pos += n;
        Ok((at, &self.bytes[at..at + n]))
    }
}

/// Writes trial embeddings as EMB1 (f32 little-endian, row-major).
pub fn write_emb1(path: &Path, records: &[(TrialKey, Array3<f32>)]) -> Result<(), FeatureError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (key, data) in records {
        let k = key.to_string();
        buf.extend_from_slice(&(k.len() as u16).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        let (a, b, c) = data.dim();
        for d in [a, b, c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads an EMB1 file. Every record must be `(10, N_E, 200)`.
pub fn read_emb1(path: &Path) -> Result<Vec<(TrialKey, Array3<f32>)>, FeatureError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let (_, magic) = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(path, 0, "bad magic, expected EMB1"));
    }
    let count = u32::from_le_bytes(cur.take(4, "record count")?.1.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2, "key length")?.1.try_into().unwrap()) as usize;
        let (at, raw) = cur.take(len, "key")?;
        let key: TrialKey = std::str::from_utf8(raw)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, at, "key is not participant/day/trial_index"))?;
        let (at, dims_raw) = cur.take(12, "dims")?;
        let dims: Vec<usize> = dims_raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims[0] != N_WINDOWS || dims[2] != EMBED_DIM || dims[1] == 0 {
            return Err(format_err(
                path,
                at,
                format!("record {key} has shape {dims:?}, expected ({N_WINDOWS}, channels, {EMBED_DIM})"),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        let (at, payload) = cur.take(n * 4, "payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, at, format!("record {key} has non-finite values")));
        }
        out.push((key, Array3::from_shape_vec((dims[0], dims[1], dims[2]), values).unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(format_err(path, cur.pos, "trailing bytes after last record"));
    }
    Ok(out)
}
