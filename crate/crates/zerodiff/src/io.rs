//! Shared on-disk binary formats: f32 matrix blobs with an 8-byte
//! (rows, cols) header, u32 label files and u8 split files. All integers and
//! floats are little-endian; matrices are row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    let mut buf = Vec::with_capacity(8 + rows * cols * 4);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)
        .map_err(|_| Error::malformed(path.display().to_string(), "truncated header"))?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body).map_err(|e| Error::io(path.display().to_string(), e))?;
    if body.len() != rows * cols * 4 {
        return Err(Error::malformed(
            path.display().to_string(),
            format!("expected {} f32 values, file holds {} bytes", rows * cols, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
}

/// Flat f64 vector blob (8-byte length header) for lossless parameter
/// checkpoints; data matrices stay f32.
pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + values.len() * 8);
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 {
        return Err(Error::malformed(path.display().to_string(), "truncated header"));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 8 {
        return Err(Error::malformed(path.display().to_string(), "length mismatch"));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_u32s(path: &Path, values: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let body = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if body.len() % 4 != 0 {
        return Err(Error::malformed(path.display().to_string(), "length not a multiple of 4"));
    }
    Ok(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_u8s(path: &Path, values: &[u8]) -> Result<()> {
    fs::write(path, values).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_u8s(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(Error::Json)
}

/// CSV export: one row per matrix row, plain floats, no header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    for row in m.rows() {
        let rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        w.write_record(&rec)
            .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    let mut data = Vec::new();
    let mut rows = 0usize;
    let mut cols = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::malformed(path.display().to_string(), "ragged csv rows"))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let m = array![[1.0, 2.5], [-3.0, 0.0], [0.125, 4.0]];
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_matrix_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        std::fs::write(&p, [3u8, 0, 0, 0, 2, 0, 0, 0, 1, 2]).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Malformed { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = array![[0.5, -1.25], [3.0, 7.5]];
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
    }
}
