//! File formats: JSON helpers and the flat little-endian grid tensor file.
//!
//! Grid file layout (all integers `u32` LE):
//!
//! ```text
//! "BPJG" | version (1) | levels | k
//! per level: stride | anchors | channels | rows | cols
//! per level, in order: anchors*channels*rows*cols f32 LE, index [a][c][y][x]
//! ```

use crate::representation::{PartSchema, RawGrid, RawGridSet};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const GRID_MAGIC: &[u8; 4] = b"BPJG";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    File { path: String, error: std::io::Error },
    #[error("{path}: {error}")]
    Json { path: String, error: serde_json::Error },
    #[error("grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let file = fs::File::open(path).map_err(|error| IoError::File { path: path.display().to_string(), error })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|error| IoError::Json { path: path.display().to_string(), error })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|error| IoError::File { path: path.display().to_string(), error })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|error| IoError::Json { path: path.display().to_string(), error })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|error| IoError::File { path: path.display().to_string(), error })
}

fn put(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn take(r: &mut impl Read) -> Result<u32, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| IoError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32, IoError> {
    u32::try_from(v).map_err(|_| IoError::Format(format!("{what} {v} does not fit in u32")))
}

/// Writes `grids` as f32; values are rounded to single precision.
pub fn write_grids(w: &mut impl Write, grids: &RawGridSet, k: usize) -> Result<(), IoError> {
    w.write_all(GRID_MAGIC)?;
    put(w, GRID_VERSION)?;
    put(w, to_u32(grids.grids.len(), "level count")?)?;
    put(w, to_u32(k, "k")?)?;
    for g in &grids.grids {
        put(w, g.stride)?;
        for (v, what) in [(g.anchors, "anchors"), (g.channels, "channels"), (g.h, "rows"), (g.w, "cols")] {
            put(w, to_u32(v, what)?)?;
        }
    }
    for g in &grids.grids {
        for v in &g.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a grid file, returning the grids and the part count `k`.
pub fn read_grids(r: &mut impl Read) -> Result<(RawGridSet, usize), IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| IoError::Format(format!("truncated header: {e}")))?;
    if &magic != GRID_MAGIC {
        return Err(IoError::Format(format!("bad magic {magic:?}")));
    }
    let version = take(r)?;
    if version != GRID_VERSION {
        return Err(IoError::Format(format!("unsupported version {version}")));
    }
    let levels = take(r)? as usize;
    let k = take(r)? as usize;
    let channels_expected = 3 * k + 6;
    let mut shapes = Vec::with_capacity(levels.min(64));
    for _ in 0..levels {
        let stride = take(r)?;
        let (a, c, h, w) = (take(r)? as usize, take(r)? as usize, take(r)? as usize, take(r)? as usize);
        if c != channels_expected {
            return Err(IoError::Format(format!("stride {stride} has {c} channels, expected {channels_expected}")));
        }
        shapes.push((stride, a, c, h, w));
    }
    let mut grids = Vec::with_capacity(levels);
    for (stride, a, c, h, w) in shapes {
        let n = a
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| IoError::Format("grid size overflows".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| IoError::Format(format!("truncated data at stride {stride}: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        grids.push(RawGrid { stride, anchors: a, channels: c, h, w, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(IoError::Format("trailing bytes after grid data".into()));
    }
    Ok((RawGridSet { grids }, k))
}

pub fn save_grids(path: &Path, grids: &RawGridSet, schema: &PartSchema) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|error| IoError::File { path: path.display().to_string(), error })?;
    let mut w = BufWriter::new(file);
    write_grids(&mut w, grids, schema.k)?;
    w.flush()?;
    Ok(())
}

pub fn load_grids(path: &Path) -> Result<(RawGridSet, usize), IoError> {
    let file = fs::File::open(path).map_err(|error| IoError::File { path: path.display().to_string(), error })?;
    read_grids(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::{GridSpec, DEFAULT_STRIDES};

    fn sample() -> (RawGridSet, PartSchema) {
        let spec = GridSpec::with_default_anchors(128, 64, &DEFAULT_STRIDES).unwrap();
        let schema = PartSchema::hands();
        let mut g = RawGridSet::filled(&spec, &schema, 0.0);
        for (i, v) in g.grids.iter_mut().flat_map(|l| l.data.iter_mut()).enumerate() {
            *v = (i as f64 * 0.37).sin() * 20.0;
        }
        (g, schema)
    }

    #[test]
    fn grid_file_roundtrip() {
        let (g, schema) = sample();
        let mut buf = Vec::new();
        write_grids(&mut buf, &g, schema.k).unwrap();
        let header = 16 + 20 * g.grids.len();
        assert_eq!(buf.len(), header + 4 * g.len());
        assert_eq!(&buf[..4], b"BPJG");
        let (back, k) = read_grids(&mut buf.as_slice()).unwrap();
        assert_eq!(k, 2);
        for (a, b) in g.grids.iter().zip(&back.grids) {
            assert_eq!((a.stride, a.anchors, a.channels, a.h, a.w), (b.stride, b.anchors, b.channels, b.h, b.w));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let (g, schema) = sample();
        let mut buf = Vec::new();
        write_grids(&mut buf, &g, schema.k).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_grids(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 3];
        assert!(read_grids(&mut &short[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_grids(&mut long.as_slice()).is_err());
        let mut wrong_k = buf;
        wrong_k[12] = 5;
        assert!(read_grids(&mut wrong_k.as_slice()).is_err());
    }
}
