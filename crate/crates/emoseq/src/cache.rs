//! Binary tensor records used for on-disk feature caches and checkpoints.
//!
//! Record layout (all integers little-endian):
//! magic `EMSQ` | version `u16` | ndims `u16` | dims `u16` each | `f32` data
//! in row-major order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMSQ";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"EMSQ\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("dimension {0} does not fit in u16")]
    DimTooLarge(usize),
    #[error("record truncated")]
    Truncated,
}

/// A dense row-major f32 tensor as stored in a cache record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn write_record<W: Write>(w: &mut W, record: &TensorRecord) -> Result<(), CacheError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let ndims = u16::try_from(record.dims.len()).map_err(|_| CacheError::DimTooLarge(record.dims.len()))?;
    w.write_all(&ndims.to_le_bytes())?;
    for &d in &record.dims {
        let d16 = u16::try_from(d).map_err(|_| CacheError::DimTooLarge(d))?;
        w.write_all(&d16.to_le_bytes())?;
    }
    for &v in &record.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R) -> Result<TensorRecord, CacheError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic(magic));
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(CacheError::UnsupportedVersion(version));
    }
    let ndims = read_u16(r)? as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u16(r)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0f32; count];
    let mut buf = [0u8; 4];
    for slot in &mut data {
        read_exact(r, &mut buf)?;
        *slot = f32::from_le_bytes(buf);
    }
    Ok(TensorRecord { dims, data })
}

pub fn write_record_file(path: &Path, record: &TensorRecord) -> Result<(), CacheError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_record(&mut w, record)?;
    w.flush()?;
    Ok(())
}

pub fn read_record_file(path: &Path) -> Result<TensorRecord, CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    read_record(&mut r)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CacheError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CacheError::Truncated
        } else {
            CacheError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CacheError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_dims_and_data() {
        let rec = TensorRecord::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.25, 1e-7, -1e7]);
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        let back = read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let rec = TensorRecord::new(vec![1], vec![1.0]);
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_record(&mut buf.as_slice()), Err(CacheError::BadMagic(_))));
    }

    #[test]
    fn truncated_record_is_detected() {
        let rec = TensorRecord::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_record(&mut buf.as_slice()), Err(CacheError::Truncated)));
    }
}
