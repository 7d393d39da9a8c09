//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "COACHCKP"
//! version    u32      currently 1
//! meta_len   u64      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim × u64 dimensions
//!   data     product(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COACHCKP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, meta: &str, params: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, meta, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode<W: Write>(w: &mut W, meta: &str, params: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in p.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint, returning its metadata and named tensors in file order.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    decode(&mut r).map_err(|e| match e {
        DecodeError::Io(e) => Error::io(path, e),
        DecodeError::Format(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
    })
}

enum DecodeError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for DecodeError {
    fn from(e: std::io::Error) -> Self {
        DecodeError::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> std::result::Result<String, DecodeError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DecodeError::Format("invalid UTF-8".into()))
}

fn decode<R: Read>(r: &mut R) -> std::result::Result<(String, Vec<(String, Tensor)>), DecodeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DecodeError::Format("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(DecodeError::Format(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(r)? as usize;
    let meta = read_string(r, meta_len)?;
    let count = read_u32(r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| DecodeError::Format(e.to_string()))?;
        tensors.push((name, tensor));
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(), true).unwrap();
        store.add("b", Tensor::row(vec![0.1]), false).unwrap();
        store.add("s", Tensor::scalar(7.0), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        write_checkpoint(&path, "{\"k\":1}", &store).unwrap();
        let (meta, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(tensors.len(), 3);
        for ((name, t), (_, p)) in tensors.iter().zip(store.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(t.shape(), p.value.shape());
            let a: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = p.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
