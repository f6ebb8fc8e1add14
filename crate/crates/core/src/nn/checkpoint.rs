//! Binary checkpoint format.
//!
//! Layout: magic bytes `ZIQE`, format version `u32` LE, then one record per
//! tensor in sorted name order: name length `u32`, UTF-8 name bytes, rank
//! `u32`, each dimension `u32`, then the values as little-endian `f32`.
//! Tensors are rank 2 throughout this crate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::errors::{Result, ZiqeError};
use crate::nn::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZIQE";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(tensor.nrows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.ncols() as u32).to_le_bytes())?;
        for &v in tensor.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Offset<'a, R> {
    inner: &'a mut R,
    pos: u64,
}

impl<R: Read> Offset<'_, R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            ZiqeError::Format(format!("checkpoint truncated at byte offset {}", self.pos))
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut file = BufReader::new(File::open(path)?);
    let mut r = Offset {
        inner: &mut file,
        pos: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ZiqeError::Format("bad checkpoint magic".into()));
    }
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ZiqeError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.inner.read_exact(&mut len_buf) {
            Ok(()) => r.pos += 4,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ZiqeError::Format("non-UTF8 tensor name".into()))?;
        let rank = r.read_u32()?;
        if rank != 2 {
            return Err(ZiqeError::Format(format!(
                "tensor {name} has unsupported rank {rank}"
            )));
        }
        let rows = r.read_u32()? as usize;
        let cols = r.read_u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ZiqeError::Format(format!("tensor {name}: {e}")))?;
        store.insert(&name, tensor);
    }
    Ok(store)
}
