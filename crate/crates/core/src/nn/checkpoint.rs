//! Checkpoint layout, little-endian:
//!
//! ```text
//! "RRCK1" | u32 count | count * (u32 name_len | name | u32 rank | rank * u32 dim | f32 data)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RRCK1";

pub fn write_checkpoint<W: Write>(params: &ParamStore<f32>, mut out: W) -> Result<(), NnError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore<f32>, NnError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(5)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = cur.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("tensor too large"))?;
        let data = cur
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(&name, Tensor::new(&shape, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore<f32>, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>, NnError> {
    read_checkpoint(fs::File::open(path)?)
}
