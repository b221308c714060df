//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `MMCK`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, name bytes (UTF-8), rank `u32`,
//! `rank` extents as `u64`, and the values as `f64`.

use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

pub fn write_entries<'a, W: Write>(
    w: &mut W,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumError::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(NumError::Checkpoint(format!("entry `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl ParamStore {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.iter().map(|(_, p)| (p.name.as_str(), &p.tensor)).collect();
        write_entries(w, entries.into_iter())
    }

    /// Overwrites parameter values from a checkpoint. The checkpoint must
    /// hold exactly the same names and shapes as the store.
    pub fn load_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let entries = read_entries(r)?;
        self.assign_entries(entries)
    }

    pub fn assign_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(NumError::Checkpoint(format!(
                "checkpoint has {} entries, model has {}",
                entries.len(),
                self.len()
            )));
        }
        let mut resolved = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            let id = self
                .id(&name)
                .map_err(|_| NumError::Checkpoint(format!("unexpected entry `{name}`")))?;
            if self.value(id).shape() != t.shape() {
                return Err(NumError::Checkpoint(format!(
                    "entry `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.value(id).shape()
                )));
            }
            resolved.push((id, t));
        }
        for (id, t) in resolved {
            self.get_mut(id).tensor = t;
        }
        Ok(())
    }
}
