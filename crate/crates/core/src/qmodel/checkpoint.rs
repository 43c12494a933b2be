//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "QTECKPT\0"
//! version   u32      currently 1
//! count     u32      number of tensors
//! table     count x { name_len u16, name utf-8, block_count u32,
//!                     block_count x { name_len u16, name utf-8, rows u64, cols u64 } }
//! data      every block of every tensor in table order, f64 each
//! ```

use std::io::{Read, Write};

use super::ModelSet;
use crate::error::{QteError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QTECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| QteError::Checkpoint("name too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| QteError::Checkpoint("tensor name is not utf-8".into()))
}

pub fn save_checkpoint<W: Write>(models: &ModelSet, mut w: W) -> Result<()> {
    let tensors = models.tensors();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, params) in &tensors {
        write_name(&mut w, name)?;
        w.write_all(&(params.blocks().len() as u32).to_le_bytes())?;
        for b in params.blocks() {
            write_name(&mut w, b.name)?;
            w.write_all(&(b.rows as u64).to_le_bytes())?;
            w.write_all(&(b.cols as u64).to_le_bytes())?;
        }
    }
    for (_, params) in &tensors {
        for v in params.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads parameters into `models`, whose shapes must match the stored table.
pub fn load_checkpoint<R: Read>(models: &mut ModelSet, mut r: R) -> Result<()> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(QteError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(QteError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let expected = models.tensors();
    if count != expected.len() {
        return Err(QteError::Checkpoint(format!(
            "checkpoint has {count} tensors, model has {}",
            expected.len()
        )));
    }
    for (name, params) in &expected {
        let stored = read_name(&mut r)?;
        if &stored != name {
            return Err(QteError::Checkpoint(format!("expected tensor {name}, found {stored}")));
        }
        let blocks = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if blocks != params.blocks().len() {
            return Err(QteError::Checkpoint(format!("block count mismatch in {name}")));
        }
        for b in params.blocks() {
            let bname = read_name(&mut r)?;
            let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
            let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
            if bname != b.name || rows != b.rows || cols != b.cols {
                return Err(QteError::Checkpoint(format!(
                    "shape mismatch for {name}.{}: stored {bname} {rows}x{cols}, expected {}x{}",
                    b.name, b.rows, b.cols
                )));
            }
        }
    }
    drop(expected);
    for p in models
        .depths
        .iter_mut()
        .map(|d| d.params_mut())
        .chain(std::iter::once(models.heads.params_mut()))
    {
        for v in p.as_mut_slice() {
            *v = f64::from_le_bytes(read_array(&mut r)?);
        }
    }
    Ok(())
}
