//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LIPN" | version: u32
//! repeated until EOF:
//!     name_len: u32 | name: UTF-8 | rank: u32 | extents: u32 * rank | payload: f64 * prod(extents)
//! ```

use std::io::{Read, Write};

use crate::error::ModelError;
use crate::tensor::Tensor;

use super::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LIPN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), ModelError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for p in model.params() {
        let name = p.name.as_bytes();
        w.write_all(&u32_of(name.len())?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&u32_of(p.tensor.rank())?.to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(n: usize) -> Result<u32, ModelError> {
    u32::try_from(n).map_err(|_| ModelError::Checkpoint(format!("value {n} does not fit in u32")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("missing LIPN magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(self, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<(), ModelError> {
        self.load_params(read_checkpoint(r)?)
    }
}
