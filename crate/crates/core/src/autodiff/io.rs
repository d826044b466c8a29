//! Little-endian binary container for named tensors.
//!
//! ```text
//! magic    b"FBTC"
//! version  u32 (currently 1)
//! count    u32
//! table    count x { name_len u32, name utf-8, rank u32, dims u64 x rank }
//! payload  f64 x sum(numel), tensors in table order
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FBTC";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut out: W, entries: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in entries {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode_tensors(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, entries).expect("writing to memory");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Malformed {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Malformed {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("count")? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Malformed {
                offset: at + 4,
                detail: "name is not utf-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        table.push((name, shape));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Malformed {
            offset: c.pos,
            detail: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_tensors(&bytes)
}
