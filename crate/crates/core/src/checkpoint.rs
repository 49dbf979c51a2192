//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DYNS"  u32 version
//! repeated until EOF:
//!   u32 name_len, name (UTF-8), u32 rank, u64 extents[rank], f64 payload[product(extents)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DYNS";
pub const VERSION: u32 = 1;

/// Named tensors in insertion order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_to<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact_or(&mut cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut cur, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut cur, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut cur, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut cur, &mut b, "extent")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|bytes| bytes > cur.len()) {
            return Err(Error::Checkpoint(format!("payload for `{name}` is truncated")));
        }
        let data = (0..n)
            .map(|_| {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b).map(|_| f64::from_le_bytes(b))
            })
            .collect::<std::io::Result<Vec<f64>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, params: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensors> {
    read_from(std::fs::File::open(path)?)
}
