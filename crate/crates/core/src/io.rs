//! Flat binary container for named f32 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   [u8; 4] = "MNTW"
//! version u32     = 1
//! count   u32
//! per tensor:
//!   name_len u16, name [u8; name_len] (UTF-8)
//!   rank     u8  (1..=4)
//!   dims     [u32; rank]
//!   data     [f32; prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNTW";
pub const VERSION: u32 = 1;

/// Hard cap on elements per tensor so a corrupt header cannot trigger an
/// enormous allocation before we hit the truncation check.
const MAX_ELEMS: u64 = 1 << 28;

pub fn write_tensors<W: Write>(w: &mut W, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many tensors for container".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name:?}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dim too large in {name:?}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Tracked { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} at offset 0, expected {MAGIC:?}"
        )));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} at offset 4"
        )));
    }
    let count = r.read_u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16()? as usize;
        let at = r.offset;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("non-UTF-8 tensor name at offset {at}")))?;
        let at = r.offset;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!(
                "tensor {name:?}: rank {rank} at offset {at} outside 1..=4"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32()? as usize);
        }
        let elems: u64 = dims.iter().map(|&d| d as u64).product();
        if elems == 0 || elems > MAX_ELEMS {
            return Err(Error::Format(format!(
                "tensor {name:?}: implausible dims {dims:?} at offset {at}"
            )));
        }
        let mut data = Vec::with_capacity(elems as usize);
        let mut buf = [0u8; 4];
        for _ in 0..elems {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let t = Tensor::new(&dims, data)
            .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, map: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let entries: Vec<(String, &Tensor<f32>)> =
        map.iter().map(|(k, v)| (k.clone(), v)).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = BufReader::new(File::open(path)?);
    let entries = read_tensors(&mut r)?;
    let mut map = BTreeMap::new();
    for (name, t) in entries {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    Ok(map)
}

/// Reader shim that tracks the byte offset so truncation errors can say
/// where the file ended.
struct Tracked<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Tracked<'_, R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!(
                    "truncated container: needed {} bytes at offset {}",
                    buf.len(),
                    self.offset
                ))
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}
