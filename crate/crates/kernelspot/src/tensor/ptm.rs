//! PTM: the crate's portable tensor-map file format.
//!
//! Layout, all little-endian: magic `PTM1`, `u32` rank, rank `u32` dims,
//! then `product(dims)` raw `f32` values. Instance-id maps ride along as
//! float-encoded ids, which is exact below 2^24.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorMap;

const MAGIC: &[u8; 4] = b"PTM1";

pub fn write_ptm(t: &TensorMap, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ptm(mut r: impl Read) -> Result<TensorMap> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::parse(format!(
            "bad PTM magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let rank = read_u32(&mut r, "rank")? as usize;
    if rank == 0 {
        return Err(Error::parse("PTM rank must be positive"));
    }
    // Caps nothing real (a rank-64 tensor is already nonsense) but stops a
    // corrupt header from driving a huge allocation below.
    if rank > 64 {
        return Err(Error::parse(format!("implausible PTM rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len = 1usize;
    for i in 0..rank {
        let d = read_u32(&mut r, "dims")? as usize;
        if d == 0 {
            return Err(Error::parse(format!("PTM dim {i} is zero")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::parse("PTM dims overflow"))?;
        dims.push(d);
    }
    let mut data = vec![0f32; len];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        read_exact(&mut r, &mut buf, "values")?;
        *v = f32::from_le_bytes(buf);
    }
    TensorMap::new(dims, data)
}

pub fn read_ptm_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let f = File::open(path)
        .map_err(|e| Error::parse(format!("cannot open {}: {e}", path.display())))?;
    read_ptm(BufReader::new(f))
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

/// Writes via a sibling temp file plus rename, so readers never observe a
/// half-written tensor.
pub fn write_ptm_file(t: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_sibling(path);
    {
        let f = File::create(&tmp)?;
        let mut w = BufWriter::new(f);
        write_ptm(t, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::parse(format!("truncated PTM stream while reading {what}")))
}
