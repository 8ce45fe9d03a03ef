//! Little-endian framing shared by every binary checkpoint in the crate.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Reads a u64 length field and checks it fits the platform and a sanity bound.
pub fn read_len<R: Read>(r: &mut R, what: &str, max: u64) -> Result<usize> {
    let n = read_u64(r)?;
    if n > max {
        return Err(Error::Checkpoint(format!(
            "{what} = {n} exceeds limit {max}"
        )));
    }
    Ok(n as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("unexpected end of data".into())
    } else {
        Error::Io(e)
    }
}
