//! On-disk formats: a small binary archive of named `f64` matrices and TOML
//! metadata side files.
//!
//! Archive layout (little endian): magic `PROIAW`, `u16` version, `u32` entry
//! count, then per entry `u32` name length, UTF-8 name, `u64` rows, `u64`
//! cols and `rows * cols` row-major `f64` values.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::hex_prefix;
use crate::nn::Params;

const MAGIC: &[u8; 6] = b"PROIAW";
const VERSION: u16 = 1;

/// Hex SHA-256 prefix of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex_prefix(&Sha256::digest(bytes))
}

pub fn write_params(path: &Path, params: &Params) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated weight archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_params(path: &Path) -> Result<Params> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(6)? != MAGIC {
        return Err(Error::Format(format!("{} is not a weight archive", path.display())));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = c.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("non UTF-8 parameter name".into()))?
            .to_string();
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let total = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix too large".into()))?;
        let raw = c.take(total)?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
        params.push(name, m);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in weight archive".into()));
    }
    Ok(params)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut p = Params::new();
        p.push("a", array![[1.5, -2.0], [0.25, f64::MIN_POSITIVE]]);
        p.push("bias", Array2::zeros((1, 3)));
        write_params(&path, &p).unwrap();
        assert_eq!(read_params(&path).unwrap(), p);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(read_params(&path), Err(Error::Format(_))));
        let mut p = Params::new();
        p.push("a", array![[1.0]]);
        write_params(&path, &p).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_params(&path).is_err());
    }
}
