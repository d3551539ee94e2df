//! Single-file binary archive of named 2-D sections plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"QOSGCKPT" u32:version
//! u32:n_meta  { str:key str:value }*
//! u32:n_sect  { str:name u64:rows u64:cols f64[rows*cols] }*
//! ```
//!
//! where `str` is `u32:len` followed by UTF-8 bytes. Values are stored as raw
//! IEEE-754 bits so a write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QOSGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, Array2<f64>)>,
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, data: Array2<f64>) {
        self.sections.push((name.into(), data));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            write_str(&mut out, name);
            write_matrix(&mut out, data).expect("writing to a Vec");
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut archive = Archive::default();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            archive.meta.insert(k, v);
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let data = read_matrix(r)?;
            archive.sections.push((name, data));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Shape header followed by row-major values.
pub fn write_matrix(out: &mut impl Write, data: &Array2<f64>) -> std::io::Result<()> {
    out.write_all(&(data.nrows() as u64).to_le_bytes())?;
    out.write_all(&(data.ncols() as u64).to_le_bytes())?;
    for v in data.iter() {
        out.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated archive".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
}

pub fn read_matrix(r: &mut impl Read) -> Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Checkpoint("section shape overflows".into()))?;
    let mut values = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        values.push(f64::from_bits(read_u64(r)?));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Checkpoint(format!("bad section shape: {e}")))
}
