//! Flat binary file of named `f32` arrays.
//!
//! Layout (little endian): magic `MFCKPT01`, `u32` entry count, then per
//! entry `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{from_f32, to_f32, Layer, Scalar, Sequential};

const MAGIC: &[u8; 8] = b"MFCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read(path: &Path) -> Result<Vec<NamedArray>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = cur.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name =
            String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = cur.u32()?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedArray { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

/// Parameters then buffers of `seq`, named `<prefix>.<layer>.<name>`.
pub fn sequential_arrays<S: Scalar>(seq: &Sequential<S>, prefix: &str) -> Vec<NamedArray> {
    let mut out: Vec<NamedArray> = seq
        .named_params()
        .into_iter()
        .map(|(name, p)| NamedArray {
            name: format!("{prefix}.{name}"),
            shape: p.shape.clone(),
            data: to_f32(&p.value),
        })
        .collect();
    for (name, b) in seq.named_buffers() {
        out.push(NamedArray { name: format!("{prefix}.{name}"), shape: vec![b.value.len()], data: to_f32(&b.value) });
    }
    out
}

/// Looks arrays up by name, checking each length.
pub struct ArrayTable(std::collections::HashMap<String, NamedArray>);

impl ArrayTable {
    pub fn new(arrays: Vec<NamedArray>) -> Self {
        ArrayTable(arrays.into_iter().map(|a| (a.name.clone(), a)).collect())
    }

    pub fn take<S: Scalar>(&mut self, name: &str, len: usize) -> Result<Vec<S>> {
        let a = self.0.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if a.data.len() != len {
            return Err(Error::Checkpoint(format!("array `{name}` has {} values, expected {len}", a.data.len())));
        }
        Ok(from_f32(&a.data))
    }
}

/// Restores what [`sequential_arrays`] wrote.
pub fn load_sequential<S: Scalar>(seq: &mut Sequential<S>, prefix: &str, table: &mut ArrayTable) -> Result<()> {
    let names: Vec<String> = seq.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(seq.params_mut()) {
        p.value = table.take(&format!("{prefix}.{name}"), p.value.len())?;
    }
    for (name, b) in seq.named_buffers_mut() {
        b.value = table.take(&format!("{prefix}.{name}"), b.value.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let arrays = vec![
            NamedArray {
                name: "g.0.weight".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, 0.0, 1e-8, f32::MAX],
            },
            NamedArray { name: "scalar".into(), shape: vec![], data: vec![7.0] },
        ];
        write(&path, &arrays).unwrap();
        assert_eq!(read(&path).unwrap(), arrays);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read(&path).is_err());
    }
}
