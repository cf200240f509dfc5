//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MAPU"  u32 version
//! repeated until EOF:
//!   u32 name_len, name (UTF-8), u32 rank, rank x u64 dims, numel x f32 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MAPU";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_container<'a, W, I>(mut w: W, tensors: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a container held in memory. `origin` only labels errors.
pub fn read_container(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bad = |msg: &str| Error::ingestion(origin, msg);
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4) != Some(CONTAINER_MAGIC.as_slice()) {
        return Err(bad("missing MAPU magic"));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let truncated = || bad("truncated tensor record");
        let name_len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(name_len).ok_or_else(truncated)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("tensor dimensions overflow"))?;
        let raw = c
            .take(numel.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub(crate) fn save_file(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, tensors.iter().map(|(n, t)| (n.as_str(), t)))
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_container(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_record_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, [("w", &t)]).unwrap();
        let mut expected = b"MAPU".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        let back = read_container(&buf, Path::new("mem")).unwrap();
        assert_eq!(back, vec![("w".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_container(b"NOPE\x01\0\0\0", Path::new("mem")).is_err());
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, [("abc", &t)]).unwrap();
        buf.pop();
        assert!(matches!(
            read_container(&buf, Path::new("mem")),
            Err(Error::Ingestion { .. })
        ));
    }
}
