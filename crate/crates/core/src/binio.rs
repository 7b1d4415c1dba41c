//! Little-endian binary records and atomic file replacement.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> BinReader<'a> {
    pub fn new(data: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if data.len() < 8 || &data[..8] != magic {
            return Err(Error::parse(format!("{what} byte 0"), "bad magic header"));
        }
        Ok(Self { data, pos: 8, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::parse(
                format!("{} byte {}", self.what, self.pos),
                format!("truncated: needed {n} more bytes, {} left", self.data.len() - self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.data.len() - self.pos {
            return Err(Error::parse(
                format!("{} byte {}", self.what, self.pos),
                format!("length {n} runs past the end of the data"),
            ));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::parse(format!("{} byte {at}", self.what), e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::parse(
                format!("{} byte {}", self.what, self.pos),
                "trailing bytes",
            ));
        }
        Ok(())
    }
}

/// Writes through a temporary file in the same directory, then renames.
/// Reads a whole file; errors name the path.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut w = BinWriter::new(b"TESTTEST");
        w.str("héllo");
        w.f64s(&[1.5, -0.0, f64::MIN_POSITIVE]);
        w.u64(7);
        let bytes = w.into_bytes();
        let mut r = BinReader::new(&bytes, b"TESTTEST", "t").unwrap();
        assert_eq!(r.str().unwrap(), "héllo");
        let v = r.f64s().unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.u64().unwrap(), 7);
        r.finish().unwrap();
        for cut in [3, 12, bytes.len() - 1] {
            let res = BinReader::new(&bytes[..cut], b"TESTTEST", "t").and_then(|mut r| {
                r.str()?;
                r.f64s()?;
                r.u64()
            });
            assert!(matches!(res, Err(Error::Parse { .. })), "cut {cut}");
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
