//! Little-endian binary container primitives shared by the deploy-graph and
//! checkpoint formats: a growable writer, a checked reader with byte-offset
//! error reporting, and CRC32 framing.
//!
//! Layout convention for both formats: a 4-byte magic, a u32 version, the
//! payload, and a trailing CRC32 (IEEE) over everything before it,
//! including the magic. All integers are little-endian.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.put_u32(version);
        w
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn put_str(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize, "string too long for container");
        self.buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn put_f32_slice(&mut self, v: &[f32]) {
        for x in v {
            self.put_f32(*x);
        }
    }

    pub fn put_i32_slice(&mut self, v: &[i32]) {
        for x in v {
            self.put_i32(*x);
        }
    }

    /// Appends the CRC32 of everything written so far and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.put_u32(crc);
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version, and the trailing CRC32, then positions the
    /// reader at the start of the payload.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], expect_version: u32) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Parse {
                offset: buf.len(),
                msg: "file too short for header and checksum".into(),
            });
        }
        if &buf[..4] != magic {
            return Err(Error::Parse {
                offset: 0,
                msg: format!(
                    "bad magic {:02x?}, expected {:?}",
                    &buf[..4],
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Parse {
                offset: buf.len() - 4,
                msg: format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.get_u32()?;
        if version != expect_version {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported format version {version}, expected {expect_version}"),
            });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("unexpected end of payload: need {n} bytes, have {}", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn get_str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "invalid utf-8 in string field".into(),
        })
    }

    pub fn get_f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn get_i32_vec(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Fails unless the payload was consumed exactly.
    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("{} trailing bytes after payload", self.remaining()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 4] = b"TST1";

    #[test]
    fn roundtrip() {
        let mut w = Writer::new(MAGIC, 3);
        w.put_u32(42);
        w.put_str("hello");
        w.put_f32(1.25);
        let bytes = w.finish();

        let mut r = Reader::open(&bytes, MAGIC, 3).unwrap();
        assert_eq!(r.get_u32().unwrap(), 42);
        assert_eq!(r.get_str().unwrap(), "hello");
        assert_eq!(r.get_f32().unwrap(), 1.25);
        r.expect_end().unwrap();
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let mut w = Writer::new(MAGIC, 1);
        w.put_u32(7);
        let mut bytes = w.finish();
        bytes[9] ^= 0x01;
        let err = Reader::open(&bytes, MAGIC, 1);
        assert!(matches!(err, Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_file_fails() {
        let mut w = Writer::new(MAGIC, 1);
        w.put_u32(7);
        let bytes = w.finish();
        let err = Reader::open(&bytes[..bytes.len() - 2], MAGIC, 1);
        assert!(matches!(err, Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let w = Writer::new(MAGIC, 2);
        let bytes = w.finish();
        let err = Reader::open(&bytes, MAGIC, 1).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
