//! Byte layout of the three database files. All integers are little-endian,
//! strings are a u16 byte length followed by UTF-8.

use super::StoreError;

pub const META_FILE: &str = "meta.bin";
pub const PROFILE_FILE: &str = "profile.db";
pub const TRACE_FILE: &str = "trace.db";

pub const META_MAGIC: &[u8; 4] = b"HPAN";
pub const PROFILE_MAGIC: &[u8; 4] = b"HPPR";
pub const TRACE_MAGIC: &[u8; 4] = b"HPTR";
pub const VERSION: u32 = 1;

/// magic + version + entry count
pub const HEADER_LEN: usize = 12;
/// {u32 profile_id, u64 offset, u64 record_count}
pub const PROFILE_INDEX_ENTRY: usize = 20;
/// {u32 profile_id, u64 offset, u64 event_count, u64 t_begin_ns, u64 t_end_ns}
pub const TRACE_INDEX_ENTRY: usize = 36;
/// {u32 ctx_id, u16 metric_id, f64 value}
pub const RECORD_LEN: usize = 14;
/// {u64 timestamp_ns, u32 ctx_id}
pub const EVENT_LEN: usize = 12;

pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) -> Result<(), StoreError> {
        let len = u16::try_from(s.len())
            .map_err(|_| StoreError::InvalidImage(format!("string too long: {} bytes", s.len())))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

/// Bounds-checked cursor over a byte slice.
pub(crate) struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8], what: &'static str) -> Self {
        Decoder { data, pos: 0, what }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.data.len() - self.pos < n {
            return Err(StoreError::Format(format!(
                "{}: truncated at byte {} (need {n} more)",
                self.what, self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32, StoreError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, StoreError> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| StoreError::Format(format!("{}: invalid UTF-8 at byte {at}", self.what)))
    }

    pub fn header(&mut self, magic: &[u8; 4]) -> Result<(), StoreError> {
        let got = self.take(4)?;
        if got != magic {
            return Err(StoreError::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(StoreError::Format(format!(
                "{}: unsupported version {version}",
                self.what
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

#[inline]
pub(crate) fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[inline]
pub(crate) fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[inline]
pub(crate) fn read_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}
