//! Versioned little-endian encoding of client uploads.
//!
//! ```text
//! magic "FCSP" | version u16 = 1 | client_id u32 | round u32 | pack u32 | entry_count u32
//! entry_count x ( package_index u32 | theta f32 | beta f32 | len u32 | len x f32 )
//! ```
//!
//! An update therefore occupies `22 + sum(16 + 4 * len)` bytes. Every traffic
//! number the simulator reports is the length of one of these buffers.

use alloc::vec::Vec;
use core::fmt;

pub const MAGIC: [u8; 4] = *b"FCSP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;
pub const ENTRY_OVERHEAD: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEntry {
    pub package_index: u32,
    pub theta: f32,
    pub beta: f32,
    pub payload: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedUpdate {
    pub client_id: u32,
    pub round: u32,
    pub pack: u32,
    /// Sorted by `package_index`, no duplicates.
    pub entries: Vec<UpdateEntry>,
}

impl PackedUpdate {
    /// Byte length of the encoded form, from the layout alone.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|e| ENTRY_OVERHEAD + 4 * e.payload.len())
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    BadMagic { offset: usize },
    BadVersion { offset: usize, found: u16 },
    Truncated { offset: usize },
    Unsorted { offset: usize, index: u32 },
    BadLength { offset: usize, len: u32 },
    BadTerm { offset: usize },
    TrailingBytes { offset: usize },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::BadMagic { offset } => write!(f, "bad magic at offset {offset}"),
            DecodeError::BadVersion { offset, found } => {
                write!(f, "unsupported version {found} at offset {offset}")
            }
            DecodeError::Truncated { offset } => write!(f, "truncated at offset {offset}"),
            DecodeError::Unsorted { offset, index } => {
                write!(f, "unsorted entries: package {index} at offset {offset}")
            }
            DecodeError::BadLength { offset, len } => {
                write!(f, "invalid payload length {len} at offset {offset}")
            }
            DecodeError::BadTerm { offset } => {
                write!(f, "mask term out of range at offset {offset}")
            }
            DecodeError::TrailingBytes { offset } => write!(f, "trailing bytes at offset {offset}"),
        }
    }
}

impl core::error::Error for DecodeError {}

pub fn encode_update(u: &PackedUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(u.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u.client_id.to_le_bytes());
    out.extend_from_slice(&u.round.to_le_bytes());
    out.extend_from_slice(&u.pack.to_le_bytes());
    out.extend_from_slice(&(u.entries.len() as u32).to_le_bytes());
    for e in &u.entries {
        out.extend_from_slice(&e.package_index.to_le_bytes());
        out.extend_from_slice(&e.theta.to_le_bytes());
        out.extend_from_slice(&e.beta.to_le_bytes());
        out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
        for x in &e.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or(DecodeError::Truncated { offset: self.pos })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice of length N"))
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.take().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32, DecodeError> {
        self.take().map(f32::from_le_bytes)
    }
}

pub fn decode_update(bytes: &[u8]) -> Result<PackedUpdate, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take::<4>()? != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DecodeError::BadVersion {
            offset: 4,
            found: version,
        });
    }
    let client_id = r.u32()?;
    let round = r.u32()?;
    let pack = r.u32()?;
    let count = r.u32()?;

    // each entry needs at least ENTRY_OVERHEAD bytes; avoid huge preallocation
    let room = bytes.len().saturating_sub(HEADER_LEN) / ENTRY_OVERHEAD;
    let mut entries = Vec::with_capacity((count as usize).min(room));
    let mut last: Option<u32> = None;
    for _ in 0..count {
        let at = r.pos;
        let package_index = r.u32()?;
        if last.is_some_and(|prev| package_index <= prev) {
            return Err(DecodeError::Unsorted {
                offset: at,
                index: package_index,
            });
        }
        last = Some(package_index);
        let term_at = r.pos;
        let theta = r.f32()?;
        let beta = r.f32()?;
        if !(-1.0..=1.0).contains(&theta) || !(beta.is_finite() && beta >= 0.0) {
            return Err(DecodeError::BadTerm { offset: term_at });
        }
        let len_at = r.pos;
        let len = r.u32()?;
        if len == 0 || len > pack {
            return Err(DecodeError::BadLength {
                offset: len_at,
                len,
            });
        }
        let need = 4 * len as usize;
        if bytes.len() - r.pos < need {
            return Err(DecodeError::Truncated { offset: r.pos });
        }
        let mut payload = Vec::with_capacity(len as usize);
        for _ in 0..len {
            payload.push(r.f32()?);
        }
        entries.push(UpdateEntry {
            package_index,
            theta,
            beta,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes { offset: r.pos });
    }
    Ok(PackedUpdate {
        client_id,
        round,
        pack,
        entries,
    })
}
