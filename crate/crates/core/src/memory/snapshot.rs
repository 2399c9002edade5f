//! Versioned little-endian checkpoint of a [`DualMemoryBank`].
//!
//! ```text
//! "E3RM" | version u32 | key_dim u32 | value_dim u32 | short_term_frames u32
//!        | long_term_capacity u32 | beta f64
//!        | n_groups u32 | { frame_id u64 | n_tokens u32 | token* }*
//!        | n_long u32 | token*
//! token  = frame_id u64 | patch_index u32 | confidence f64
//!        | uncertainty f64 (NaN when unset) | key f64*key_dim | value f64*value_dim
//! ```

use std::collections::VecDeque;

use super::{DualMemoryBank, FrameTokens, MemoryConfig, MemoryError, MemoryToken};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"E3RM";
pub const SNAPSHOT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MemoryError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            MemoryError::Snapshot(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MemoryError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, MemoryError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, MemoryError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn write_token(out: &mut Vec<u8>, t: &MemoryToken) {
    out.extend_from_slice(&t.frame_id.to_le_bytes());
    out.extend_from_slice(&t.patch_index.to_le_bytes());
    out.extend_from_slice(&t.confidence.to_le_bytes());
    out.extend_from_slice(&t.uncertainty.unwrap_or(f64::NAN).to_le_bytes());
    for x in t.key.iter().chain(&t.value) {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_token(r: &mut Reader, cfg: &MemoryConfig) -> Result<MemoryToken, MemoryError> {
    let frame_id = r.u64()?;
    let patch_index = r.u32()?;
    let confidence = r.f64()?;
    let u = r.f64()?;
    let key = (0..cfg.key_dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let value = (0..cfg.value_dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok(MemoryToken {
        key,
        value,
        frame_id,
        patch_index,
        confidence,
        uncertainty: if u.is_nan() { None } else { Some(u) },
    })
}

fn len_u32(n: usize) -> [u8; 4] {
    u32::try_from(n).expect("count fits in u32").to_le_bytes()
}

impl DualMemoryBank {
    pub fn to_snapshot(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        for n in [c.key_dim, c.value_dim, c.short_term_frames, c.long_term_capacity] {
            out.extend_from_slice(&len_u32(n));
        }
        out.extend_from_slice(&c.beta.to_le_bytes());
        out.extend_from_slice(&len_u32(self.short_term.len()));
        for g in &self.short_term {
            out.extend_from_slice(&g.frame_id.to_le_bytes());
            out.extend_from_slice(&len_u32(g.tokens.len()));
            for t in &g.tokens {
                write_token(&mut out, t);
            }
        }
        out.extend_from_slice(&len_u32(self.long_term.len()));
        for t in &self.long_term {
            write_token(&mut out, t);
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, MemoryError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(MemoryError::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(MemoryError::Snapshot(format!("unsupported version {version}")));
        }
        let config = MemoryConfig {
            key_dim: r.u32()? as usize,
            value_dim: r.u32()? as usize,
            short_term_frames: r.u32()? as usize,
            long_term_capacity: r.u32()? as usize,
            beta: r.f64()?,
        };
        config.validate()?;
        let n_groups = r.u32()?;
        let mut short_term = VecDeque::new();
        for _ in 0..n_groups {
            let frame_id = r.u64()?;
            let n = r.u32()?;
            let tokens = (0..n).map(|_| read_token(&mut r, &config)).collect::<Result<_, _>>()?;
            short_term.push_back(FrameTokens { frame_id, tokens });
        }
        let n_long = r.u32()?;
        let long_term = (0..n_long).map(|_| read_token(&mut r, &config)).collect::<Result<_, _>>()?;
        if r.pos != bytes.len() {
            return Err(MemoryError::Snapshot(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let bank = Self {
            config,
            short_term,
            long_term,
        };
        bank.check_invariants().map_err(MemoryError::Snapshot)?;
        Ok(bank)
    }
}
