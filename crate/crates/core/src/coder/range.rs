//! Byte-oriented range coder with carry propagation.
//!
//! State: 64-bit `low` (33 significant bits), 32-bit `range`, one cached
//! output byte plus a run of pending `0xFF` bytes. After every symbol the
//! range is renormalized by whole bytes until it is at least `2^24`.
//!
//! Encoding `(cum, freq)` out of `total`:
//!
//! ```text
//! r = range / total
//! low += r * cum
//! range = r * freq            (or range - r * cum for the last symbol)
//! while range < 2^24: range <<= 8; shift_low()
//! ```
//!
//! The stream starts with one zero byte (the initial cache) and ends with
//! five flush bytes, so an empty message is exactly 5 bytes.

use crate::error::{Error, Result};

pub const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encode the interval `[cum, cum + freq)` of `[0, total)`.
    ///
    /// `total` must not exceed `2^16` and `freq` must be positive.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= 1 << 16);
        let r = self.range / total;
        self.low += u64::from(r) * u64::from(cum);
        self.range = if cum + freq < total {
            r * freq
        } else {
            self.range - r * cum
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Encode `bits` (≤ 16) raw bits with a flat distribution.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < (1 << bits));
        self.encode(value, 1, 1 << bits);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        if d.next_byte()? != 0 {
            return Err(Error::Corrupt {
                offset: 0,
                reason: "range coder stream must start with a zero byte".into(),
            });
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or_else(|| Error::Corrupt {
            offset: self.pos,
            reason: "payload truncated".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Scaled target value in `[0, total)` for the next symbol.
    pub fn peek(&self, total: u32) -> Result<u32> {
        let r = self.range / total;
        let v = self.code / r;
        if self.code >= self.range {
            return Err(self.corrupt("code outside coder interval"));
        }
        Ok(v.min(total - 1))
    }

    /// Consume the interval previously located with [`peek`](Self::peek).
    pub fn consume(&mut self, cum: u32, freq: u32, total: u32) -> Result<()> {
        let r = self.range / total;
        self.code -= r * cum;
        self.range = if cum + freq < total {
            r * freq
        } else {
            self.range - r * cum
        };
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let total = 1 << bits;
        let v = self.peek(total)?;
        self.consume(v, 1, total)?;
        Ok(v)
    }

    pub fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Every byte of the stream must have been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.input.len() {
            return Err(Error::Corrupt {
                offset: self.pos,
                reason: format!("{} trailing bytes", self.input.len() - self.pos),
            });
        }
        Ok(())
    }
}
