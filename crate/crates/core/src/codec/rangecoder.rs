//! Byte-oriented range coder over 16-bit integer CDFs.
//!
//! Carry-less encoder: pending 0xFF bytes are counted rather than buffered,
//! and a later carry turns the run into cache+1 followed by zeros. The
//! decoder consumes one leading dummy byte the encoder's flush produces,
//! then mirrors the renormalization exactly, so the pair is bit-exact for
//! any table sequence.

use super::cdf::{ChannelCdf, CDF_BITS, CDF_TOTAL};
use crate::{Error, Result};

/// Renormalize whenever the range drops below 2^24 (one byte of headroom).
const TOP: u32 = 1 << 24;

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
    pub fn new() -> RangeEncoder {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode_symbol(&mut self, table: &ChannelCdf, symbol: i32) -> Result<()> {
        let (low, freq) = table.span(symbol)?;
        let r = self.range >> CDF_BITS;
        self.low += u64::from(r) * u64::from(low);
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low > u64::from(u32::MAX) {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = u64::from((self.low as u32) << 8);
    }

    /// Flush the remaining state. Always emits at least 5 bytes total.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut d = RangeDecoder { buf, pos: 0, range: u32::MAX, code: 0 };
        d.byte()?; // encoder flush always starts with a dummy byte
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.byte()?);
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = self
            .buf
            .get(self.pos)
            .copied()
            .ok_or(Error::Truncated { offset: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_symbol(&mut self, table: &ChannelCdf) -> Result<i32> {
        let r = self.range >> CDF_BITS;
        let cum = (self.code / r).min(CDF_TOTAL - 1);
        let symbol = table.find(cum);
        let (low, freq) = table.span(symbol).expect("find returns in-support symbols");
        self.code = self.code.wrapping_sub(r * low);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.byte()?);
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far, including the 5 initialization bytes.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}
