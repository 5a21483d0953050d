//! Carry-less 32-bit range coder (Subbotin) over 16-bit frequency tables.

use super::cdf::{QuantizedCdf, FREQ_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + freq)` of a 2^16 total.
    #[inline]
    pub fn encode_range(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << FREQ_BITS);
        self.range >>= FREQ_BITS;
        self.low = self.low.wrapping_add(start * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    #[inline]
    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: usize) {
        let (start, freq) = cdf.range(symbol);
        self.encode_range(start, freq);
    }

    /// `bits` raw bits (at most 16) with a flat distribution.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= FREQ_BITS && value < 1 << bits);
        let unit = 1 << (FREQ_BITS - bits);
        self.encode_range(value * unit, unit);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Decode("range coder ran past the end of its substream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Position of the next symbol inside the 2^16 total. Must be followed
    /// by [`RangeDecoder::consume`].
    #[inline]
    pub fn target(&mut self) -> u32 {
        self.range >>= FREQ_BITS;
        let v = self.code.wrapping_sub(self.low) / self.range;
        v.min((1 << FREQ_BITS) - 1)
    }

    #[inline]
    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(start * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let t = self.target();
        let s = cdf.find(t);
        let (start, freq) = cdf.range(s);
        self.consume(start, freq)?;
        Ok(s)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let unit = 1 << (FREQ_BITS - bits);
        let v = self.target() / unit;
        self.consume(v * unit, unit)?;
        Ok(v)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
