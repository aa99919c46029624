//! Byte-oriented range coder over integer CDF tables.
//!
//! 48-bit range, 16-bit frequency precision, byte-wise renormalization with
//! carry handling through a cache/pending-byte pipeline. The coder is
//! strictly sequential by design: all parallelism in this codec lives in
//! entropy-parameter computation, never inside the arithmetic coder.
//!
//! Worst-case excess over the ideal code length is below 2^-24 bits per
//! symbol plus a 7-byte flush, comfortably inside the "1% + 64 bits" budget
//! the container format is tested against.

use crate::entropy::CdfTable;

const RANGE_BITS: u32 = 48;
/// Renormalize while range < 2^40 (emit one byte per shift).
const TOP: u64 = 1 << (RANGE_BITS - 8);
const RANGE_MASK: u64 = (1 << RANGE_BITS) - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoderError {
    /// Symbol outside the table it is being coded against.
    SymbolOutOfRange { symbol: i32, s_min: i32, s_max: i32 },
    /// Decoder ran past the end of the compressed stream.
    Truncated { position: usize },
}

impl std::fmt::Display for CoderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoderError::SymbolOutOfRange { symbol, s_min, s_max } => {
                write!(f, "symbol {symbol} outside coded range [{s_min}, {s_max}]")
            }
            CoderError::Truncated { position } => {
                write!(f, "compressed stream truncated at byte {position}")
            }
        }
    }
}

impl std::error::Error for CoderError {}

pub type Result<T> = std::result::Result<T, CoderError>;

/// Streaming range encoder. Create, feed symbols with their tables in order,
/// then `finish` to flush.
pub struct RangeEncoder {
    low: u64, // may transiently carry into bit 48
    range: u64,
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
        RangeEncoder {
            low: 0,
            range: RANGE_MASK,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: i32) -> Result<()> {
        if !table.contains(symbol) {
            return Err(CoderError::SymbolOutOfRange {
                symbol,
                s_min: table.s_min,
                s_max: table.s_max,
            });
        }
        let (lo, hi) = table.range_of(symbol);
        let r = self.range >> table.precision_bits;
        self.low += lo as u64 * r;
        self.range = r * (hi - lo) as u64;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < (0xFFu64 << (RANGE_BITS - 8)) || self.low > RANGE_MASK {
            let carry = (self.low >> RANGE_BITS) as u8;
            let mut byte = self.cache;
            while self.cache_size > 0 {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
            }
            self.cache = ((self.low >> (RANGE_BITS - 8)) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & (TOP - 1)) << 8;
    }

    /// Bytes emitted so far (pending carry bytes not included).
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    /// Flush all pending state; the result decodes to exactly the symbol
    /// sequence that was encoded.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..(RANGE_BITS / 8 + 1) {
            self.shift_low();
        }
        self.out
    }
}

/// Range decoder over a finished byte stream. Never reads past the slice;
/// truncated input surfaces as an error, not corruption.
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            code: 0,
            range: RANGE_MASK,
        };
        // first byte is the encoder's initial cache (always zero)
        let _ = d.next_byte()?;
        for _ in 0..(RANGE_BITS / 8) {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.buf.len() {
            return Err(CoderError::Truncated { position: self.pos });
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let r = self.range >> table.precision_bits;
        let cum = (self.code / r).min(table.total() as u64 - 1) as u32;
        let symbol = table.find(cum);
        let (lo, hi) = table.range_of(symbol);
        self.code -= lo as u64 * r;
        self.range = r * (hi - lo) as u64;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn bytes_read(&self) -> usize {
        self.pos
    }
}
