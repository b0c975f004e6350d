//! Bit-exact wire format for quantized gradients.
//!
//! ```text
//! | norm: b_pre bits (IEEE-754 f32/f64) | c_0 | c_1 | ... | c_{d-1} | pad |
//! c_j (EWU)  = sign bit (1 = negative), then b-1 level bits
//! c_j (sign) = sign bit only
//! ```
//!
//! Every field is written most-significant bit first. The frame is
//! zero-padded to a whole byte; padding is ignored on decode.

use super::{Codec, NormPrecision, QuantizedGradient, QuantizerConfig};
use crate::error::{Error, Result};

/// Frame length in bits before padding: `d·b + b_pre`.
pub fn encoded_bits(dim: usize, codec: Codec, precision: NormPrecision) -> u64 {
    dim as u64 * codec.bits() as u64 + precision.bits() as u64
}

/// Frame length in bytes after padding.
pub fn encoded_len(dim: usize, codec: Codec, precision: NormPrecision) -> usize {
    encoded_bits(dim, codec, precision).div_ceil(8) as usize
}

struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        Self { bytes: Vec::with_capacity(bytes), bit_len: 0 }
    }

    /// Appends the low `width` bits of `value`, most significant first.
    fn put(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        let mut remaining = width;
        while remaining > 0 {
            let used = (self.bit_len % 8) as u32;
            if used == 0 {
                self.bytes.push(0);
            }
            let free = 8 - used;
            let take = free.min(remaining);
            let shift = remaining - take;
            let chunk = ((value >> shift) & ((1u64 << take) - 1)) as u8;
            let last = self.bytes.last_mut().expect("a byte was pushed");
            *last |= chunk << (free - take);
            remaining -= take;
            self.bit_len += take as u64;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Reads `width` bits; the caller has already checked the frame length.
    fn get(&mut self, width: u32) -> u64 {
        let mut out = 0u64;
        let mut remaining = width;
        while remaining > 0 {
            let byte = self.bytes[(self.pos / 8) as usize];
            let used = (self.pos % 8) as u32;
            let avail = 8 - used;
            let take = avail.min(remaining);
            let chunk = (byte >> (avail - take)) & (((1u16 << take) - 1) as u8);
            out = (out << take) | chunk as u64;
            remaining -= take;
            self.pos += take as u64;
        }
        out
    }
}

pub fn encode(q: &QuantizedGradient) -> Result<Vec<u8>> {
    q.validate()?;
    if !q.precision.is_representable(q.norm) {
        return Err(Error::Encoding(format!(
            "norm {} is not representable in {} bits",
            q.norm,
            q.precision.bits()
        )));
    }
    let mut w = BitWriter::with_capacity(encoded_len(q.dim(), q.codec, q.precision));
    match q.precision {
        NormPrecision::F32 => w.put((q.norm as f32).to_bits() as u64, 32),
        NormPrecision::F64 => w.put(q.norm.to_bits(), 64),
    }
    match q.codec {
        Codec::Ewu { bits } => {
            let level_bits = bits as u32 - 1;
            for (&neg, &level) in q.negative.iter().zip(&q.levels) {
                w.put(((neg as u64) << level_bits) | level as u64, bits as u32);
            }
        }
        Codec::SignOnly => {
            for &neg in &q.negative {
                w.put(neg as u64, 1);
            }
        }
    }
    debug_assert_eq!(w.bit_len, q.encoded_bits());
    Ok(w.finish())
}

pub fn decode(bytes: &[u8], dim: usize, cfg: &QuantizerConfig) -> Result<QuantizedGradient> {
    if dim == 0 {
        return Err(Error::InvalidInput("frame dimension must be at least 1".into()));
    }
    if let Codec::Ewu { bits } = cfg.codec {
        if !(Codec::MIN_EWU_BITS..=Codec::MAX_EWU_BITS).contains(&bits) {
            return Err(Error::Config(format!("EWU bits must be in 2..=32, got {bits}")));
        }
    }
    let expected = encoded_len(dim, cfg.codec, cfg.precision);
    if bytes.len() != expected {
        return Err(Error::Framing { expected, actual: bytes.len() });
    }
    let mut r = BitReader::new(bytes);
    let norm = match cfg.precision {
        NormPrecision::F32 => f32::from_bits(r.get(32) as u32) as f64,
        NormPrecision::F64 => f64::from_bits(r.get(64)),
    };
    if !norm.is_finite() || norm.is_sign_negative() {
        return Err(Error::Corrupt(format!("norm field decodes to {norm}")));
    }
    let mut negative = Vec::with_capacity(dim);
    let mut levels = Vec::with_capacity(dim);
    match cfg.codec {
        Codec::Ewu { bits } => {
            let level_bits = bits as u32 - 1;
            let s = cfg.codec.max_level();
            for j in 0..dim {
                let word = r.get(bits as u32);
                let level = (word & ((1u64 << level_bits) - 1)) as u32;
                if level > s {
                    return Err(Error::Corrupt(format!("coordinate {j} has level {level} > s = {s}")));
                }
                negative.push(word >> level_bits == 1);
                levels.push(level);
            }
        }
        Codec::SignOnly => {
            for _ in 0..dim {
                negative.push(r.get(1) == 1);
                levels.push(1);
            }
        }
    }
    Ok(QuantizedGradient { norm, negative, levels, codec: cfg.codec, precision: cfg.precision })
}
