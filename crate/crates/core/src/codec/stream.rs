//! Bitstream container and whole-latent coding.
//!
//! Header (32 bytes, all little-endian): magic `RCBS`, version, original
//! RAW dims, crop dims, latent dims, a 64-bit model identity hash, the
//! lambda index the weights were trained at, and the payload bit length.
//! The header alone determines every tensor shape, so a decoder can
//! validate before touching the payload.

use super::cdf::{ChannelCdf, LikelihoodModel};
use super::quantize::QuantizedLatent;
use super::rangecoder::{RangeDecoder, RangeEncoder};
use crate::{Error, Result};

pub const BITSTREAM_MAGIC: [u8; 4] = *b"RCBS";
pub const BITSTREAM_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub raw_h: u16,
    pub raw_w: u16,
    pub crop_h: u16,
    pub crop_w: u16,
    pub latent_h: u16,
    pub latent_w: u16,
    pub latent_c: u16,
    pub model_id: u64,
    pub lambda_index: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn payload_bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }

    /// Total coded size including the header, in bits.
    pub fn total_bits(&self) -> u64 {
        8 * HEADER_BYTES as u64 + self.payload_bits()
    }

    /// Bits per pixel of the reconstructed crop.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (f64::from(self.header.crop_h) * f64::from(self.header.crop_w))
    }

    pub fn check_model(&self, expected_id: u64) -> Result<()> {
        if self.header.model_id != expected_id {
            return Err(Error::Invalid(format!(
                "bitstream was coded with model {:016x}, decoder has {expected_id:016x}",
                self.header.model_id
            )));
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        for v in [h.raw_h, h.raw_w, h.crop_h, h.crop_w, h.latent_h, h.latent_w, h.latent_c] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.model_id.to_le_bytes());
        out.push(h.lambda_index);
        out.extend_from_slice(&(self.payload_bits() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Bitstream> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated { offset: bytes.len() });
        }
        if bytes[0..4] != BITSTREAM_MAGIC {
            return Err(Error::Invalid("not a bitstream (bad magic)".into()));
        }
        if bytes[4] != BITSTREAM_VERSION {
            return Err(Error::Invalid(format!("unsupported bitstream version {}", bytes[4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let header = StreamHeader {
            raw_h: u16_at(5),
            raw_w: u16_at(7),
            crop_h: u16_at(9),
            crop_w: u16_at(11),
            latent_h: u16_at(13),
            latent_w: u16_at(15),
            latent_c: u16_at(17),
            model_id: u64::from_le_bytes(bytes[19..27].try_into().unwrap()),
            lambda_index: bytes[27],
        };
        let bit_len = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
        if bit_len % 8 != 0 {
            return Err(Error::Invalid(format!("payload bit length {bit_len} is not byte-aligned")));
        }
        let want = bit_len / 8;
        let have = bytes.len() - HEADER_BYTES;
        if have < want {
            return Err(Error::Truncated { offset: bytes.len() });
        }
        if have > want {
            return Err(Error::Invalid(format!("{} trailing bytes after payload", have - want)));
        }
        Ok(Bitstream { header, payload: bytes[HEADER_BYTES..].to_vec() })
    }
}

/// Range-code a quantized latent. Symbols are visited in memory order;
/// the channel index cycles fastest, matching the [h, w, c] layout.
pub fn encode_latent(q: &QuantizedLatent, model: &LikelihoodModel) -> Result<Vec<u8>> {
    if q.channels != model.channels() {
        return Err(Error::shape(
            "encode",
            format!("latent has {} channels, entropy model has {}", q.channels, model.channels()),
        ));
    }
    let tables = model.tables();
    let mut enc = RangeEncoder::new();
    for (i, &s) in q.symbols.iter().enumerate() {
        let c = i % q.channels;
        enc.encode_symbol(&tables[c], i32::from(s)).map_err(|e| {
            Error::Invalid(format!("cannot code element {i} (channel {c}): {e}"))
        })?;
    }
    Ok(enc.finish())
}

pub fn decode_latent(
    payload: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    model: &LikelihoodModel,
) -> Result<QuantizedLatent> {
    if channels != model.channels() {
        return Err(Error::shape(
            "decode",
            format!("header says {channels} channels, entropy model has {}", model.channels()),
        ));
    }
    let tables = model.tables();
    let mut dec = RangeDecoder::new(payload)?;
    let n = height * width * channels;
    let mut symbols = Vec::with_capacity(n);
    for i in 0..n {
        let s = dec.decode_symbol(&tables[i % channels])?;
        symbols.push(s as i8);
    }
    Ok(QuantizedLatent { symbols, height, width, channels, clamped: 0 })
}

/// Information content of the symbols under the integer CDF tables, in
/// bits. The coder's payload stays within 1% + 64 bits of this.
pub fn stream_bits(q: &QuantizedLatent, model: &LikelihoodModel) -> Result<f64> {
    let tables: Vec<ChannelCdf> = model.tables();
    let mut bits = 0.0;
    for (i, &s) in q.symbols.iter().enumerate() {
        bits += tables[i % q.channels].symbol_bits(i32::from(s))?;
    }
    Ok(bits)
}
