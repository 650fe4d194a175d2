//! Entropy coding: quantization, the conditional Gaussian entropy model,
//! integer CDF tables, a byte-oriented range coder, and the bitstream
//! container that ties them to a specific model.

pub mod gaussian;

mod cdf;
mod quantize;
mod rangecoder;
mod stream;

pub use cdf::{
    symbol_index, ChannelCdf, LikelihoodModel, CDF_BITS, CDF_TOTAL, NUM_SYMBOLS, SYMBOL_MAX,
    SYMBOL_MIN,
};
pub use quantize::{dequantize, quantize_infer, quantize_train, uniform_noise, QuantizedLatent};
pub use rangecoder::{RangeDecoder, RangeEncoder};
pub use stream::{
    decode_latent, encode_latent, stream_bits, Bitstream, StreamHeader, BITSTREAM_MAGIC,
    BITSTREAM_VERSION, HEADER_BYTES,
};
