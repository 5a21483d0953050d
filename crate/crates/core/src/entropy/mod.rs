//! Range coding over per-symbol quantized CDFs and the stream container.

pub mod cdf;
pub mod range_coder;
pub mod stream;

pub use cdf::{build_cdf, build_cdf_into, build_cdf_with, CdfScratch, QuantizedCdf, FREQ_BITS, FREQ_TOTAL, MAX_ALPHABET};
pub use range_coder::{RangeDecoder, RangeEncoder};
pub use stream::{CodecStream, StreamHeader};
