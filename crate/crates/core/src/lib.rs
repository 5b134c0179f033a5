//! Signed-identity image watermarking with harm-gated attribution.
//!
//! Five embedding schemes share one RSA identity layer: three bit-exact
//! schemes (blue-channel LSB, 8×8 DCT parity, Haar LH parity) carry the full
//! 1024-bit signature, two spread-spectrum schemes (spatial, Haar LL) carry a
//! 32-bit fingerprint of it. A fusion MLP over frozen image/text embeddings
//! decides whether a pair is harmful; only flagged pairs are traced back to
//! the embedded identity.

pub mod attacks;
pub mod bench;
pub mod bitlevel;
pub mod corpus;
pub mod detector;
mod error;
pub mod payload;
pub mod pipeline;
pub mod raster;
pub mod signal;
pub mod spread;

pub use error::{Error, Result};
pub use raster::Raster;
