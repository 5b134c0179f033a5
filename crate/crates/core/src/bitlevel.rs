//! Bit-exact schemes carrying the full RSA signature in the blue channel:
//! least-significant bits, 8×8 DCT coefficient parity, and Haar LH parity.

use serde::{Deserialize, Serialize};

use crate::payload::SignedPayload;
use crate::raster::BLUE;
use crate::signal::{self, CoeffPlane, BLOCK};
use crate::{Error, Raster, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitCodecParams {
    /// `(row, col)` inside each 8×8 block.
    pub dct_coeff_pos: (usize, usize),
    pub dct_quant_step: f64,
    pub dwt_quant_step: f64,
}

impl Default for BitCodecParams {
    fn default() -> Self {
        BitCodecParams {
            dct_coeff_pos: (3, 2),
            dct_quant_step: 16.0,
            dwt_quant_step: 8.0,
        }
    }
}

impl BitCodecParams {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.dct_coeff_pos;
        if r >= BLOCK || c >= BLOCK || !(2..=8).contains(&(r + c)) {
            return Err(Error::InvalidParams(format!(
                "DCT position ({r}, {c}) is not a mid-frequency coefficient"
            )));
        }
        for (name, step) in [("DCT", self.dct_quant_step), ("DWT", self.dwt_quant_step)] {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::InvalidParams(format!("{name} quant step {step} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitScheme {
    Lsb,
    Dct,
    Dwt,
}

impl BitScheme {
    pub fn encode(self, img: &Raster, sp: &SignedPayload, params: &BitCodecParams) -> Result<Raster> {
        match self {
            BitScheme::Lsb => encode_lsb(img, sp),
            BitScheme::Dct => encode_dct(img, sp, params),
            BitScheme::Dwt => encode_dwt(img, sp, params),
        }
    }

    pub fn decode(self, img: &Raster, bit_length: usize, params: &BitCodecParams) -> Result<Vec<u8>> {
        Ok(bits_to_bytes(&self.read_bits(img, bit_length, params)?))
    }

    pub fn read_bits(self, img: &Raster, bit_length: usize, params: &BitCodecParams) -> Result<Vec<bool>> {
        match self {
            BitScheme::Lsb => read_lsb_bits(img, bit_length),
            BitScheme::Dct => {
                let step = params.dct_quant_step;
                Ok(dct_slots(img, bit_length, params)?.iter().map(|&c| parity_bit(c, step)).collect())
            }
            BitScheme::Dwt => {
                let step = params.dwt_quant_step;
                Ok(dwt_slots(img, bit_length)?.iter().map(|&c| parity_bit(c, step)).collect())
            }
        }
    }
}

/// MSB-first expansion of each byte.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).map(move |i| (b >> (7 - i)) & 1 == 1))
        .collect()
}

/// Packs MSB-first; a trailing partial byte is zero-padded.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
        })
        .collect()
}

fn capacity_check(needed: usize, available: usize) -> Result<()> {
    if available < needed {
        return Err(Error::Capacity { needed, available });
    }
    Ok(())
}

pub fn encode_lsb_bits(img: &Raster, bits: &[bool]) -> Result<Raster> {
    capacity_check(bits.len(), img.pixel_count())?;
    let mut out = img.clone();
    for (px, &bit) in out.data_mut().chunks_exact_mut(3).zip(bits) {
        px[BLUE] = (px[BLUE] & 0xFE) | u8::from(bit);
    }
    Ok(out)
}

/// Writes signature bit `i` into the LSB of the `i`-th blue sample.
pub fn encode_lsb(img: &Raster, sp: &SignedPayload) -> Result<Raster> {
    encode_lsb_bits(img, &bytes_to_bits(&sp.signature))
}

fn read_lsb_bits(img: &Raster, bit_length: usize) -> Result<Vec<bool>> {
    capacity_check(bit_length, img.pixel_count())?;
    Ok(img
        .data()
        .chunks_exact(3)
        .take(bit_length)
        .map(|px| px[BLUE] & 1 == 1)
        .collect())
}

pub fn decode_lsb(img: &Raster, bit_length: usize) -> Result<Vec<u8>> {
    BitScheme::Lsb.decode(img, bit_length, &BitCodecParams::default())
}

#[inline]
fn parity_bit(coeff: f64, step: f64) -> bool {
    ((coeff / step).round() as i64).rem_euclid(2) == 1
}

/// Snaps `coeff` to the nearest multiple of `step` whose quotient has the
/// parity of `bit`. When the nearest multiple has the wrong parity the
/// neighbour closer to `coeff` wins; an exact tie moves up.
pub fn embed_parity(coeff: f64, step: f64, bit: bool) -> f64 {
    let q = (coeff / step).round();
    let parity = (q as i64).rem_euclid(2) == 1;
    if parity == bit {
        return q * step;
    }
    let up = (q + 1.0) * step;
    let down = (q - 1.0) * step;
    if (coeff - up).abs() <= (coeff - down).abs() {
        up
    } else {
        down
    }
}

fn dct_capacity(img: &Raster) -> usize {
    (img.width() / BLOCK) * (img.height() / BLOCK)
}

/// Position of embedding slot `k` (row-major over full blocks) in the plane.
fn dct_slot_xy(k: usize, img_width: usize, params: &BitCodecParams) -> (usize, usize) {
    let blocks_x = img_width / BLOCK;
    let (row, col) = params.dct_coeff_pos;
    ((k % blocks_x) * BLOCK + col, (k / blocks_x) * BLOCK + row)
}

fn dct_slots(img: &Raster, n: usize, params: &BitCodecParams) -> Result<Vec<f64>> {
    params.validate()?;
    capacity_check(n, dct_capacity(img))?;
    let coeffs = signal::block_dct_forward(&img.channel_plane(BLUE))?;
    Ok((0..n)
        .map(|k| {
            let (x, y) = dct_slot_xy(k, img.width(), params);
            coeffs.get(x, y)
        })
        .collect())
}

pub fn encode_dct_bits(img: &Raster, bits: &[bool], params: &BitCodecParams) -> Result<Raster> {
    params.validate()?;
    capacity_check(bits.len(), dct_capacity(img))?;
    let mut coeffs = signal::block_dct_forward(&img.channel_plane(BLUE))?;
    for (k, &bit) in bits.iter().enumerate() {
        let (x, y) = dct_slot_xy(k, img.width(), params);
        coeffs.set(x, y, embed_parity(coeffs.get(x, y), params.dct_quant_step, bit));
    }
    let plane = signal::block_dct_inverse(&coeffs)?;
    let mut out = img.clone();
    out.set_channel(BLUE, &signal::to_raster(&plane))?;
    Ok(out)
}

/// Bit `k` sets the parity of the quantized mid-frequency coefficient of
/// blue-channel block `k`.
pub fn encode_dct(img: &Raster, sp: &SignedPayload, params: &BitCodecParams) -> Result<Raster> {
    encode_dct_bits(img, &bytes_to_bits(&sp.signature), params)
}

pub fn decode_dct(img: &Raster, bit_length: usize, params: &BitCodecParams) -> Result<Vec<u8>> {
    BitScheme::Dct.decode(img, bit_length, params)
}

fn dwt_capacity(img: &Raster) -> usize {
    (img.width() / 2) * (img.height() / 2)
}

fn dwt_slots(img: &Raster, n: usize) -> Result<Vec<f64>> {
    capacity_check(n, dwt_capacity(img))?;
    let bands = signal::haar_dwt_forward(&img.channel_plane(BLUE))?;
    Ok(bands.lh.values()[..n].to_vec())
}

pub fn encode_dwt_bits(img: &Raster, bits: &[bool], params: &BitCodecParams) -> Result<Raster> {
    params.validate()?;
    capacity_check(bits.len(), dwt_capacity(img))?;
    let mut plane = img.channel_plane(BLUE);
    let mut bands = signal::haar_dwt_forward(&plane)?;
    for (c, &bit) in bands.lh.values_mut().iter_mut().zip(bits) {
        *c = embed_parity(*c, params.dwt_quant_step, bit);
    }
    plane.paste(&signal::haar_dwt_inverse(&bands)?);
    let mut out = img.clone();
    out.set_channel(BLUE, &signal::to_raster(&plane))?;
    Ok(out)
}

/// Bit `i` sets the parity of the `i`-th quantized LH coefficient of the
/// blue channel's one-level Haar split.
pub fn encode_dwt(img: &Raster, sp: &SignedPayload, params: &BitCodecParams) -> Result<Raster> {
    encode_dwt_bits(img, &bytes_to_bits(&sp.signature), params)
}

pub fn decode_dwt(img: &Raster, bit_length: usize, params: &BitCodecParams) -> Result<Vec<u8>> {
    BitScheme::Dwt.decode(img, bit_length, params)
}

/// One embedding slot whose decoded bit disagrees with the expected bit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityMismatch {
    pub slot: usize,
    pub coefficient: f64,
    pub quantized: i64,
    pub expected_bit: bool,
}

/// Lists every slot whose re-quantized parity no longer matches `expected`.
/// For LSB the "coefficient" is the blue sample value.
pub fn parity_trace(
    img: &Raster,
    scheme: BitScheme,
    expected: &[bool],
    params: &BitCodecParams,
) -> Result<Vec<ParityMismatch>> {
    let (values, step): (Vec<f64>, f64) = match scheme {
        BitScheme::Lsb => {
            capacity_check(expected.len(), img.pixel_count())?;
            let v = img.channel(BLUE)[..expected.len()].iter().map(|&b| f64::from(b)).collect();
            (v, 1.0)
        }
        BitScheme::Dct => (dct_slots(img, expected.len(), params)?, params.dct_quant_step),
        BitScheme::Dwt => (dwt_slots(img, expected.len())?, params.dwt_quant_step),
    };
    let trace = values
        .iter()
        .zip(expected)
        .enumerate()
        .filter_map(|(slot, (&c, &bit))| {
            let quantized = (c / step).round() as i64;
            ((quantized.rem_euclid(2) == 1) != bit).then_some(ParityMismatch {
                slot,
                coefficient: c,
                quantized,
                expected_bit: bit,
            })
        })
        .collect::<Vec<_>>();
    for m in &trace {
        log::debug!("{scheme:?} slot {} parity flipped: {m:?}", m.slot);
    }
    Ok(trace)
}

/// Coefficient plane of the blue channel for DCT inspection in tests.
pub fn blue_dct(img: &Raster) -> Result<CoeffPlane> {
    signal::block_dct_forward(&img.channel_plane(BLUE))
}
