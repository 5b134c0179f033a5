//! Spread-spectrum schemes carrying the 32-bit signature fingerprint.
//!
//! The carrier signal is split into 32 equal segments, one per fingerprint
//! bit. Segment `i` receives `bipolar[i] · α · prn[j]` on every sample `j`,
//! where `prn` is one continuous keyed sequence over all segments. Samples
//! past `32 · floor(n / 32)` are never touched.
//!
//! The perturbation is added identically to R, G and B so it lives in the
//! luminance direction; detection works on the per-pixel channel mean with
//! the 3×3 local mean removed, which strips most host-image energy from the
//! correlation before the per-segment mean is subtracted.

use serde::{Deserialize, Serialize};

use crate::payload::{fingerprint_match, Fingerprint32, PublicKey, DEFAULT_CORR_THRESHOLD, FINGERPRINT_BITS};
use crate::signal::{self, CoeffPlane};
use crate::{payload, Error, Raster, Result};

/// Minimum samples per segment for a usable correlation.
pub const MIN_SEGMENT_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadParams {
    pub strength: f64,
    pub num_segments: usize,
    pub corr_threshold: f64,
    pub prn_seed: u64,
}

impl SpreadParams {
    pub fn new(prn_seed: u64) -> Self {
        SpreadParams {
            strength: 2.0,
            num_segments: FINGERPRINT_BITS,
            corr_threshold: DEFAULT_CORR_THRESHOLD,
            prn_seed,
        }
    }

    /// Defaults with the noise seed derived from `pk`.
    pub fn for_key(pk: &PublicKey) -> Self {
        SpreadParams::new(payload::prn_seed(pk))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength.is_finite() && self.strength >= 0.0) {
            return Err(Error::InvalidParams(format!("strength {} must be >= 0", self.strength)));
        }
        if self.num_segments != FINGERPRINT_BITS {
            return Err(Error::InvalidParams(format!(
                "num_segments must equal the fingerprint width {FINGERPRINT_BITS}"
            )));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "corr_threshold {} must be in (0, 1]",
                self.corr_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpreadScheme {
    /// Pixel domain.
    Spatial,
    /// LL subband of a one-level Haar split.
    Wavelet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadDetection {
    pub recovered: Fingerprint32,
    pub correlation: f64,
    pub ber: f64,
    pub valid: bool,
}

impl SpreadScheme {
    pub fn encode(self, img: &Raster, fp: Fingerprint32, params: &SpreadParams) -> Result<Raster> {
        match self {
            SpreadScheme::Spatial => encode_ss(img, fp, params),
            SpreadScheme::Wavelet => encode_dwtss(img, fp, params),
        }
    }

    pub fn detect(self, img: &Raster, expected: Fingerprint32, params: &SpreadParams) -> Result<SpreadDetection> {
        match self {
            SpreadScheme::Spatial => detect_ss(img, expected, params),
            SpreadScheme::Wavelet => detect_dwtss(img, expected, params),
        }
    }
}

fn segment_len(samples: usize, params: &SpreadParams) -> Result<usize> {
    let needed = params.num_segments * MIN_SEGMENT_LEN;
    if samples < needed {
        return Err(Error::CarrierTooSmall(format!(
            "{samples} carrier samples, spread spectrum needs at least {needed}"
        )));
    }
    Ok(samples / params.num_segments)
}

/// Per-sample additive pattern for a carrier of `samples` values.
fn modulation(samples: usize, fp: Fingerprint32, params: &SpreadParams) -> Result<Vec<f64>> {
    params.validate()?;
    let seg = segment_len(samples, params)?;
    let prn = signal::prn_generate(params.prn_seed, seg * params.num_segments)?;
    let bipolar = fp.bipolar();
    let mut pattern = vec![0.0; samples];
    for (j, (p, &chip)) in pattern.iter_mut().zip(prn.values()).enumerate() {
        *p = f64::from(bipolar[j / seg]) * params.strength * f64::from(chip);
    }
    Ok(pattern)
}

/// Bit `i` is the sign of the mean-removed correlation of segment `i`.
fn correlate(samples: &[f64], params: &SpreadParams) -> Result<Fingerprint32> {
    params.validate()?;
    let seg = segment_len(samples.len(), params)?;
    let prn = signal::prn_generate(params.prn_seed, seg * params.num_segments)?;
    let bits: Vec<bool> = samples
        .chunks_exact(seg)
        .zip(prn.values().chunks_exact(seg))
        .take(params.num_segments)
        .map(|(s, chips)| {
            let mean = s.iter().sum::<f64>() / seg as f64;
            let score: f64 = s.iter().zip(chips).map(|(v, &c)| (v - mean) * f64::from(c)).sum();
            score > 0.0
        })
        .collect();
    Ok(Fingerprint32::from_bits(&bits))
}

fn detection(recovered: Fingerprint32, expected: Fingerprint32, params: &SpreadParams) -> SpreadDetection {
    let m = fingerprint_match(recovered, expected, params.corr_threshold);
    SpreadDetection {
        recovered,
        correlation: m.correlation,
        ber: m.ber,
        valid: m.valid,
    }
}

pub fn encode_ss(img: &Raster, fp: Fingerprint32, params: &SpreadParams) -> Result<Raster> {
    let pattern = modulation(img.pixel_count(), fp, params)?;
    let mut out = img.clone();
    for (px, &delta) in out.data_mut().chunks_exact_mut(3).zip(&pattern) {
        for v in px.iter_mut() {
            *v = signal::quantize_sample(f64::from(*v) + delta);
        }
    }
    Ok(out)
}

/// Fingerprint read from the pixel domain without comparing it to anything.
pub fn recover_ss(img: &Raster, params: &SpreadParams) -> Result<Fingerprint32> {
    let residual = signal::remove_local_mean(&img.luminance_plane());
    correlate(residual.values(), params)
}

pub fn detect_ss(img: &Raster, expected: Fingerprint32, params: &SpreadParams) -> Result<SpreadDetection> {
    Ok(detection(recover_ss(img, params)?, expected, params))
}

fn ll_count(img: &Raster) -> usize {
    (img.width() / 2) * (img.height() / 2)
}

pub fn encode_dwtss(img: &Raster, fp: Fingerprint32, params: &SpreadParams) -> Result<Raster> {
    let pattern = modulation(ll_count(img), fp, params)?;
    let mut out = img.clone();
    for channel in 0..3 {
        let mut plane = img.channel_plane(channel);
        let mut bands = signal::haar_dwt_forward(&plane)?;
        for (c, &delta) in bands.ll.values_mut().iter_mut().zip(&pattern) {
            *c += delta;
        }
        plane.paste(&signal::haar_dwt_inverse(&bands)?);
        out.set_channel(channel, &signal::to_raster(&plane))?;
    }
    Ok(out)
}

pub fn recover_dwtss(img: &Raster, params: &SpreadParams) -> Result<Fingerprint32> {
    if ll_count(img) == 0 {
        return Err(Error::CarrierTooSmall("no LL coefficients".into()));
    }
    let bands = signal::haar_dwt_forward(&img.luminance_plane())?;
    let residual: CoeffPlane = signal::remove_local_mean(&bands.ll);
    correlate(residual.values(), params)
}

pub fn detect_dwtss(img: &Raster, expected: Fingerprint32, params: &SpreadParams) -> Result<SpreadDetection> {
    Ok(detection(recover_dwtss(img, params)?, expected, params))
}
