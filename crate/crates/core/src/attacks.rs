//! Post-distribution distortions: Gaussian blur, JPEG recompression and a
//! downscale/upscale round trip.

use image::ImageFormat;
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use serde::{Deserialize, Serialize};

use crate::signal::{self, CoeffPlane};
use crate::{Error, Raster, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    GaussianBlur,
    Jpeg,
    Resize,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::GaussianBlur => "gaussian_blur",
            AttackKind::Jpeg => "jpeg",
            AttackKind::Resize => "resize",
        }
    }

    /// Canonical names, plus `blur` for `gaussian_blur`.
    pub fn parse(name: &str) -> Option<Self> {
        if name == "blur" {
            return Some(AttackKind::GaussianBlur);
        }
        [AttackKind::None, AttackKind::GaussianBlur, AttackKind::Jpeg, AttackKind::Resize]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub blur_sigma: f64,
    pub jpeg_quality: u8,
    pub resize_factor: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            blur_sigma: 0.5,
            jpeg_quality: 50,
            resize_factor: 0.8,
        }
    }
}

impl AttackSpec {
    pub fn of_kind(kind: AttackKind) -> Self {
        AttackSpec { kind, ..Default::default() }
    }

    pub fn none() -> Self {
        AttackSpec::default()
    }

    pub fn gaussian_blur(sigma: f64) -> Self {
        AttackSpec { kind: AttackKind::GaussianBlur, blur_sigma: sigma, ..Default::default() }
    }

    pub fn jpeg(quality: u8) -> Self {
        AttackSpec { kind: AttackKind::Jpeg, jpeg_quality: quality, ..Default::default() }
    }

    pub fn resize(factor: f64) -> Self {
        AttackSpec { kind: AttackKind::Resize, resize_factor: factor, ..Default::default() }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma > 0.0) {
            return Err(Error::InvalidParams(format!("blur sigma {} must be > 0", self.blur_sigma)));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::InvalidParams(format!(
                "JPEG quality {} outside 1..=100",
                self.jpeg_quality
            )));
        }
        if !(self.resize_factor > 0.0 && self.resize_factor < 1.0) {
            return Err(Error::InvalidParams(format!(
                "resize factor {} must be in (0, 1)",
                self.resize_factor
            )));
        }
        Ok(())
    }
}

/// Clean baseline followed by blur(0.5), JPEG(50) and resize(0.8).
pub fn attack_suite() -> Vec<AttackSpec> {
    vec![
        AttackSpec::none(),
        AttackSpec::gaussian_blur(0.5),
        AttackSpec::jpeg(50),
        AttackSpec::resize(0.8),
    ]
}

pub fn apply_attack(img: &Raster, spec: &AttackSpec) -> Result<Raster> {
    spec.validate()?;
    match spec.kind {
        AttackKind::None => Ok(img.clone()),
        AttackKind::GaussianBlur => gaussian_blur(img, spec.blur_sigma),
        AttackKind::Jpeg => jpeg_round_trip(img, spec.jpeg_quality),
        AttackKind::Resize => resize_round_trip(img, spec.resize_factor),
    }
}

/// Normalized 1-D kernel over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable blur with clamp-to-edge, before any quantization.
pub fn gaussian_blur_plane(plane: &CoeffPlane, sigma: f64) -> CoeffPlane {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (plane.width(), plane.height());
    let mut horizontal = CoeffPlane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    wt * plane.get(xx, y)
                })
                .sum();
            horizontal.set(x, y, v);
        }
    }
    let mut out = CoeffPlane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    wt * horizontal.get(x, yy)
                })
                .sum();
            out.set(x, y, v);
        }
    }
    out
}

pub fn gaussian_blur(img: &Raster, sigma: f64) -> Result<Raster> {
    let mut out = img.clone();
    for c in 0..3 {
        let blurred = gaussian_blur_plane(&img.channel_plane(c), sigma);
        out.set_channel(c, &signal::to_raster(&blurred))?;
    }
    Ok(out)
}

/// Baseline JPEG with 4:2:0 chroma subsampling.
pub fn encode_jpeg(img: &Raster, quality: u8) -> Result<Vec<u8>> {
    let (w, h) = (
        u16::try_from(img.width()).map_err(|_| Error::JpegEncode("width exceeds 65535".into()))?,
        u16::try_from(img.height()).map_err(|_| Error::JpegEncode("height exceeds 65535".into()))?,
    );
    let mut buf = Vec::new();
    let mut encoder = Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(SamplingFactor::R_4_2_0);
    encoder
        .encode(img.data(), w, h, ColorType::Rgb)
        .map_err(|e| Error::JpegEncode(e.to_string()))?;
    Ok(buf)
}

pub fn jpeg_round_trip(img: &Raster, quality: u8) -> Result<Raster> {
    let bytes = encode_jpeg(img, quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?;
    Ok(Raster::from_rgb_image(&decoded.to_rgb8()))
}

/// Bilinear resampling with pixel-centre alignment.
fn bilinear(src: &CoeffPlane, dst_w: usize, dst_h: usize) -> CoeffPlane {
    let (sw, sh) = (src.width(), src.height());
    let sx = sw as f64 / dst_w as f64;
    let sy = sh as f64 / dst_h as f64;
    let mut out = CoeffPlane::zeros(dst_w, dst_h);
    for y in 0..dst_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dst_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
            let bottom = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
            out.set(x, y, top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn resize_raster(img: &Raster, w: usize, h: usize) -> Result<Raster> {
    let mut data = vec![0u8; w * h * 3];
    for c in 0..3 {
        let plane = bilinear(&img.channel_plane(c), w, h);
        for (i, v) in signal::to_raster(&plane).into_iter().enumerate() {
            data[i * 3 + c] = v;
        }
    }
    Raster::new(w, h, data)
}

/// Downscale by `factor` per axis, then upscale back to the original size.
pub fn resize_round_trip(img: &Raster, factor: f64) -> Result<Raster> {
    let w = (factor * img.width() as f64).round() as usize;
    let h = (factor * img.height() as f64).round() as usize;
    if w < 2 || h < 2 {
        return Err(Error::CarrierTooSmall(format!(
            "downscaled size {w}x{h} is below 2x2"
        )));
    }
    let small = resize_raster(img, w, h)?;
    resize_raster(&small, img.width(), img.height())
}
